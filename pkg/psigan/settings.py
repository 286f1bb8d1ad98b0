"""Loss-ablation settings: which generator-side terms each setting keeps."""

from dataclasses import dataclass


@dataclass(frozen=True)
class AblationMask:
    """Active loss terms for one training run.

    The segmentor is trained in every setting; only the terms that reach the
    generators (and the discriminators that produce them) are masked.
    """

    adv_cm: bool = True
    adv_mc: bool = True
    cyc: bool = True
    struct: bool = True

    @property
    def seg_coupled(self) -> bool:
        """Whether lambda_seg * L_seg^M-bar flows into the generator update."""
        return self.struct

    @property
    def uses_reverse_generator(self) -> bool:
        return self.adv_mc or self.cyc

    def active_terms(self) -> list[str]:
        names = ["adv_cm", "adv_mc", "cyc", "struct"]
        return [name for name in names if getattr(self, name)]


SETTING_NAMES: dict[int, str] = {
    1: "Forward adversarial only",
    2: "Cycle-consistent baseline",
    3: "Structure only",
    4: "Structure + forward adversarial",
    5: "Structure + reverse adversarial + cycle",
    6: "Full (all losses)",
}

SETTING_MASKS: dict[int, AblationMask] = {
    1: AblationMask(adv_cm=True, adv_mc=False, cyc=False, struct=False),
    2: AblationMask(adv_cm=True, adv_mc=True, cyc=True, struct=False),
    3: AblationMask(adv_cm=False, adv_mc=False, cyc=False, struct=True),
    4: AblationMask(adv_cm=True, adv_mc=False, cyc=False, struct=True),
    5: AblationMask(adv_cm=False, adv_mc=True, cyc=True, struct=True),
    6: AblationMask(),
}

DEFAULT_SETTING = 6


def get_mask_for_setting(setting: int) -> AblationMask:
    """Return the loss mask for an ablation setting.

    Args:
        setting: Ablation setting id (1-6, 6 = all losses)

    Returns:
        AblationMask with the active generator-side terms

    Raises:
        ValueError: If setting is not 1-6
    """
    if setting not in SETTING_MASKS:
        raise ValueError(f"Invalid setting: {setting}. Must be 1-6.")
    return SETTING_MASKS[setting]

"""Networks: generators, PatchGAN discriminators and the split segmentor.

A ModelBundle owns all of them. The segmentor stores its decoder once; both
branches S_M = E_M . DE and S_C^M = E_C^M . DE run through that single module.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from enum import Enum

import torch
import torch.nn as nn

from .losses import PairVariant, ProbabilityMap

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class Branch(Enum):
    S_M = "S_M"
    S_CM = "S_CM"

    @classmethod
    def parse(cls, value: str) -> Branch:
        normalized = value.replace("^", "").upper()
        for member in cls:
            if member.value.upper() == normalized:
                return member
        raise ValueError(f"Invalid branch: {value}. Must be S_M or S_CM.")


class SegmentorMode(Enum):
    SPLIT = "split"
    SINGLE = "single"


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    num_residual_blocks: int = 9
    num_downsampling: int = 2


@dataclass(frozen=True)
class PatchDiscriminatorSpec:
    """Conv stack; all but the last two layers have stride 2, widths double up to 8x."""

    in_channels: int = 1
    base_width: int = 64
    num_layers: int = 5
    kernel_size: int = 4
    padding: int = 1
    norm: str = "instance"

    def layers(self) -> list[tuple[int, int, int]]:
        """(out_channels, kernel, stride) per layer; the last layer emits one logit."""
        strided = max(self.num_layers - 2, 0)
        out: list[tuple[int, int, int]] = []
        for i in range(self.num_layers - 1):
            width = self.base_width * min(2**i, 8)
            out.append((width, self.kernel_size, 2 if i < strided else 1))
        out.append((1, self.kernel_size, 1))
        return out


@dataclass(frozen=True)
class SplitSegmentorSpec:
    in_channels: int = 1
    num_labels: int = 4
    widths: tuple[int, ...] = (64, 128, 256, 512)
    mode: SegmentorMode = SegmentorMode.SPLIT


@dataclass(frozen=True)
class NetworkPreset:
    generator: GeneratorSpec
    discriminator: PatchDiscriminatorSpec
    segmentor_widths: tuple[int, ...]


PRESETS: dict[str, NetworkPreset] = {
    "full": NetworkPreset(
        generator=GeneratorSpec(),
        discriminator=PatchDiscriminatorSpec(),
        segmentor_widths=(64, 128, 256, 512),
    ),
    "desk": NetworkPreset(
        generator=GeneratorSpec(base_width=16, num_residual_blocks=6),
        discriminator=PatchDiscriminatorSpec(base_width=16, num_layers=4),
        segmentor_widths=(16, 32, 64, 128),
    ),
    "tiny": NetworkPreset(
        generator=GeneratorSpec(base_width=4, num_residual_blocks=1),
        discriminator=PatchDiscriminatorSpec(base_width=4, num_layers=3),
        segmentor_widths=(4, 8, 8, 8),
    ),
}


def get_preset(name: str) -> NetworkPreset:
    if name not in PRESETS:
        raise ValueError(f"Unknown preset: {name}. Must be one of {', '.join(PRESETS)}.")
    return PRESETS[name]


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) conv weights, zero biases; batch-norm scale 1, shift 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Two stride-2 convs, residual blocks, two fractionally strided convs, tanh."""

    def __init__(self, spec: GeneratorSpec) -> None:
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        for i in range(spec.num_downsampling):
            mult = 2**i
            layers += [
                nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(w * mult * 2),
                nn.ReLU(inplace=True),
            ]
        mult = 2**spec.num_downsampling
        layers += [ResidualBlock(w * mult) for _ in range(spec.num_residual_blocks)]
        for i in range(spec.num_downsampling):
            m = 2 ** (spec.num_downsampling - i)
            layers += [
                nn.ConvTranspose2d(w * m, w * m // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(w * m // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """One unbounded logit per overlapping input patch."""

    def __init__(self, spec: PatchDiscriminatorSpec) -> None:
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        in_ch = spec.in_channels
        plan = spec.layers()
        for i, (out_ch, kernel, stride) in enumerate(plan):
            layers.append(nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=spec.padding))
            if i < len(plan) - 1:
                if i > 0 and spec.norm == "instance":
                    layers.append(nn.InstanceNorm2d(out_ch))
                layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch = out_ch
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"Discriminator expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        return self.model(x)


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Double-conv stages each followed by 2x2 max pooling, then a bottleneck."""

    def __init__(self, in_channels: int, widths: tuple[int, ...]) -> None:
        super().__init__()
        stages = []
        in_ch = in_channels
        for w in widths:
            stages.append(_double_conv(in_ch, w))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-1], widths[-1])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return skips + [self.bottleneck(x)]


class Decoder(nn.Module):
    """Unpooling stages fused with encoder skips, then a K-channel head."""

    def __init__(self, widths: tuple[int, ...], num_labels: int) -> None:
        super().__init__()
        ups, convs = [], []
        in_ch = widths[-1]
        for w in reversed(widths):
            ups.append(nn.ConvTranspose2d(in_ch, in_ch, 2, stride=2))
            convs.append(_double_conv(in_ch + w, w))
            in_ch = w
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(widths[0], num_labels, 1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x = features[-1]
        for up, conv, skip in zip(self.ups, self.convs, reversed(features[:-1])):
            x = conv(torch.cat([skip, up(x)], dim=1))
        return self.head(x)


class SplitSegmentor(nn.Module):
    """Two encoders sharing one decoder; single mode builds E_M only."""

    def __init__(self, spec: SplitSegmentorSpec) -> None:
        super().__init__()
        self.spec = spec
        self.enc_m = Encoder(spec.in_channels, spec.widths)
        self.enc_cm = Encoder(spec.in_channels, spec.widths) if spec.mode is SegmentorMode.SPLIT else None
        self.decoder = Decoder(spec.widths, spec.num_labels)
        init_weights(self)

    def encoder(self, branch: Branch) -> Encoder:
        if branch is Branch.S_CM and self.enc_cm is not None:
            return self.enc_cm
        return self.enc_m

    def logits(self, x: torch.Tensor, branch: Branch = Branch.S_M) -> torch.Tensor:
        factor = 2 ** len(self.spec.widths)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"Segmentor input sides must be divisible by {factor}, got {tuple(x.shape)}")
        return self.decoder(self.encoder(branch)(x))

    def forward(self, x: torch.Tensor, branch: Branch = Branch.S_M) -> torch.Tensor:
        return torch.softmax(self.logits(x, branch), dim=1)


class ModelBundle(nn.Module):
    """All six networks of one run."""

    def __init__(
        self,
        preset: str = "desk",
        num_labels: int = 4,
        pair_variant: PairVariant = PairVariant.IMG_SEG_AGG,
        mode: SegmentorMode = SegmentorMode.SPLIT,
    ) -> None:
        super().__init__()
        net = get_preset(preset)
        self.preset = preset
        self.num_labels = num_labels
        self.pair_variant = pair_variant
        self.mode = mode
        self.g_cm = ResnetGenerator(net.generator)
        self.g_mc = ResnetGenerator(net.generator)
        self.d_m = PatchDiscriminator(net.discriminator)
        self.d_c = PatchDiscriminator(net.discriminator)
        struct_spec = replace(net.discriminator, in_channels=pair_variant.input_channels(num_labels))
        self.d_struct = nn.ModuleList(
            PatchDiscriminator(struct_spec)
            for _ in range(pair_variant.num_discriminators(num_labels))
        )
        self.segmentor = SplitSegmentor(
            SplitSegmentorSpec(num_labels=num_labels, widths=net.segmentor_widths, mode=mode)
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named groups; DE is its own group, shared by both segmentor branches."""
        groups = {
            "G_CM": list(self.g_cm.parameters()),
            "G_MC": list(self.g_mc.parameters()),
            "D_M": list(self.d_m.parameters()),
            "D_C": list(self.d_c.parameters()),
            "D_struct": list(self.d_struct.parameters()),
            "E_M": list(self.segmentor.enc_m.parameters()),
            "DE": list(self.segmentor.decoder.parameters()),
        }
        if self.segmentor.enc_cm is not None:
            groups["E_CM"] = list(self.segmentor.enc_cm.parameters())
        return groups

    def generator_parameters(self) -> list[nn.Parameter]:
        return list(self.g_cm.parameters()) + list(self.g_mc.parameters())

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return [*self.d_m.parameters(), *self.d_c.parameters(), *self.d_struct.parameters()]

    def segmentor_parameters(self) -> list[nn.Parameter]:
        return list(self.segmentor.parameters())

    def parameter_counts(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in params) for name, params in self.parameter_groups().items()}

    def structure_logits(
        self, pair: torch.Tensor | list[torch.Tensor]
    ) -> torch.Tensor | list[torch.Tensor]:
        if isinstance(pair, list):
            return [forward_discriminator(d, p) for d, p in zip(self.d_struct, pair)]
        return forward_discriminator(self.d_struct[0], pair)

    def frozen_copy(self) -> ModelBundle:
        clone = copy.deepcopy(self)
        clone.eval()
        for p in clone.parameters():
            p.requires_grad_(False)
        return clone


def set_requires_grad(modules: list[nn.Module | None], flag: bool) -> None:
    for module in modules:
        if module is None:
            continue
        for p in module.parameters():
            p.requires_grad_(flag)


def forward_generator(generator: ResnetGenerator, image: torch.Tensor) -> torch.Tensor:
    """Translate a batch of [-1, 1] images; sides must be divisible by 4.

    Raises:
        ValueError: On a non-square input or sides not divisible by 2**downsampling
    """
    factor = 2**generator.spec.num_downsampling
    if image.dim() != 4 or image.shape[1] != generator.spec.in_channels:
        raise ValueError(f"Expected (N, {generator.spec.in_channels}, H, W), got {tuple(image.shape)}")
    if image.shape[-1] != image.shape[-2] or image.shape[-1] % factor:
        raise ValueError(
            f"Generator input must be square with sides divisible by {factor}, got {tuple(image.shape)}"
        )
    return generator(image)


def forward_discriminator(discriminator: PatchDiscriminator, input_stack: torch.Tensor) -> torch.Tensor:
    return discriminator(input_stack)


def forward_segmentor(bundle: ModelBundle, image: torch.Tensor, branch: Branch = Branch.S_M) -> ProbabilityMap:
    return ProbabilityMap(bundle.segmentor(image, branch))


def receptive_field(spec: PatchDiscriminatorSpec) -> int:
    """Receptive field of one output unit, from the kernel/stride recurrence."""
    size = 1
    for _, kernel, stride in reversed(spec.layers()):
        size = (size - 1) * stride + kernel
    return size


def empirical_receptive_field(spec: PatchDiscriminatorSpec, input_size: int = 128, seed: int = 0) -> int:
    """Measure the input extent that influences the central output unit.

    Normalization couples every pixel of an instance, so the measurement runs on a
    normalization-free copy of the spec.
    """
    torch.manual_seed(seed)
    net = PatchDiscriminator(replace(spec, norm="none")).double()
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 1.0)
    x = torch.randn(1, spec.in_channels, input_size, input_size, dtype=torch.float64, requires_grad=True)
    out = net(x)
    i, j = out.shape[-2] // 2, out.shape[-1] // 2
    out[0, 0, i, j].backward()
    support = x.grad.abs().sum(dim=(0, 1)) > 0
    rows = torch.nonzero(support.any(dim=1)).flatten()
    cols = torch.nonzero(support.any(dim=0)).flatten()
    if rows.numel() == 0:
        return 0
    if rows[0] == 0 or rows[-1] == input_size - 1:
        logger.warning("Receptive field reaches the input border; measure with a larger input")
    return int(max(rows[-1] - rows[0], cols[-1] - cols[0]) + 1)


def build_bundle(
    preset: str,
    num_labels: int,
    pair_variant: PairVariant,
    mode: SegmentorMode,
    seed: int,
) -> ModelBundle:
    torch.manual_seed(seed)
    bundle = ModelBundle(preset, num_labels, pair_variant, mode)
    for name, count in bundle.parameter_counts().items():
        logger.info("Parameters %s: %d", name, count)
    return bundle

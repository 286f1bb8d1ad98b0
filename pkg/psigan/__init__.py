"""PSIGAN: unpaired segmentation domain adaptation with a joint image/probability-map discriminator."""

from .config import RunConfig, TrainConfig, config_hash, load_run_config
from .losses import LossForm, LossReport, LossWeights, PairVariant
from .metrics import dice, evaluate_run, hd95, kl_intensity_divergence
from .models import Branch, ModelBundle, SegmentorMode, build_bundle
from .settings import SETTING_MASKS, SETTING_NAMES, AblationMask, get_mask_for_setting
from .synthdata import DatasetManifest, build_dataset, sample_anatomy
from .trainer import lr_at, routing_audit, train, train_step

__all__ = [
    "RunConfig",
    "TrainConfig",
    "config_hash",
    "load_run_config",
    "LossForm",
    "LossReport",
    "LossWeights",
    "PairVariant",
    "dice",
    "evaluate_run",
    "hd95",
    "kl_intensity_divergence",
    "Branch",
    "ModelBundle",
    "SegmentorMode",
    "build_bundle",
    "SETTING_MASKS",
    "SETTING_NAMES",
    "AblationMask",
    "get_mask_for_setting",
    "DatasetManifest",
    "build_dataset",
    "sample_anatomy",
    "lr_at",
    "routing_audit",
    "train",
    "train_step",
]

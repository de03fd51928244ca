"""Anchored latent alignment for missing-modality segmentation.

Library layout mirrors the pipeline: dataio (synthetic samples, scenarios,
formats) -> nets (encoder/fusion/decoder) -> latent_align (anchors, losses,
gap estimation) -> regimes (training procedures) -> evalrep (Dice protocol,
projections, reports) -> theory (exact discrete probes) -> cli.
"""

from .dataio import (
    MultiModalSample,
    ScenarioMask,
    SyntheticSpec,
    enumerate_scenarios,
    generate_dataset,
)
from .latent_align import (
    AnchorSpec,
    AnchorVariant,
    GapReport,
    LatentBatch,
    estimate_gap,
    loss_adaptive_anchor,
    loss_fixed_anchor,
    loss_normal_anchor,
    select_k,
)
from .nets import EncoderConfig, EncoderStyle, SegmentationModel, segmentation_loss
from .regimes import (
    Regime,
    RegimeConfig,
    TrainResult,
    init_adaptive_weights,
    train,
    train_base,
    train_da,
    train_kd,
    train_sls,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSpec",
    "AnchorVariant",
    "EncoderConfig",
    "EncoderStyle",
    "GapReport",
    "LatentBatch",
    "MultiModalSample",
    "Regime",
    "RegimeConfig",
    "ScenarioMask",
    "SegmentationModel",
    "SyntheticSpec",
    "TrainResult",
    "enumerate_scenarios",
    "estimate_gap",
    "generate_dataset",
    "init_adaptive_weights",
    "loss_adaptive_anchor",
    "loss_fixed_anchor",
    "loss_normal_anchor",
    "segmentation_loss",
    "select_k",
    "train",
    "train_base",
    "train_da",
    "train_kd",
    "train_sls",
]

"""Training regimes: aligned base model, distillation, shared-latent-space
training with scenario dropout, and co-trained adaptation.

Every regime can run with or without the alignment term (``medmap_enabled``).
All named loss terms are logged separately per epoch and the logged total is
their exact sum. Determinism contract: identical (config, seed, dataset)
produces identical final parameter checksums and metrics.

Optimizer is plain momentum SGD with a fixed step; the batch stream and the
per-step scenario draws come from one seeded numpy generator.
"""

from __future__ import annotations

import copy
import time
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import torch

from .dataio import MultiModalSample, ScenarioMask, enumerate_scenarios
from .errors import ConfigurationError, NumericError, ValidationError
from .latent_align import (
    AnchorSpec,
    AnchorVariant,
    GapReport,
    LatentBatch,
    estimate_gap,
    loss_adaptive_anchor,
    loss_fixed_anchor,
    loss_normal_anchor,
    symmetric_gaussian_kl,
)
from .nets import (
    EncoderConfig,
    EncoderStyle,
    SegmentationModel,
    assert_all_parameters_in_graph,
    param_checksum,
    samples_to_tensors,
    segmentation_loss,
)

MOMENTUM = 0.9
GRAD_CLIP_NORM = 5.0  # KL surrogates are stiff near the variance floor
GAP_PROBE_SIZE = 32
ONE_HOT_EPSILON = 1e-3


class Regime(Enum):
    BASE = "base"
    KD = "kd"
    SLS = "sls"
    DA = "da"


@dataclass
class RegimeConfig:
    regime: Regime
    anchor: AnchorSpec
    alpha: float = 0.125
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.05
    seed: int = 0
    student_mask: ScenarioMask | None = None
    medmap_enabled: bool = True
    normal_mode: str = "literal"

    def validate(self, n_modalities: int) -> None:
        if self.alpha < 0:
            raise ConfigurationError("RegimeConfig.alpha: must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("RegimeConfig.epochs: must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("RegimeConfig.batch_size: must be >= 2 (batch statistics)")
        if self.learning_rate <= 0:
            raise ConfigurationError("RegimeConfig.learning_rate: must be > 0")
        self.encoder.validate()
        if self.regime in (Regime.KD, Regime.DA):
            if self.student_mask is None:
                raise ConfigurationError(f"{self.regime.value} requires student_mask")
            if self.student_mask.n_modalities != n_modalities:
                raise ConfigurationError("student_mask arity does not match the dataset")
        if self.medmap_enabled:
            self.anchor.validate_for(n_modalities)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "anchor": self.anchor.to_dict(),
            "alpha": self.alpha,
            "encoder": self.encoder.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "student_mask": list(self.student_mask.present) if self.student_mask else None,
            "medmap_enabled": self.medmap_enabled,
            "normal_mode": self.normal_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeConfig":
        known = {
            "regime", "anchor", "alpha", "encoder", "epochs", "batch_size",
            "learning_rate", "seed", "student_mask", "medmap_enabled", "normal_mode",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"RegimeConfig: unknown keys {sorted(unknown)}")
        mask = d.get("student_mask")
        return cls(
            regime=Regime(d["regime"]),
            anchor=AnchorSpec.from_dict(d["anchor"]),
            alpha=float(d.get("alpha", 0.125)),
            encoder=EncoderConfig.from_dict(d.get("encoder", {})),
            epochs=int(d.get("epochs", 10)),
            batch_size=int(d.get("batch_size", 8)),
            learning_rate=float(d.get("learning_rate", 0.05)),
            seed=int(d.get("seed", 0)),
            student_mask=ScenarioMask(tuple(mask)) if mask is not None else None,
            medmap_enabled=bool(d.get("medmap_enabled", True)),
            normal_mode=str(d.get("normal_mode", "literal")),
        )


@dataclass
class TrainResult:
    model: SegmentationModel
    config: RegimeConfig
    loss_traces: dict
    gap_trace: list
    initial_gap: GapReport
    wall_seconds: float
    first_step_terms: dict
    diverged_at_epoch: int | None = None
    final_latents: list | None = None
    extras: dict = field(default_factory=dict)

    def metrics_dict(self) -> dict:
        d = {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "loss_traces": {k: list(map(float, v)) for k, v in self.loss_traces.items()},
            "gap_trace": [g.to_json_dict() for g in self.gap_trace],
            "initial_gap": self.initial_gap.to_json_dict(),
            "mean_offdiag_kl_trace": [g.mean_offdiag_kl() for g in self.gap_trace],
            "first_step_terms": self.first_step_terms,
            "diverged_at_epoch": self.diverged_at_epoch,
            "param_checksum": param_checksum(self.model),
            "wall_seconds": self.wall_seconds,
        }
        if self.final_latents is not None:
            d["final_latents"] = [
                None if z is None else np.asarray(z, dtype=np.float64).tolist()
                for z in self.final_latents
            ]
        d.update({k: v for k, v in self.extras.items() if _json_safe(v)})
        return d


def _json_safe(v) -> bool:
    return isinstance(v, (str, int, float, bool, type(None), list, dict))


def init_adaptive_weights(n_modalities: int, prior: int | None = None) -> np.ndarray:
    """Raw logits whose softmax is a near-one-hot mixture at ``prior``.

    Exact one-hot is unreachable under softmax, so the target simplex point
    is (1 - (J-1)*eps) at the prior index and eps elsewhere, eps = 1e-3.
    Without a prior the mixture is uniform.
    """
    if n_modalities < 1:
        raise ValidationError("init_adaptive_weights: n_modalities must be >= 1")
    if prior is None:
        return np.zeros(n_modalities)
    if not 0 <= prior < n_modalities:
        raise ValidationError(f"init_adaptive_weights: prior {prior} out of range")
    w = np.full(n_modalities, ONE_HOT_EPSILON)
    w[prior] = 1.0 - (n_modalities - 1) * ONE_HOT_EPSILON
    return np.log(w)


def _single_mask(n_modalities: int, j: int) -> ScenarioMask:
    return ScenarioMask.from_indices(n_modalities, [j])


def _map_distribution(feature_map: torch.Tensor) -> torch.Tensor:
    """(B, D, h, w) -> (B*h*w, D): every position is one draw of the latent."""
    return feature_map.permute(0, 2, 3, 1).reshape(-1, feature_map.shape[1])


def _live_anchor(cfg: RegimeConfig, model: SegmentationModel) -> AnchorSpec:
    """Anchor with live (trainable) weights when the model carries them."""
    if cfg.anchor.variant is AnchorVariant.ADAPTIVE and hasattr(model, "anchor_logits"):
        return replace(cfg.anchor, weights_raw=model.anchor_logits)
    return cfg.anchor


def _alignment_term(latents: LatentBatch, cfg: RegimeConfig, model: SegmentationModel):
    """Raw alignment loss for the configured anchor; None when not computable."""
    anchor = _live_anchor(cfg, model)
    if anchor.variant is AnchorVariant.NORMAL:
        return loss_normal_anchor(latents, cfg.normal_mode)
    if anchor.variant is AnchorVariant.FIXED_K:
        if not latents.present.present[anchor.k]:
            return None  # anchor modality missing from this step's scenario
        return loss_fixed_anchor(latents, anchor.k)
    if latents.present.n_present == 1:
        # anchor equals the only feature; loss and gradient are exactly zero
        return torch.zeros((), dtype=latents.features[latents.present_indices()[0]].dtype)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return loss_adaptive_anchor(latents, anchor)


def _build_model(cfg: RegimeConfig, n_modalities: int, with_anchor_param: bool) -> SegmentationModel:
    logits = None
    if with_anchor_param and cfg.medmap_enabled and cfg.anchor.variant is AnchorVariant.ADAPTIVE:
        logits = torch.as_tensor(cfg.anchor.weights_raw, dtype=torch.float32)
    return SegmentationModel(
        n_modalities, cfg.encoder, anchor_logits=logits, seed=cfg.seed
    )


def _freeze_unused_encoders(model: SegmentationModel, mask: ScenarioMask) -> None:
    # NON_SHARED encoders outside the training mask would be dead weights
    if model.encoders is None:
        return
    for j, present in enumerate(mask.present):
        if not present:
            model.encoders[j].requires_grad_(False)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[torch.Tensor]:
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [torch.from_numpy(b.copy()) for b in out if len(b) >= 2]  # batch stats need >= 2


def _gap_probe(model: SegmentationModel, images: torch.Tensor, cfg: RegimeConfig) -> GapReport:
    full = ScenarioMask.full(model.n_modalities)
    with torch.no_grad():
        _, latents = model.encode(images, full)
        return estimate_gap(latents, _live_anchor(cfg, model))


def _snapshot(models: list[SegmentationModel]) -> list[dict]:
    return [copy.deepcopy(m.state_dict()) for m in models]


def _restore(models: list[SegmentationModel], snaps: list[dict]) -> None:
    for m, s in zip(models, snaps):
        m.load_state_dict(s)


def _run_loop(
    *,
    cfg: RegimeConfig,
    data,
    step_fn,
    probe_fn,
    primary: SegmentationModel,
    trained: list[SegmentationModel],
) -> TrainResult:
    """Shared epoch loop: dead-parameter check, SGD steps, traces, gap probes."""
    images, labels = data
    n = images.shape[0]
    if n < 2:
        raise ValidationError("training needs at least 2 samples")
    rng = np.random.default_rng(cfg.seed)
    params = [p for m in trained for p in m.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=MOMENTUM)

    probe_images = images[:GAP_PROBE_SIZE]
    # graph-construction-time check: every trainable parameter must matter
    probe_terms = probe_fn(torch.arange(min(n, cfg.batch_size)))
    probe_total = sum(probe_terms.values())
    for m in trained:
        assert_all_parameters_in_graph(probe_total, m)
    initial_gap = _gap_probe(primary, probe_images, cfg)

    start = time.perf_counter()
    traces: dict[str, list[float]] = {}
    gap_trace: list[GapReport] = []
    first_step_terms: dict[str, float] = {}
    diverged_at: int | None = None
    snaps = _snapshot(trained)

    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        steps = 0
        for batch in _batches(n, cfg.batch_size, rng):
            try:
                terms = step_fn(batch)
                total = sum(terms.values())
            except NumericError:
                # non-finite activations mid-forward: same contract as a
                # non-finite loss, keep the last finite checkpoint
                _restore(trained, snaps)
                diverged_at = epoch
                break
            if not first_step_terms:
                first_step_terms = {k: float(v.detach()) for k, v in terms.items()}
                first_step_terms["total"] = float(total.detach())
            if not torch.isfinite(total):
                _restore(trained, snaps)
                diverged_at = epoch
                break
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            steps += 1
        if diverged_at is not None:
            break
        for k, v in sums.items():
            traces.setdefault(k, []).append(v / steps)
        gap_trace.append(_gap_probe(primary, probe_images, cfg))
        snaps = _snapshot(trained)

    with torch.no_grad():
        _, final = primary.encode(probe_images, ScenarioMask.full(primary.n_modalities))
        final_latents = [
            None if f is None else f.detach().numpy().astype(np.float64) for f in final.features
        ]

    return TrainResult(
        model=primary,
        config=cfg,
        loss_traces=traces,
        gap_trace=gap_trace,
        initial_gap=initial_gap,
        wall_seconds=time.perf_counter() - start,
        first_step_terms=first_step_terms,
        diverged_at_epoch=diverged_at,
        final_latents=final_latents,
    )


def train_base(dataset: list[MultiModalSample], cfg: RegimeConfig) -> TrainResult:
    """Full-modality base model: per-modality segmentation plus alignment.

    Each present modality is decoded individually through the shared fusion
    mixer and decoder, and its pooled latents are pulled to the anchor. The
    alignment acts per modality, never on pooled all-modality features.
    """
    if cfg.regime is not Regime.BASE:
        raise ConfigurationError("train_base needs a BASE config")
    if not dataset:
        raise ValidationError("train_base: dataset is empty")
    J = dataset[0].n_modalities
    cfg.validate(J)
    images, labels = samples_to_tensors(dataset)
    model = _build_model(cfg, J, with_anchor_param=True)
    full = ScenarioMask.full(J)

    def step(batch) -> dict:
        imgs, labs = images[batch], labels[batch]
        maps, latents = model.encode(imgs, full)
        seg_terms = []
        for j in range(J):
            logits = model.predict(model.fuse(maps, _single_mask(J, j)))
            seg_terms.append(segmentation_loss(logits, labs))
        terms = {"seg": sum(seg_terms) / J}
        if cfg.medmap_enabled:
            align = _alignment_term(latents, cfg, model)
            terms["align"] = cfg.alpha * align
        return terms

    return _run_loop(
        cfg=cfg, data=(images, labels), step_fn=step, probe_fn=step,
        primary=model, trained=[model],
    )


def train_kd(
    dataset: list[MultiModalSample],
    teacher: SegmentationModel,
    cfg: RegimeConfig,
    init_student_from_teacher: bool = False,
) -> TrainResult:
    """Distill a frozen teacher into a student restricted to student_mask.

    Student loss = segmentation + symmetric Gaussian KL between the student's
    pooled latents and the (frozen) teacher's latents of the same modalities.
    Teacher immutability is asserted via checksums.
    """
    if cfg.regime is not Regime.KD:
        raise ConfigurationError("train_kd needs a KD config")
    if not dataset:
        raise ValidationError("train_kd: dataset is empty")
    J = dataset[0].n_modalities
    cfg.validate(J)
    if teacher.n_modalities != J:
        raise ConfigurationError("teacher/dataset modality count mismatch")
    mask = cfg.student_mask
    if any(j >= teacher.n_modalities for j in mask.indices()):
        raise ConfigurationError("mask requests a modality the teacher was not trained on")
    if teacher.encoder_config.latent_dim != cfg.encoder.latent_dim:
        raise ConfigurationError(
            "teacher/student latent dimensions differ; the distillation KL needs matching widths"
        )

    images, labels = samples_to_tensors(dataset)
    teacher.eval()
    teacher.requires_grad_(False)
    checksum_before = param_checksum(teacher)

    student = _build_model(cfg, J, with_anchor_param=False)
    if init_student_from_teacher:
        own = student.state_dict()
        student.load_state_dict(  # teacher may carry anchor logits the student lacks
            {k: v for k, v in teacher.state_dict().items() if k in own}
        )
    _freeze_unused_encoders(student, mask)

    def step(batch) -> dict:
        imgs, labs = images[batch], labels[batch]
        maps_s, _ = student.encode(imgs, mask)
        seg = segmentation_loss(student.predict(student.fuse(maps_s, mask)), labs)
        with torch.no_grad():
            maps_t, _ = teacher.encode(imgs, mask)
        # latent distributions over batch and positions; same surrogate as
        # estimate_gap, conditioned like the adaptation branch-matching loss
        kd = sum(
            symmetric_gaussian_kl(_map_distribution(maps_s[j]), _map_distribution(maps_t[j]))
            for j in mask.indices()
        ) / mask.n_present
        return {"seg": seg, "kd": kd}

    result = _run_loop(
        cfg=cfg, data=(images, labels), step_fn=step, probe_fn=step,
        primary=student, trained=[student],
    )
    checksum_after = param_checksum(teacher)
    if checksum_before != checksum_after:
        raise ConfigurationError("teacher parameters changed during distillation")
    result.extras["teacher_checksum_before"] = checksum_before
    result.extras["teacher_checksum_after"] = checksum_after
    return result


def train_sls(dataset: list[MultiModalSample], cfg: RegimeConfig) -> TrainResult:
    """Shared-latent-space training with uniform scenario dropout per step.

    Loss = segmentation of the fused prediction + fusion consistency (mean
    squared disagreement between fused and per-modality predictions) +
    alignment of the pre-fusion latents when enabled.
    """
    if cfg.regime is not Regime.SLS:
        raise ConfigurationError("train_sls needs an SLS config")
    if not dataset:
        raise ValidationError("train_sls: dataset is empty")
    J = dataset[0].n_modalities
    cfg.validate(J)
    images, labels = samples_to_tensors(dataset)
    model = _build_model(cfg, J, with_anchor_param=True)
    scenarios = enumerate_scenarios(J)
    rng_scenarios = np.random.default_rng(cfg.seed + 1)

    def make_step(mask_source):
        def step(batch) -> dict:
            mask = mask_source()
            imgs, labs = images[batch], labels[batch]
            maps, latents = model.encode(imgs, mask)
            fused_logits = model.predict(model.fuse(maps, mask))
            seg = segmentation_loss(fused_logits, labs)
            fused_probs = torch.softmax(fused_logits, dim=1)
            disagreements = []
            for j in mask.indices():
                logits_j = model.predict(model.fuse(maps, _single_mask(J, j)))
                disagreements.append(((torch.softmax(logits_j, dim=1) - fused_probs) ** 2).mean())
            terms = {"seg": seg, "fuse": sum(disagreements) / len(disagreements)}
            if cfg.medmap_enabled:
                align = _alignment_term(latents, cfg, model)
                terms["align"] = cfg.alpha * (
                    align if align is not None else torch.zeros((), dtype=fused_logits.dtype)
                )
            return terms

        return step

    full = ScenarioMask.full(J)
    probe_fn = make_step(lambda: full)
    step_fn = make_step(lambda: scenarios[int(rng_scenarios.integers(len(scenarios)))])
    return _run_loop(
        cfg=cfg, data=(images, labels), step_fn=step_fn, probe_fn=probe_fn,
        primary=model, trained=[model],
    )


def train_da(
    dataset: list[MultiModalSample],
    reference: SegmentationModel,
    cfg: RegimeConfig,
) -> TrainResult:
    """Co-train a full-modality branch (from a reference) and a masked branch.

    Neither branch is frozen. Branch features are pulled together by a
    layerwise symmetric Gaussian KL at every encoder stage over the masked
    modalities; the alignment loss acts on the full branch's final latents.
    The deployed model is the masked branch.
    """
    if cfg.regime is not Regime.DA:
        raise ConfigurationError("train_da needs a DA config")
    if not dataset:
        raise ValidationError("train_da: dataset is empty")
    J = dataset[0].n_modalities
    cfg.validate(J)
    if reference.n_modalities != J:
        raise ConfigurationError("reference/dataset modality count mismatch")
    mask = cfg.student_mask
    images, labels = samples_to_tensors(dataset)

    full_branch = _build_model(cfg, J, with_anchor_param=True)
    ref_state = reference.state_dict()
    own_state = full_branch.state_dict()
    if reference.encoder_config != cfg.encoder:
        raise ConfigurationError("reference encoder config does not match cfg.encoder")
    # the reference may or may not carry anchor logits; copy what matches
    merged = {k: ref_state[k] if k in ref_state else v for k, v in own_state.items()}
    full_branch.load_state_dict(merged)

    masked_branch = SegmentationModel(J, cfg.encoder, seed=cfg.seed + 1)
    _freeze_unused_encoders(masked_branch, mask)
    full = ScenarioMask.full(J)

    def step(batch) -> dict:
        imgs, labs = images[batch], labels[batch]
        maps_f, lat_f = full_branch.encode(imgs, full)
        seg_f = segmentation_loss(full_branch.predict(full_branch.fuse(maps_f, full)), labs)
        maps_m, _ = masked_branch.encode(imgs, mask)
        seg_m = segmentation_loss(masked_branch.predict(masked_branch.fuse(maps_m, mask)), labs)
        stages_f = full_branch.encode_stages(imgs, mask)
        stages_m = masked_branch.encode_stages(imgs, mask)
        mi_terms = [
            symmetric_gaussian_kl(sf, sm)
            for j in mask.indices()
            for sf, sm in zip(stages_f[j], stages_m[j])
        ]
        terms = {
            "seg_full": seg_f,
            "seg_masked": seg_m,
            "mi": sum(mi_terms) / len(mi_terms),
        }
        if cfg.medmap_enabled:
            align = _alignment_term(lat_f, cfg, full_branch)
            terms["align"] = cfg.alpha * align
        return terms

    result = _run_loop(
        cfg=cfg, data=(images, labels), step_fn=step, probe_fn=step,
        primary=masked_branch, trained=[full_branch, masked_branch],
    )
    result.extras["full_branch_checksum"] = param_checksum(full_branch)
    result.extras["reference_checksum"] = param_checksum(reference)
    result.extras["full_branch_model"] = full_branch  # dropped from metrics (not JSON-safe)
    return result


def train(dataset: list[MultiModalSample], cfg: RegimeConfig, **kwargs) -> TrainResult:
    """Dispatch to the regime-specific trainer."""
    if cfg.regime is Regime.BASE:
        return train_base(dataset, cfg)
    if cfg.regime is Regime.KD:
        if "teacher" not in kwargs:
            raise ConfigurationError("KD training requires a teacher model")
        return train_kd(dataset, kwargs["teacher"], cfg)
    if cfg.regime is Regime.SLS:
        return train_sls(dataset, cfg)
    if "reference" not in kwargs:
        raise ConfigurationError("DA training requires a full-branch reference model")
    return train_da(dataset, kwargs["reference"], cfg)

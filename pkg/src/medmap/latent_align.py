"""Anchor definitions, alignment losses, and the modality-gap estimator.

All losses operate on per-modality pooled feature batches of shape (B, D)
and are differentiable torch expressions. Absent modalities are dropped from
every sum; denominators count present modalities only.

The gap between two feature batches is measured as the symmetric KL between
diagonal Gaussians fitted to their batch moments (population statistics,
variance floored at 1e-6), averaged over latent coordinates. The same
surrogate backs GapReport, the distillation loss, and the branch-matching
loss in the training regimes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from .dataio import ScenarioMask
from .errors import ConfigurationError, ValidationError

VARIANCE_FLOOR = 1e-6
STD_FLOOR = 1e-6
SIMPLEX_TOL = 1e-9


class AnchorVariant(Enum):
    NORMAL = "normal"
    FIXED_K = "fixed"
    ADAPTIVE = "adaptive"


@dataclass
class AnchorSpec:
    """Which latent distribution the per-modality features are pulled to.

    NORMAL needs no parameters. FIXED_K selects modality ``k``. ADAPTIVE
    carries ``weights_raw``: free parameters mapped to the simplex by softmax,
    or interpreted as simplex weights directly when ``direct_weights`` is set
    (used by tests that need an exact one-hot mixture).
    """

    variant: AnchorVariant
    k: int | None = None
    weights_raw: "torch.Tensor | np.ndarray | list | None" = None
    direct_weights: bool = False

    def validate_for(self, n_modalities: int) -> None:
        if self.variant is AnchorVariant.FIXED_K:
            if self.k is None or not 0 <= self.k < n_modalities:
                raise ConfigurationError(
                    f"fixed anchor needs 0 <= k < {n_modalities}, got k={self.k}"
                )
        if self.variant is AnchorVariant.ADAPTIVE:
            if self.weights_raw is None:
                raise ConfigurationError("adaptive anchor needs weights_raw")
            if len(torch.as_tensor(self.weights_raw).reshape(-1)) != n_modalities:
                raise ConfigurationError(
                    f"adaptive anchor needs {n_modalities} raw weights"
                )
            self.mixture_weights()  # simplex check for direct mode

    def mixture_weights(self) -> torch.Tensor:
        """Simplex-mapped mixture weights (sum 1 within 1e-9, nonnegative).

        Mapped in float64 regardless of the raw dtype so the simplex
        contract holds; gradients still flow through the cast.
        """
        if self.variant is not AnchorVariant.ADAPTIVE:
            raise ConfigurationError("mixture_weights only applies to adaptive anchors")
        raw = torch.as_tensor(self.weights_raw).reshape(-1).to(torch.float64)
        if self.direct_weights:
            total = float(raw.sum())
            if torch.any(raw < -SIMPLEX_TOL) or abs(total - 1.0) > SIMPLEX_TOL:
                raise ConfigurationError(
                    f"direct weights must lie on the simplex (sum={total})"
                )
            return raw
        return torch.softmax(raw, dim=0)

    def to_dict(self) -> dict:
        d: dict = {"variant": self.variant.value}
        if self.k is not None:
            d["k"] = int(self.k)
        if self.weights_raw is not None:
            d["weights_raw"] = [float(v) for v in torch.as_tensor(self.weights_raw).reshape(-1)]
        if self.direct_weights:
            d["direct_weights"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        known = {"variant", "k", "weights_raw", "direct_weights"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"AnchorSpec: unknown keys {sorted(unknown)}")
        return cls(
            variant=AnchorVariant(d["variant"]),
            k=d.get("k"),
            weights_raw=d.get("weights_raw"),
            direct_weights=bool(d.get("direct_weights", False)),
        )


@dataclass
class LatentBatch:
    """Per-modality (B, D) feature tensors; None exactly where absent."""

    features: list
    present: ScenarioMask

    def __post_init__(self):
        if len(self.features) != self.present.n_modalities:
            raise ValidationError(
                f"LatentBatch: {len(self.features)} feature slots for "
                f"{self.present.n_modalities}-modality mask"
            )
        shape = None
        for j, (feat, here) in enumerate(zip(self.features, self.present.present)):
            if here:
                if feat is None:
                    raise ValidationError(f"LatentBatch: modality {j} marked present but has no features")
                t = torch.as_tensor(feat)
                if t.ndim != 2:
                    raise ValidationError(f"LatentBatch: features[{j}] must be (B, D)")
                if shape is None:
                    shape = t.shape
                elif t.shape != shape:
                    raise ValidationError(
                        f"LatentBatch: features[{j}] shape {tuple(t.shape)} != {tuple(shape)}"
                    )
                self.features[j] = t
            elif feat is not None:
                raise ValidationError(f"LatentBatch: modality {j} absent but carries features")

    def present_indices(self) -> tuple[int, ...]:
        return self.present.indices()

    @property
    def batch_size(self) -> int:
        return int(self.features[self.present_indices()[0]].shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.features[self.present_indices()[0]].shape[1])


@dataclass
class GapReport:
    """Pairwise modality divergences plus per-modality anchor distances.

    Matrices are J x J, symmetric, zero-diagonal; entries for absent
    modalities are zero. anchor_dist is length J.
    """

    pairwise_kl: np.ndarray
    pairwise_mean_dist: np.ndarray
    anchor_dist: np.ndarray

    def mean_offdiag_kl(self, present: ScenarioMask | None = None) -> float:
        idx = present.indices() if present is not None else range(self.pairwise_kl.shape[0])
        vals = [
            self.pairwise_kl[i, j]
            for i in idx
            for j in idx
            if i < j
        ]
        return float(np.mean(vals)) if vals else 0.0

    def to_json_dict(self) -> dict:
        return {
            "pairwise_kl": self.pairwise_kl.tolist(),
            "pairwise_mean_dist": self.pairwise_mean_dist.tolist(),
            "anchor_dist": self.anchor_dist.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GapReport":
        return cls(
            pairwise_kl=np.asarray(d["pairwise_kl"], dtype=np.float64),
            pairwise_mean_dist=np.asarray(d["pairwise_mean_dist"], dtype=np.float64),
            anchor_dist=np.asarray(d["anchor_dist"], dtype=np.float64),
        )


def _batch_moments(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-coordinate population mean and variance (floored)."""
    mean = features.mean(dim=0)
    var = features.var(dim=0, unbiased=False).clamp_min(VARIANCE_FLOOR)
    return mean, var


def gaussian_kl(mean_a, var_a, mean_b, var_b):
    """KL(N(mean_a, var_a) || N(mean_b, var_b)) per coordinate, averaged."""
    kl = 0.5 * (var_a / var_b + (mean_a - mean_b) ** 2 / var_b - 1.0 + torch.log(var_b / var_a))
    return kl.mean()


def symmetric_gaussian_kl(features_a: torch.Tensor, features_b: torch.Tensor) -> torch.Tensor:
    """Symmetric diagonal-Gaussian KL between two (B, D) batches.

    Differentiable in both arguments; used for gap reports, distillation,
    and branch matching alike.
    """
    ma, va = _batch_moments(features_a)
    mb, vb = _batch_moments(features_b)
    return 0.5 * (gaussian_kl(ma, va, mb, vb) + gaussian_kl(mb, vb, ma, va))


def loss_fixed_anchor(batch: LatentBatch, k: int) -> torch.Tensor:
    """Mean squared distance of every present modality's features to modality k's.

    Value is (1 / (B * J_present)) * sum_b sum_j ||z_jb - z_kb||^2.
    """
    if not 0 <= k < batch.present.n_modalities or not batch.present.present[k]:
        raise ConfigurationError(f"fixed anchor modality k={k} is not present in the batch")
    idx = batch.present_indices()
    zk = batch.features[k]
    total = sum(((batch.features[j] - zk) ** 2).sum() for j in idx)
    return total / (batch.batch_size * len(idx))


def loss_adaptive_anchor(batch: LatentBatch, anchor: AnchorSpec) -> torch.Tensor:
    """Mean squared distance of each modality's features to the learned mixture point.

    The anchor point per batch element is sum_j w_j z_jb with the mixture
    weights renormalized over the present modalities; gradients flow into
    both the features and the raw weights.
    """
    if anchor.variant is not AnchorVariant.ADAPTIVE:
        raise ConfigurationError("loss_adaptive_anchor needs an ADAPTIVE anchor")
    anchor.validate_for(batch.present.n_modalities)
    idx = batch.present_indices()
    if len(idx) == 1:
        warnings.warn(
            "adaptive anchor with a single present modality: anchor equals the "
            "only feature, loss is 0",
            RuntimeWarning,
            stacklevel=2,
        )
    feats = [batch.features[j] for j in idx]
    w = anchor.mixture_weights().to(feats[0].dtype)
    wp = w[list(idx)]
    wp = wp / wp.sum()
    anchor_points = sum(wp[i] * feats[i] for i in range(len(idx)))
    total = sum(((f - anchor_points) ** 2).sum() for f in feats)
    return total / (batch.batch_size * len(idx))


def loss_normal_anchor(batch: LatentBatch, mode: str = "literal") -> torch.Tensor:
    """Pull each modality's batch statistics toward the standard normal.

    Per present modality and latent coordinate, with batch mean m and batch
    standard deviation v (population, floored at 1e-6):

      literal mode:     2*log(1/v) + (v^2 + m^2)/2 - 1/2
      standard_kl mode:   log(1/v) + (v^2 + m^2)/2 - 1/2

    averaged over coordinates and present modalities. The literal form can be
    negative (it is not a divergence); standard_kl is the Gaussian KL to N(0,1).
    """
    if mode not in ("literal", "standard_kl"):
        raise ValidationError(f"loss_normal_anchor: unknown mode {mode!r}")
    if batch.batch_size < 2:
        raise ValidationError("loss_normal_anchor: batch size must be >= 2")
    log_coeff = 2.0 if mode == "literal" else 1.0
    terms = []
    for j in batch.present_indices():
        z = batch.features[j]
        m = z.mean(dim=0)
        v = z.std(dim=0, unbiased=False).clamp_min(STD_FLOOR)
        per_coord = -log_coeff * torch.log(v) + (v**2 + m**2) / 2.0 - 0.5
        terms.append(per_coord.mean())
    return sum(terms) / len(terms)


def estimate_gap(batch: LatentBatch, anchor: AnchorSpec) -> GapReport:
    """Fit a diagonal Gaussian per present modality and report divergences.

    pairwise_kl[i][j] is the symmetric Gaussian KL between modalities i and j
    (per-coordinate average); pairwise_mean_dist the Euclidean distance of
    latent means; anchor_dist[j] the symmetric KL to the anchor's Gaussian
    (NORMAL: unit Gaussian; FIXED_K: modality k's fit; ADAPTIVE: the
    moment-matched Gaussian of the weighted mixture).
    """
    if batch.batch_size < 2:
        raise ValidationError("estimate_gap: batch size must be >= 2")
    J = batch.present.n_modalities
    idx = batch.present_indices()
    anchor.validate_for(J)

    moments = {}
    for j in idx:
        z = batch.features[j].detach().to(torch.float64)
        mean = z.mean(dim=0).numpy()
        var = np.maximum(z.var(dim=0, unbiased=False).numpy(), VARIANCE_FLOOR)
        moments[j] = (mean, var)

    def sym_kl(a, b):
        ma, va = a
        mb, vb = b
        kl_ab = 0.5 * (va / vb + (ma - mb) ** 2 / vb - 1.0 + np.log(vb / va))
        kl_ba = 0.5 * (vb / va + (mb - ma) ** 2 / va - 1.0 + np.log(va / vb))
        return float(np.mean(0.5 * (kl_ab + kl_ba)))

    pairwise_kl = np.zeros((J, J))
    pairwise_mean = np.zeros((J, J))
    for i in idx:
        for j in idx:
            if i < j:
                kl = sym_kl(moments[i], moments[j])
                dist = float(np.linalg.norm(moments[i][0] - moments[j][0]))
                pairwise_kl[i, j] = pairwise_kl[j, i] = kl
                pairwise_mean[i, j] = pairwise_mean[j, i] = dist

    D = batch.latent_dim
    if anchor.variant is AnchorVariant.NORMAL:
        anchor_moments = (np.zeros(D), np.ones(D))
    elif anchor.variant is AnchorVariant.FIXED_K:
        if anchor.k not in moments:
            raise ConfigurationError(f"anchor modality k={anchor.k} is not present in the batch")
        anchor_moments = moments[anchor.k]
    else:
        w = anchor.mixture_weights().detach().to(torch.float64).numpy()
        wp = w[list(idx)]
        wp = wp / wp.sum()
        mix_mean = sum(wp[i] * moments[j][0] for i, j in enumerate(idx))
        second = sum(wp[i] * (moments[j][1] + moments[j][0] ** 2) for i, j in enumerate(idx))
        mix_var = np.maximum(second - mix_mean**2, VARIANCE_FLOOR)
        anchor_moments = (mix_mean, mix_var)

    anchor_dist = np.zeros(J)
    for j in idx:
        anchor_dist[j] = sym_kl(moments[j], anchor_moments)

    return GapReport(pairwise_kl, pairwise_mean, anchor_dist)


def select_k(per_modality_scores) -> int:
    """Index of the best-scoring modality; ties break to the lowest index."""
    scores = np.asarray(per_modality_scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValidationError("select_k: scores must be non-empty")
    return int(np.argmax(scores))


def with_weights(anchor: AnchorSpec, weights_raw) -> AnchorSpec:
    """Copy of an adaptive anchor bound to different raw weights."""
    return replace(anchor, weights_raw=weights_raw)

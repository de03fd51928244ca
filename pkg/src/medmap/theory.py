"""Exhaustive discrete probes of per-modality vs joint alignment.

Everything here runs on small enumerable alphabets (each axis at most 6
symbols, at most 3 latent coordinates), so every expectation, entropy, and
KL divergence is exact enumeration with no sampling error.

The "alignment channel" operationalizes mapping a latent variable to a
target distribution: each coordinate is kept with probability 1 - sigma and
resampled from the target with probability sigma, independently per
coordinate. The bound probe compares the summed per-coordinate mutual
information against the joint mutual information under that channel and
REPORTS the outcome; the inequality direction is not universally valid, so
counterexamples are first-class outputs rather than assertion failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import inf, isinf

import numpy as np

from .errors import ValidationError

MAX_ALPHABET = 6
MAX_COORDS = 3
MASS_TOL = 1e-12
DIST_TOL = 1e-9
HOLDS_TOL = 1e-9


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint distribution over (Y, Z_1, ..., Z_J) as a dense tensor."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim < 2:
            raise ValidationError("DiscreteJoint: need a Y axis and at least one Z axis")
        if p.ndim - 1 > MAX_COORDS:
            raise ValidationError(f"DiscreteJoint: at most {MAX_COORDS} latent coordinates")
        if any(s < 1 or s > MAX_ALPHABET for s in p.shape):
            raise ValidationError(f"DiscreteJoint: alphabet sizes must be 1..{MAX_ALPHABET}")
        if np.any(p < 0):
            raise ValidationError("DiscreteJoint: negative probability entries")
        if abs(p.sum() - 1.0) > MASS_TOL:
            raise ValidationError(f"DiscreteJoint: total mass {p.sum()} != 1")

    @property
    def n_coords(self) -> int:
        return self.probs.ndim - 1

    @property
    def z_sizes(self) -> tuple[int, ...]:
        return self.probs.shape[1:]

    def z_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def z_coord_marginal(self, j: int) -> np.ndarray:
        axes = tuple(a for a in range(self.probs.ndim) if a != j + 1)
        return self.probs.sum(axis=axes)


@dataclass(frozen=True)
class AlignmentChannel:
    """Keep a symbol with probability 1 - sigma, else resample from target."""

    sigma: float
    target: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "target", t)
        if not 0.0 <= self.sigma <= 1.0:
            raise ValidationError(f"AlignmentChannel.sigma: {self.sigma} not in [0, 1]")
        if np.any(t < 0) or abs(t.sum() - 1.0) > DIST_TOL:
            raise ValidationError("AlignmentChannel.target: not a probability distribution")

    def matrix(self) -> np.ndarray:
        """Row-stochastic C[z, z_hat] = (1-sigma)*I + sigma*target."""
        n = self.target.size
        return (1.0 - self.sigma) * np.eye(n) + self.sigma * np.tile(self.target, (n, 1))


def entropy(p) -> float:
    """Shannon entropy in nats, with 0*ln(0) := 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_discrete(p, q) -> float:
    """sum p*ln(p/q) in nats; +inf where q=0 with p>0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ValidationError(f"kl_discrete: alphabet mismatch {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] == 0):
        return inf
    return float((p[support] * np.log(p[support] / q[support])).sum())


def _validate_joint_2d(p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ValidationError("mutual_information: joint must be 2-D")
    if np.any(p < 0):
        raise ValidationError("mutual_information: negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"mutual_information: total mass {p.sum()} != 1")


def mutual_information(joint) -> float:
    """I(A;B) from the definition sum p*ln(p/(pa*pb)).

    Internally cross-checked against the entropy decomposition
    H(A) + H(B) - H(A,B); disagreement beyond 1e-8 raises.
    """
    p = np.asarray(joint, dtype=np.float64)
    _validate_joint_2d(p)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    prod = pa * pb
    mask = p > 0
    value = float((p[mask] * np.log(p[mask] / prod[mask])).sum())
    check = mutual_information_from_entropies(p)
    if abs(value - check) > 1e-8 * max(1.0, abs(value)):
        raise ValidationError(
            f"mutual_information: definition ({value}) and entropy decomposition "
            f"({check}) disagree"
        )
    return value


def mutual_information_from_entropies(joint) -> float:
    """I(A;B) = H(A) + H(B) - H(A,B); independent of the definition route."""
    p = np.asarray(joint, dtype=np.float64)
    _validate_joint_2d(p)
    return entropy(p.sum(axis=1)) + entropy(p.sum(axis=0)) - entropy(p)


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    margin: float

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "holds": self.holds, "margin": self.margin}


def _aligned_joint(z_marginal: np.ndarray, channel: AlignmentChannel) -> np.ndarray:
    """P(z, z_hat) with each coordinate passed through the channel independently."""
    C = channel.matrix()
    n_coords = z_marginal.ndim
    letters = "abc"[:n_coords]
    hats = "xyz"[:n_coords]
    spec = (
        letters
        + ","
        + ",".join(f"{letters[j]}{hats[j]}" for j in range(n_coords))
        + "->"
        + letters
        + hats
    )
    return np.einsum(spec, z_marginal, *([C] * n_coords))


def check_per_modality_mi_bound(joint: DiscreteJoint, channel: AlignmentChannel) -> BoundCheck:
    """Compare sum_j I(Z_hat_j; Z_j) against the joint I(Z_hat; Z).

    lhs sums the per-coordinate mutual informations after aligning each
    coordinate individually; rhs treats the coordinates jointly. Reports
    lhs, rhs, margin = rhs - lhs, and holds := lhs <= rhs + 1e-9. This is
    a probe, not an assertion: violating regimes are normal outputs.
    """
    if joint.n_coords < 2:
        raise ValidationError("check_per_modality_mi_bound: need at least 2 latent coordinates")
    n = channel.target.size
    if any(s != n for s in joint.z_sizes):
        raise ValidationError(
            f"alphabet mismatch: channel target has {n} symbols, joint has {joint.z_sizes}"
        )
    C = channel.matrix()
    lhs = 0.0
    for j in range(joint.n_coords):
        pj = joint.z_coord_marginal(j)
        lhs += mutual_information(pj[:, None] * C)
    pz = joint.z_marginal()
    big = _aligned_joint(pz, channel)
    flat = int(np.prod(joint.z_sizes))
    rhs = mutual_information(big.reshape(flat, flat))
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + HOLDS_TOL), margin=rhs - lhs)


@dataclass(frozen=True)
class ElboResult:
    """One evidence-bound evaluation: value = loglik - kl (may be -inf)."""

    value: float
    loglik: float
    kl: float
    kl_infinite: bool
    loglik_infinite: bool
    parts: tuple = field(default=())

    def to_dict(self) -> dict:
        def enc(x):
            return "-inf" if isinf(x) and x < 0 else ("inf" if isinf(x) else x)

        return {
            "value": enc(self.value),
            "loglik": enc(self.loglik),
            "kl": enc(self.kl),
            "kl_infinite": self.kl_infinite,
            "loglik_infinite": self.loglik_infinite,
        }


def _validate_predictor(predictor: np.ndarray, z_sizes, y_size: int) -> np.ndarray:
    pred = np.asarray(predictor, dtype=np.float64)
    if pred.shape != tuple(z_sizes) + (y_size,):
        raise ValidationError(
            f"predictor: expected shape {tuple(z_sizes) + (y_size,)}, got {pred.shape}"
        )
    if np.any(pred < 0):
        raise ValidationError("predictor: negative entries")
    rows = pred.sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > DIST_TOL):
        raise ValidationError("predictor: conditionals must sum to 1 over Y")
    return pred


def _expected_loglik(weight: np.ndarray, cond: np.ndarray) -> tuple[float, bool]:
    """sum weight*ln(cond) with 0-weight terms dropped; flags -inf."""
    mask = weight > 0
    if np.any(cond[mask] == 0):
        return -inf, True
    val = float((weight[mask] * np.log(cond[mask])).sum())
    return val, False


def _joint_y_zhat(joint: DiscreteJoint, channel: AlignmentChannel) -> np.ndarray:
    """P(y, z_hat_1..J): push the Z block of the joint through the channel."""
    C = channel.matrix()
    n = joint.n_coords
    letters = "abc"[:n]
    hats = "xyz"[:n]
    spec = (
        "Y"
        + letters
        + ","
        + ",".join(f"{letters[j]}{hats[j]}" for j in range(n))
        + "->Y"
        + hats
    )
    return np.einsum(spec, joint.probs, *([C] * n))


def elbo_joint(joint: DiscreteJoint, channel: AlignmentChannel, predictor) -> ElboResult:
    """E[ln P(Y | Z_hat)] - KL(P(Z) || product target), all by enumeration."""
    n = channel.target.size
    if any(s != n for s in joint.z_sizes):
        raise ValidationError("elbo_joint: alphabet mismatch with channel")
    pred = _validate_predictor(predictor, joint.z_sizes, joint.probs.shape[0])
    y_zhat = _joint_y_zhat(joint, channel)
    # weight[y, zhat] * ln pred[zhat, y]
    cond = np.moveaxis(pred, -1, 0)
    loglik, ll_inf = _expected_loglik(y_zhat, cond)
    target_joint = channel.target
    for _ in range(joint.n_coords - 1):
        target_joint = np.multiply.outer(target_joint, channel.target)
    kl = kl_discrete(joint.z_marginal(), target_joint)
    kl_inf = isinf(kl)
    value = -inf if (ll_inf or kl_inf) else loglik - kl
    return ElboResult(value, loglik, kl, kl_inf, ll_inf)


def elbo_per_modality(joint: DiscreteJoint, channel: AlignmentChannel, predictor) -> ElboResult:
    """sum_j ( E[ln P(Y | Z_hat_j)] - KL(P(Z_j) || target) ).

    The per-coordinate predictor is induced from the full-tuple predictor
    table by conditioning on the remaining aligned coordinates under the
    channel-induced distribution.
    """
    n = channel.target.size
    if any(s != n for s in joint.z_sizes):
        raise ValidationError("elbo_per_modality: alphabet mismatch with channel")
    pred = _validate_predictor(predictor, joint.z_sizes, joint.probs.shape[0])
    y_zhat = _joint_y_zhat(joint, channel)
    p_zhat = y_zhat.sum(axis=0)
    q = p_zhat[..., None] * pred  # Q(z_hat, y)

    total_ll = 0.0
    total_kl = 0.0
    ll_inf = False
    kl_inf = False
    parts = []
    for j in range(joint.n_coords):
        other = tuple(a for a in range(joint.n_coords) if a != j)
        numer = q.sum(axis=other)  # (z_hat_j, y)
        denom = p_zhat.sum(axis=other)  # (z_hat_j,)
        with np.errstate(invalid="ignore", divide="ignore"):
            induced = np.where(denom[:, None] > 0, numer / np.maximum(denom[:, None], 1e-300), 0.0)
        w = y_zhat.sum(axis=tuple(1 + a for a in other))  # (y, z_hat_j)
        ll_j, inf_j = _expected_loglik(w, induced.T)
        kl_j = kl_discrete(joint.z_coord_marginal(j), channel.target)
        parts.append({"loglik": ll_j, "kl": kl_j})
        ll_inf = ll_inf or inf_j
        kl_inf = kl_inf or isinf(kl_j)
        total_ll += ll_j
        total_kl += kl_j
    value = -inf if (ll_inf or kl_inf) else total_ll - total_kl
    return ElboResult(value, total_ll, total_kl, kl_inf, ll_inf, tuple(parts))


def random_joint(rng: np.random.Generator, y_size: int, z_sizes) -> DiscreteJoint:
    shape = (y_size,) + tuple(z_sizes)
    flat = rng.dirichlet(np.ones(int(np.prod(shape))))
    return DiscreteJoint(flat.reshape(shape))


def random_predictor(rng: np.random.Generator, z_sizes, y_size: int) -> np.ndarray:
    rows = int(np.prod(z_sizes))
    return rng.dirichlet(np.ones(y_size), size=rows).reshape(tuple(z_sizes) + (y_size,))


def compare_elbos(
    n_instances: int,
    seed: int,
    sigma: float = 0.5,
    y_size: int = 2,
    z_size: int = 2,
    n_coords: int = 2,
) -> dict:
    """Evaluate the per-modality vs joint bound ordering on random instances.

    Each instance draws a joint, a target, and a predictor table; violations
    (per-modality value > joint value) are serialized in full so they can be
    replayed.
    """
    rng = np.random.default_rng(seed)
    records = []
    counterexamples = []
    for i in range(n_instances):
        joint = random_joint(rng, y_size, (z_size,) * n_coords)
        target = rng.dirichlet(np.ones(z_size))
        channel = AlignmentChannel(sigma, target)
        pred = random_predictor(rng, (z_size,) * n_coords, y_size)
        per = elbo_per_modality(joint, channel, pred)
        jnt = elbo_joint(joint, channel, pred)
        comparable = not (isinf(per.value) or isinf(jnt.value))
        holds = bool(per.value <= jnt.value + HOLDS_TOL) if comparable else None
        records.append(
            {
                "instance": i,
                "per_modality": per.to_dict(),
                "joint": jnt.to_dict(),
                "per_modality_leq_joint": holds,
            }
        )
        if holds is False:
            counterexamples.append(
                {
                    "instance": i,
                    "sigma": sigma,
                    "joint_probs": joint.probs.tolist(),
                    "target": target.tolist(),
                    "predictor": pred.tolist(),
                    "per_modality_value": per.value,
                    "joint_value": jnt.value,
                }
            )
    n_holds = sum(1 for r in records if r["per_modality_leq_joint"] is True)
    n_violations = len(counterexamples)
    return {
        "sigma": sigma,
        "instances": records,
        "n_instances": n_instances,
        "n_holds": n_holds,
        "n_violations": n_violations,
        "counterexamples": counterexamples,
    }


def probe_report(
    sigmas,
    n_instances: int,
    seed: int,
    y_size: int = 2,
    z_size: int = 2,
    n_coords: int = 2,
    elbo_instances: int | None = None,
) -> dict:
    """Full probe: MI-bound checks across a sigma grid plus the ELBO sweep."""
    rng = np.random.default_rng(seed)
    bound_rows = []
    total_violations = 0
    for sigma in sigmas:
        instances = []
        for i in range(n_instances):
            joint = random_joint(rng, y_size, (z_size,) * n_coords)
            target = rng.dirichlet(np.ones(z_size))
            check = check_per_modality_mi_bound(joint, AlignmentChannel(float(sigma), target))
            instances.append({"instance": i, **check.to_dict()})
        n_holds = sum(1 for r in instances if r["holds"])
        total_violations += n_instances - n_holds
        bound_rows.append(
            {
                "sigma": float(sigma),
                "n_instances": n_instances,
                "n_holds": n_holds,
                "n_violations": n_instances - n_holds,
                "instances": instances,
            }
        )
    elbo = compare_elbos(
        elbo_instances if elbo_instances is not None else n_instances,
        seed=seed + 1,
        sigma=0.5,
        y_size=y_size,
        z_size=z_size,
        n_coords=n_coords,
    )
    total_violations += elbo["n_violations"]
    return {
        "seed": int(seed),
        "bound_checks": bound_rows,
        "elbo_comparison": elbo,
        "counterexample_count": int(total_violations),
    }

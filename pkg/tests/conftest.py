import numpy as np
import pytest
import torch

from medmap.dataio import ScenarioMask, SyntheticSpec, generate_dataset
from medmap.latent_align import LatentBatch


def finite_difference_grad(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn w.r.t. one tensor.

    Independent of autograd: evaluates fn at perturbed copies only.
    """
    base = tensor.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(base))
        flat[i] = orig - h
        down = float(fn(base))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def random_latent_batch(
    rng: np.random.Generator,
    n_modalities: int = 3,
    batch: int = 4,
    dim: int = 5,
    present=None,
    dtype=torch.float64,
    requires_grad: bool = False,
    scale: float = 1.0,
) -> LatentBatch:
    present = tuple([True] * n_modalities) if present is None else tuple(present)
    feats = []
    for here in present:
        if here:
            arr = scale * rng.standard_normal((batch, dim))
            t = torch.tensor(arr, dtype=dtype, requires_grad=requires_grad)
            feats.append(t)
        else:
            feats.append(None)
    return LatentBatch(feats, ScenarioMask(present))


@pytest.fixture(scope="session")
def small_dataset():
    """16 tiny samples with a visible modality gap; shared across tests."""
    spec = SyntheticSpec(n_samples=16, height=16, width=16, gap_strength=1.0, noise_sigma=0.05)
    return generate_dataset(spec, seed=11)

"""Synthetic multi-modal segmentation data: generation, serialization, scenarios.

A sample is J co-registered single-channel images plus one shared label map
with values {0=background, 1, 2, 3}. The three foreground classes are nested
by construction: region(3) ⊆ region(3∪1) ⊆ region(3∪1∪2), i.e. the composite
targets ET ⊆ TC ⊆ WT used by the evaluation module.

Sample file format "MMS1" (little-endian):

    offset  size  field
    0       4     magic  b"MMS1"
    4       2     version u16 = 1
    6       1     modality count J (u8)
    7       1     class count (u8) = 4
    8       4     H (u32)
    12      4     W (u32)
    16      8     reserved, zero
    24      ...   J contiguous float32 arrays, row-major H*W each
    ...     H*W   one u8 label array

A dataset is a directory of ``<sample_id>.mms`` files plus ``manifest.json``
recording the sample ids and the generating spec + seed.

Train/val/test assignment is a fixed 70/15/15 split keyed on
``md5(sample_id) % 100`` so membership depends only on the id.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"MMS1"
VERSION = 1
N_CLASSES = 4
HEADER_SIZE = 24
_HEADER_STRUCT = struct.Struct("<4sHBBII8s")

# Canonical modality order for J=4. The evaluation CSV renders masks in the
# display order (Flair, T1, T1ce, T2); everything else uses this order.
MODALITY_NAMES = ("T1", "T2", "T1ce", "Flair")

# Per-modality, per-class mean intensity (rows follow MODALITY_NAMES,
# columns are classes 0..3). Each modality sees a different class best,
# which is what makes multi-modal fusion worth anything here.
DEFAULT_CONTRAST_PROFILE = (
    (0.10, 0.80, 0.30, 0.45),
    (0.15, 0.40, 0.85, 0.60),
    (0.10, 0.55, 0.25, 0.95),
    (0.05, 0.50, 0.90, 0.70),
)


def modality_names(n_modalities: int) -> tuple[str, ...]:
    if n_modalities == 4:
        return MODALITY_NAMES
    return tuple(f"M{j}" for j in range(n_modalities))


def default_contrast_profile(n_modalities: int) -> tuple[tuple[float, ...], ...]:
    """Default contrast rows; cycles the canonical four for other J."""
    return tuple(
        DEFAULT_CONTRAST_PROFILE[j % len(DEFAULT_CONTRAST_PROFILE)]
        for j in range(n_modalities)
    )


@dataclass(frozen=True)
class ScenarioMask:
    """Which modalities are available; at least one must be present."""

    present: tuple[bool, ...]

    def __post_init__(self):
        if len(self.present) < 1:
            raise ValidationError("ScenarioMask.present: must cover at least one modality")
        if not any(self.present):
            raise ValidationError("ScenarioMask.present: at least one modality must be present")
        object.__setattr__(self, "present", tuple(bool(p) for p in self.present))

    @classmethod
    def full(cls, n_modalities: int) -> "ScenarioMask":
        return cls(tuple([True] * n_modalities))

    @classmethod
    def from_indices(cls, n_modalities: int, indices) -> "ScenarioMask":
        idx = set(int(i) for i in indices)
        bad = [i for i in idx if not 0 <= i < n_modalities]
        if bad:
            raise ValidationError(f"ScenarioMask indices out of range: {sorted(bad)}")
        return cls(tuple(j in idx for j in range(n_modalities)))

    @classmethod
    def from_names(cls, n_modalities: int, names) -> "ScenarioMask":
        canon = modality_names(n_modalities)
        lookup = {n.lower(): j for j, n in enumerate(canon)}
        try:
            indices = [lookup[str(n).strip().lower()] for n in names]
        except KeyError as exc:
            raise ValidationError(f"unknown modality name {exc.args[0]!r}; expected one of {canon}")
        return cls.from_indices(n_modalities, indices)

    def indices(self) -> tuple[int, ...]:
        return tuple(j for j, p in enumerate(self.present) if p)

    @property
    def n_modalities(self) -> int:
        return len(self.present)

    @property
    def n_present(self) -> int:
        return sum(self.present)

    def to_flags(self) -> str:
        """'o'/'x' string in internal modality order."""
        return "".join("o" if p else "x" for p in self.present)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic nested-ellipse generator."""

    n_modalities: int = 4
    height: int = 32
    width: int = 32
    contrast_profile: tuple[tuple[float, ...], ...] = None  # type: ignore[assignment]
    noise_sigma: float = 0.05
    gap_strength: float = 0.0
    n_samples: int = 16

    def __post_init__(self):
        if self.contrast_profile is None:
            object.__setattr__(
                self, "contrast_profile", default_contrast_profile(self.n_modalities)
            )
        else:
            object.__setattr__(
                self,
                "contrast_profile",
                tuple(tuple(float(v) for v in row) for row in self.contrast_profile),
            )

    def validate(self) -> None:
        if self.n_modalities < 1:
            raise ValidationError("SyntheticSpec.n_modalities: must be >= 1")
        if self.height < 8:
            raise ValidationError("SyntheticSpec.height: must be >= 8")
        if self.width < 8:
            raise ValidationError("SyntheticSpec.width: must be >= 8")
        if self.noise_sigma < 0:
            raise ValidationError("SyntheticSpec.noise_sigma: must be >= 0")
        if self.gap_strength < 0:
            raise ValidationError("SyntheticSpec.gap_strength: must be >= 0")
        if self.n_samples < 0:
            raise ValidationError("SyntheticSpec.n_samples: must be >= 0")
        if len(self.contrast_profile) != self.n_modalities or any(
            len(row) != N_CLASSES for row in self.contrast_profile
        ):
            raise ValidationError(
                "SyntheticSpec.contrast_profile: must have n_modalities x 4 entries"
            )
        if not all(np.isfinite(v) for row in self.contrast_profile for v in row):
            raise ValidationError("SyntheticSpec.contrast_profile: entries must be finite")

    def to_dict(self) -> dict:
        return {
            "n_modalities": self.n_modalities,
            "height": self.height,
            "width": self.width,
            "contrast_profile": [list(row) for row in self.contrast_profile],
            "noise_sigma": self.noise_sigma,
            "gap_strength": self.gap_strength,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {
            "n_modalities",
            "height",
            "width",
            "contrast_profile",
            "noise_sigma",
            "gap_strength",
            "n_samples",
        }
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"SyntheticSpec: unknown keys {sorted(unknown)}")
        kwargs = dict(d)
        if "contrast_profile" in kwargs and kwargs["contrast_profile"] is not None:
            kwargs["contrast_profile"] = tuple(tuple(r) for r in kwargs["contrast_profile"])
        return cls(**kwargs)


@dataclass(eq=False)
class MultiModalSample:
    """J modality images (float32 H x W) plus one shared uint8 label map."""

    modalities: list[np.ndarray]
    label: np.ndarray
    sample_id: str

    def __post_init__(self):
        if not self.modalities:
            raise ValidationError("MultiModalSample.modalities: must not be empty")
        shape = self.label.shape
        if self.label.ndim != 2:
            raise ValidationError("MultiModalSample.label: must be 2-D")
        for j, m in enumerate(self.modalities):
            if m.shape != shape:
                raise ValidationError(
                    f"MultiModalSample.modalities[{j}]: shape {m.shape} != label shape {shape}"
                )
        values = np.unique(self.label)
        if values.size and (values.min() < 0 or values.max() >= N_CLASSES):
            raise ValidationError(
                f"MultiModalSample.label: values must be in 0..{N_CLASSES - 1}, got {values}"
            )

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def check_nesting(self) -> None:
        """Foreground regions must nest: region(3) ⊆ region(3,1) ⊆ region(3,1,2)."""
        et = self.label == 3
        tc = et | (self.label == 1)
        wt = tc | (self.label == 2)
        if not (np.all(~et | tc) and np.all(~tc | wt)):
            raise ValidationError(f"MultiModalSample {self.sample_id}: nesting violated")

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiModalSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and len(self.modalities) == len(other.modalities)
            and self.label.dtype == other.label.dtype
            and np.array_equal(self.label, other.label)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.modalities, other.modalities)
            )
        )


def modality_affine(n_modalities: int, gap_strength: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-modality intensity gain/offset, scaled by gap_strength.

    The pattern is a deterministic function of the modality index, so the
    inter-modality gap is a systematic, controllable property of the data
    rather than sampling noise. gap_strength=0 gives the identity transform.
    """
    idx = np.arange(n_modalities, dtype=np.float64)
    denom = max(n_modalities - 1, 1)
    centered = 2.0 * idx / denom - 1.0 if n_modalities > 1 else np.zeros(1)
    gains = 1.0 + 0.15 * gap_strength * centered
    signs = np.where(idx % 2 == 0, 1.0, -1.0)
    offsets = 0.25 * gap_strength * signs * (0.4 + 0.6 * idx / denom)
    return gains, offsets


def _ellipse_mask(yy, xx, cy, cx, ay, ax, theta) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_dataset(spec: SyntheticSpec, seed: int) -> list[MultiModalSample]:
    """Deterministically generate spec.n_samples nested-ellipse samples.

    Per sample: draw one outer ellipse (whole-region analog) and two nested
    shrink factors, rasterize the three nested classes, render each modality
    from the contrast profile, apply the per-modality affine shift scaled by
    gap_strength, then add Gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W, J = spec.height, spec.width, spec.n_modalities
    yy, xx = np.meshgrid(
        np.arange(H, dtype=np.float64) + 0.5,
        np.arange(W, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    m = float(min(H, W))
    profile = np.asarray(spec.contrast_profile, dtype=np.float64)
    gains, offsets = modality_affine(J, spec.gap_strength)

    samples = []
    for i in range(spec.n_samples):
        cy = rng.uniform(0.35, 0.65) * H
        cx = rng.uniform(0.35, 0.65) * W
        ay = rng.uniform(0.18, 0.30) * m
        ax = rng.uniform(0.18, 0.30) * m
        theta = rng.uniform(0.0, np.pi)
        s_mid = rng.uniform(0.55, 0.80)
        s_core = rng.uniform(0.45, 0.75)

        outer = _ellipse_mask(yy, xx, cy, cx, ay, ax, theta)
        mid = _ellipse_mask(yy, xx, cy, cx, ay * s_mid, ax * s_mid, theta)
        core = _ellipse_mask(yy, xx, cy, cx, ay * s_mid * s_core, ax * s_mid * s_core, theta)

        label = np.zeros((H, W), dtype=np.uint8)
        label[outer] = 2
        label[mid] = 1
        label[core] = 3

        images = []
        for j in range(J):
            img = profile[j][label]
            img = gains[j] * img + offsets[j]
            if spec.noise_sigma > 0:
                img = img + spec.noise_sigma * rng.standard_normal((H, W))
            images.append(np.ascontiguousarray(img, dtype=np.float32))

        sample = MultiModalSample(images, label, f"s{i:04d}")
        sample.check_nesting()
        samples.append(sample)
    return samples


def enumerate_scenarios(n_modalities: int) -> list[ScenarioMask]:
    """All non-empty modality subsets, ordered by (popcount, present indices).

    Length is 2^J - 1 with no duplicates; for J=4 that is the 15 scenarios.
    """
    if n_modalities < 1:
        raise ValidationError("enumerate_scenarios: n_modalities must be >= 1")
    masks = []
    for size in range(1, n_modalities + 1):
        for combo in itertools.combinations(range(n_modalities), size):
            masks.append(ScenarioMask.from_indices(n_modalities, combo))
    return masks


def write_sample(sample: MultiModalSample, path) -> None:
    H, W = sample.label.shape
    header = _HEADER_STRUCT.pack(
        MAGIC, VERSION, sample.n_modalities, N_CLASSES, H, W, b"\x00" * 8
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for img in sample.modalities:
            fh.write(np.ascontiguousarray(img, dtype=np.float32).tobytes())
        fh.write(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())


def read_sample(path) -> MultiModalSample:
    """Read one MMS1 file; the sample id is the file stem."""
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(data)} < {HEADER_SIZE} bytes", len(data))
    magic, version, n_mod, n_cls, H, W, _reserved = _HEADER_STRUCT.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    if n_mod < 1:
        raise FormatError(f"modality count must be >= 1, got {n_mod}", 6)
    if n_cls != N_CLASSES:
        raise FormatError(f"class count must be {N_CLASSES}, got {n_cls}", 7)
    plane = H * W
    expected = HEADER_SIZE + n_mod * plane * 4 + plane
    if len(data) != expected:
        raise FormatError(
            f"file has {len(data)} bytes, expected {expected}", min(len(data), expected)
        )
    modalities = []
    offset = HEADER_SIZE
    for _ in range(n_mod):
        arr = np.frombuffer(data, dtype="<f4", count=plane, offset=offset).reshape(H, W)
        modalities.append(arr.copy())
        offset += plane * 4
    label = np.frombuffer(data, dtype=np.uint8, count=plane, offset=offset).reshape(H, W).copy()
    return MultiModalSample(modalities, label, Path(path).stem)


def write_dataset(samples: list[MultiModalSample], spec: SyntheticSpec, seed: int, out_dir) -> dict:
    """Write samples plus manifest.json into out_dir; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        write_sample(sample, out / f"{sample.sample_id}.mms")
    manifest = {
        "sample_ids": [s.sample_id for s in samples],
        "spec": spec.to_dict(),
        "seed": int(seed),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {dataset_dir}", 0)
    return json.loads(path.read_text())


def load_dataset(dataset_dir) -> list[MultiModalSample]:
    manifest = load_manifest(dataset_dir)
    return [read_sample(Path(dataset_dir) / f"{sid}.mms") for sid in manifest["sample_ids"]]


def dataset_manifest_hash(dataset_dir) -> str:
    """sha256 of the manifest bytes; identifies the generating spec+seed."""
    path = Path(dataset_dir) / "manifest.json"
    return hashlib.sha256(path.read_bytes()).hexdigest()


def split_of(sample_id: str) -> str:
    """Stable 70/15/15 assignment keyed on the id alone."""
    digest = hashlib.md5(sample_id.encode("utf-8")).hexdigest()
    bucket = int(digest, 16) % 100
    if bucket < 70:
        return "train"
    if bucket < 85:
        return "val"
    return "test"


def split_samples(samples: list[MultiModalSample]) -> dict[str, list[MultiModalSample]]:
    out: dict[str, list[MultiModalSample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[split_of(s.sample_id)].append(s)
    return out

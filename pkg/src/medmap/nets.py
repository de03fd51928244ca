"""Compact encoder/fusion/decoder stack over 2-D multi-modal samples.

The encoder maps each modality image to a spatial feature map in a shared
latent space; the map is global-average-pooled to a (B, D) vector for the
alignment losses while the full map feeds fusion and decoding. Two encoder
styles are supported:

  SHARED_TSTAR  one encoder of channel width J*c applied to every modality;
  NON_SHARED    J independent encoders of width c each.

Downsampling stages use depthwise convolutions, so the parameter count is
linear in channel width and the two styles stay weight-comparable (cross-
channel mixing happens in the stem, the 1x1 latent projection, the fusion
mixer, and the decoder). Missing modalities are excluded by masked fusion,
never zero-imputed at the input.

Checkpoint format "MMCKPT1": magic b"MMCKPT1\\x00", u32 header length, JSON
header (arch, caller config, step, seed, parameter directory), then the raw
float32 parameter blobs in directory order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import MultiModalSample, ScenarioMask
from .errors import ConfigurationError, FormatError, NumericError, ValidationError
from .latent_align import LatentBatch

CKPT_MAGIC = b"MMCKPT1\x00"


class EncoderStyle(Enum):
    SHARED_TSTAR = "shared_tstar"
    NON_SHARED = "non_shared"


@dataclass(frozen=True)
class EncoderConfig:
    style: EncoderStyle = EncoderStyle.SHARED_TSTAR
    base_channels: int = 4
    latent_dim: int = 16
    depth: int = 3

    def validate(self) -> None:
        if self.base_channels < 1:
            raise ValidationError("EncoderConfig.base_channels: must be >= 1")
        if self.latent_dim < 1:
            raise ValidationError("EncoderConfig.latent_dim: must be >= 1")
        if self.depth < 1:
            raise ValidationError("EncoderConfig.depth: must be >= 1")

    def to_dict(self) -> dict:
        return {
            "style": self.style.value,
            "base_channels": self.base_channels,
            "latent_dim": self.latent_dim,
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {"style", "base_channels", "latent_dim", "depth"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"EncoderConfig: unknown keys {sorted(unknown)}")
        return cls(
            style=EncoderStyle(d.get("style", EncoderStyle.SHARED_TSTAR.value)),
            base_channels=int(d.get("base_channels", 4)),
            latent_dim=int(d.get("latent_dim", 16)),
            depth=int(d.get("depth", 3)),
        )


class ChannelNorm(nn.Module):
    """Per-position LayerNorm over channels of a (B, C, H, W) map.

    Stateless (no running buffers), so the forward pass stays a pure
    function of parameters and inputs. Keeps feature scales O(1), which
    keeps batch moments well away from the Gaussian-KL variance floor.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ModalityEncoder(nn.Module):
    """Strided stem + depthwise downsampling stages + 1x1 latent projection.

    Every stage is conv -> channel norm -> GELU; the projection output is
    normalized but not activated.
    """

    def __init__(self, width: int, latent_dim: int, depth: int):
        super().__init__()
        self.stem = nn.Conv2d(1, width, 3, stride=2, padding=1)
        self.stem_norm = ChannelNorm(width)
        self.stages = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride=2, padding=1, groups=width)
            for _ in range(depth - 1)
        )
        self.stage_norms = nn.ModuleList(ChannelNorm(width) for _ in range(depth - 1))
        # the projection output is deliberately NOT normalized: the anchors
        # act on its raw batch statistics
        self.proj = nn.Conv2d(width, latent_dim, 1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.stem_norm(self.stem(x)))
        for stage, norm in zip(self.stages, self.stage_norms):
            x = self.act(norm(stage(x)))
        return self.proj(x)

    def stage_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage feature distributions, projection included.

        Each entry is (B*h_s*w_s, C_s): every spatial position counts as one
        draw, so fitted batch moments carry spatial variation and stay well
        conditioned.
        """

        def flat(t: torch.Tensor) -> torch.Tensor:
            return t.permute(0, 2, 3, 1).reshape(-1, t.shape[1])

        feats = []
        x = self.act(self.stem_norm(self.stem(x)))
        feats.append(flat(x))
        for stage, norm in zip(self.stages, self.stage_norms):
            x = self.act(norm(stage(x)))
            feats.append(flat(x))
        feats.append(flat(self.proj(x)))
        return feats


class SegmentationModel(nn.Module):
    """Per-modality encoders, masked-mean fusion, upsampling decoder."""

    def __init__(
        self,
        n_modalities: int,
        encoder: EncoderConfig,
        n_classes: int = 4,
        anchor_logits=None,
        seed: int = 0,
    ):
        super().__init__()
        encoder.validate()
        if n_modalities < 1:
            raise ValidationError("SegmentationModel: n_modalities must be >= 1")
        self.n_modalities = n_modalities
        self.n_classes = n_classes
        self.encoder_config = encoder
        D = encoder.latent_dim
        if encoder.style is EncoderStyle.SHARED_TSTAR:
            width = n_modalities * encoder.base_channels
            self.shared_encoder = ModalityEncoder(width, D, encoder.depth)
            self.encoders = None
        else:
            self.shared_encoder = None
            self.encoders = nn.ModuleList(
                ModalityEncoder(encoder.base_channels, D, encoder.depth)
                for _ in range(n_modalities)
            )
        self.fusion_mix = nn.Conv2d(D, D, 1)
        self.decoder_blocks = nn.ModuleList(
            nn.Conv2d(D, D, 3, padding=1) for _ in range(encoder.depth)
        )
        self.head = nn.Conv2d(D, n_classes, 1)
        self.act = nn.GELU()
        if anchor_logits is not None:
            self.anchor_logits = nn.Parameter(
                torch.as_tensor(anchor_logits, dtype=torch.float32).reshape(-1).clone()
            )
        init_parameters(self, seed)

    def encoder_for(self, j: int) -> ModalityEncoder:
        if self.shared_encoder is not None:
            return self.shared_encoder
        return self.encoders[j]

    def _check_spatial(self, images: torch.Tensor) -> None:
        H, W = images.shape[-2:]
        factor = 2**self.encoder_config.depth
        if H % factor or W % factor:
            raise ValidationError(
                f"input {H}x{W} must be divisible by 2^depth = {factor}"
            )

    def encode(self, images: torch.Tensor, mask: ScenarioMask):
        """Returns (per-modality feature maps, pooled LatentBatch).

        images: (B, J, H, W). Absent modalities get None in both outputs.
        """
        if images.ndim != 4 or images.shape[1] != self.n_modalities:
            raise ValidationError(
                f"encode: images must be (B, {self.n_modalities}, H, W), got {tuple(images.shape)}"
            )
        if mask.n_modalities != self.n_modalities:
            raise ValidationError("encode: mask arity does not match the model")
        self._check_spatial(images)
        maps: list = [None] * self.n_modalities
        feats: list = [None] * self.n_modalities
        for j in mask.indices():
            m = self.encoder_for(j)(images[:, j : j + 1])
            maps[j] = m
            feats[j] = m.mean(dim=(2, 3))
        return maps, LatentBatch(feats, mask)

    def encode_stages(self, images: torch.Tensor, mask: ScenarioMask) -> list:
        """Per-modality list of pooled per-stage features (None where absent)."""
        self._check_spatial(images)
        out: list = [None] * self.n_modalities
        for j in mask.indices():
            out[j] = self.encoder_for(j).stage_features(images[:, j : j + 1])
        return out

    def fuse(self, maps: list, mask: ScenarioMask) -> torch.Tensor:
        """Masked mean over present feature maps, then the 1x1 mixing layer."""
        idx = mask.indices()
        stacked = torch.stack([maps[j] for j in idx], dim=0)
        return self.fusion_mix(stacked.mean(dim=0))

    def predict(self, fused: torch.Tensor) -> torch.Tensor:
        """Upsampling decoder back to input resolution; (B, n_classes, H, W) logits."""
        x = fused
        for i, block in enumerate(self.decoder_blocks):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.act(block(x))
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations in decoder_blocks.{i}")
        logits = self.head(x)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite activations in head")
        return logits

    def forward(self, images: torch.Tensor, mask: ScenarioMask):
        maps, latents = self.encode(images, mask)
        logits = self.predict(self.fuse(maps, mask))
        return logits, latents

    def arch_dict(self) -> dict:
        return {
            "n_modalities": self.n_modalities,
            "n_classes": self.n_classes,
            "encoder": self.encoder_config.to_dict(),
            "has_anchor_logits": hasattr(self, "anchor_logits"),
        }


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform weights, zero conv biases, unit norm scales.

    One seeded generator drives everything, in named-parameter order, so
    initialization is reproducible and independent of anchor parameters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    norm_params = {
        id(p) for m in model.modules() if isinstance(m, ChannelNorm) for p in m.parameters()
    }
    for name, p in model.named_parameters():
        if name == "anchor_logits":
            continue
        with torch.no_grad():
            if id(p) in norm_params:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy; labels must be valid class indices."""
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValidationError(
            f"cross_entropy_loss: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}"
        )
    labels = labels.long()
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels out of range 0..{n_classes - 1}")
    return F.cross_entropy(logits, labels, reduction="mean")


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft-Dice over the foreground classes (1..C-1), batch-aggregated."""
    labels = labels.long()
    probs = torch.softmax(logits, dim=1)
    losses = []
    for c in range(1, logits.shape[1]):
        p = probs[:, c]
        g = (labels == c).to(probs.dtype)
        inter = (p * g).sum()
        denom = p.sum() + g.sum()
        losses.append(1.0 - (2.0 * inter + eps) / (denom + eps))
    return sum(losses) / len(losses)


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Hybrid objective: mean per-pixel cross-entropy plus soft-Dice."""
    return cross_entropy_loss(logits, labels) + dice_loss(logits, labels)


def samples_to_tensors(samples: list[MultiModalSample]):
    """Stack samples into (N, J, H, W) float32 images and (N, H, W) int64 labels."""
    if not samples:
        raise ValidationError("samples_to_tensors: empty sample list")
    images = torch.from_numpy(
        np.stack([np.stack(s.modalities, axis=0) for s in samples]).astype(np.float32)
    )
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return images, labels


def assert_all_parameters_in_graph(loss: torch.Tensor, model: nn.Module) -> None:
    """Raise if any trainable parameter is disconnected from the loss graph."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        loss, [p for _, p in named], allow_unused=True, retain_graph=True
    )
    dead = [n for (n, _), g in zip(named, grads) if g is None]
    if dead:
        raise ConfigurationError(f"parameters receive no gradient in this regime: {dead}")


def param_checksum(model: nn.Module) -> str:
    """sha256 over the named float32 parameter blobs, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: SegmentationModel, config: dict, step: int, seed: int) -> None:
    state = model.state_dict()
    directory = [
        {"name": name, "shape": list(t.shape), "dtype": "float32"} for name, t in state.items()
    ]
    header = {
        "format": "MMCKPT1",
        "version": 1,
        "arch": model.arch_dict(),
        "config": config,
        "step": int(step),
        "seed": int(seed),
        "params": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name, t in state.items():
            fh.write(t.detach().cpu().to(torch.float32).numpy().tobytes())


def load_checkpoint(path):
    """Returns (header dict, state dict of float32 tensors)."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 4:
        raise FormatError("truncated checkpoint header", len(data))
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:8]!r}", 0)
    (header_len,) = struct.unpack_from("<I", data, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 4
    if len(data) < start + header_len:
        raise FormatError("truncated checkpoint header JSON", len(data))
    header = json.loads(data[start : start + header_len].decode("utf-8"))
    offset = start + header_len
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        if len(data) < offset + nbytes:
            raise FormatError(f"truncated blob for {entry['name']}", len(data))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    return header, state


def build_model_from_checkpoint(path) -> tuple[SegmentationModel, dict]:
    header, state = load_checkpoint(path)
    arch = header["arch"]
    model = SegmentationModel(
        n_modalities=arch["n_modalities"],
        encoder=EncoderConfig.from_dict(arch["encoder"]),
        n_classes=arch["n_classes"],
        anchor_logits=state["anchor_logits"] if arch.get("has_anchor_logits") else None,
        seed=header.get("seed", 0),
    )
    model.load_state_dict(state)
    return model, header

"""Dice evaluation over nested classes and all missing-modality scenarios,
2-D latent projections, and report rendering (CSV + JSON + figures).

CSV schema: header ``scenario,present_mask,WT,TC,ET``; the mask is an
'o'/'x' string (present/absent). For four modalities the string is rendered
in display order Flair, T1, T1ce, T2; otherwise in internal order. Every
dice CSV ends with a footer comment recording the empty-region convention
(two empty regions count as a perfect 100, since predicting nothing where
nothing exists is correct).

JSON summary schema is versioned "MMREP1".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .dataio import (
    MultiModalSample,
    ScenarioMask,
    enumerate_scenarios,
    modality_names,
)
from .errors import ReportError, ValidationError
from .latent_align import LatentBatch
from .nets import SegmentationModel, samples_to_tensors

EMPTY_REGION_DICE = 100.0
DISPLAY_ORDER = ("Flair", "T1", "T1ce", "T2")
CLASS_COLUMNS = ("WT", "TC", "ET")
SUMMARY_FORMAT = "MMREP1"


def composite_classes() -> dict[str, set[int]]:
    """Nested composite targets over the raw labels {1, 2, 3}."""
    return {"WT": {1, 2, 3}, "TC": {1, 3}, "ET": {3}}


def dice(pred: np.ndarray, gt: np.ndarray, class_set) -> float:
    """Dice percentage of membership-in-class_set masks; empty vs empty is 100."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    classes = list(class_set)
    p = np.isin(pred, classes)
    g = np.isin(gt, classes)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return EMPTY_REGION_DICE
    return 100.0 * 2.0 * int((p & g).sum()) / denom


def mask_display_string(mask: ScenarioMask) -> str:
    """'o'/'x' presence string in Flair,T1,T1ce,T2 order for J=4."""
    if mask.n_modalities == 4:
        names = modality_names(4)
        order = [names.index(n) for n in DISPLAY_ORDER]
        return "".join("o" if mask.present[j] else "x" for j in order)
    return mask.to_flags()


def scenario_name(mask: ScenarioMask) -> str:
    names = modality_names(mask.n_modalities)
    return "+".join(names[j] for j in mask.indices())


@dataclass
class DiceTable:
    """Per-(scenario, composite class) Dice grid with its marginals."""

    masks: list[ScenarioMask]
    scores: dict[str, list[float]]  # class name -> per-scenario dice
    avg_by_missing: dict[str, dict[int, float]]
    total_avg: dict[str, float]
    grand_average: float

    @classmethod
    def from_scores(cls, masks: list[ScenarioMask], scores: dict[str, list[float]]) -> "DiceTable":
        for cname, vals in scores.items():
            if len(vals) != len(masks):
                raise ValidationError(f"DiceTable: {cname} has {len(vals)} cells for {len(masks)} scenarios")
            if any(not 0.0 <= v <= 100.0 for v in vals):
                raise ValidationError(f"DiceTable: {cname} entries must lie in [0, 100]")
        J = masks[0].n_modalities
        avg_by_missing: dict[str, dict[int, float]] = {}
        total_avg: dict[str, float] = {}
        for cname, vals in scores.items():
            by_n: dict[int, list[float]] = {}
            for m, v in zip(masks, vals):
                by_n.setdefault(J - m.n_present, []).append(v)
            avg_by_missing[cname] = {n: float(np.mean(vs)) for n, vs in sorted(by_n.items())}
            total_avg[cname] = float(np.mean(vals))
        grand = float(np.mean([total_avg[c] for c in scores]))
        return cls(list(masks), dict(scores), avg_by_missing, total_avg, grand)

    def to_dict(self) -> dict:
        return {
            "masks": [list(m.present) for m in self.masks],
            "scores": self.scores,
            "avg_by_missing": {
                c: {str(n): v for n, v in d.items()} for c, d in self.avg_by_missing.items()
            },
            "total_avg": self.total_avg,
            "grand_average": self.grand_average,
            "empty_region_dice": EMPTY_REGION_DICE,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceTable":
        return cls(
            masks=[ScenarioMask(tuple(m)) for m in d["masks"]],
            scores={c: list(map(float, v)) for c, v in d["scores"].items()},
            avg_by_missing={
                c: {int(n): float(v) for n, v in sub.items()}
                for c, sub in d["avg_by_missing"].items()
            },
            total_avg={c: float(v) for c, v in d["total_avg"].items()},
            grand_average=float(d["grand_average"]),
        )


def evaluate_all_scenarios(
    model: SegmentationModel,
    samples: list[MultiModalSample],
    batch_size: int = 16,
) -> DiceTable:
    """Masked inference over every non-empty modality subset.

    Per scenario: encode the present modalities, fuse, predict, argmax, then
    average each composite class's Dice over the samples.
    """
    if not samples:
        raise ValidationError("evaluate_all_scenarios: empty sample list")
    images, _ = samples_to_tensors(samples)
    classes = composite_classes()
    masks = enumerate_scenarios(model.n_modalities)
    scores: dict[str, list[float]] = {c: [] for c in CLASS_COLUMNS}
    model.eval()
    with torch.no_grad():
        for mask in masks:
            preds = []
            for start in range(0, len(samples), batch_size):
                chunk = images[start : start + batch_size]
                logits, _ = model(chunk, mask)
                preds.append(logits.argmax(dim=1).numpy())
            pred = np.concatenate(preds, axis=0)
            for cname in CLASS_COLUMNS:
                per_sample = [
                    dice(pred[i], samples[i].label, classes[cname])
                    for i in range(len(samples))
                ]
                scores[cname].append(float(np.mean(per_sample)))
    return DiceTable.from_scores(masks, scores)


def project_embeddings(latents: LatentBatch) -> tuple[list, bool]:
    """Shared 2-D linear projection of every modality's (B, D) features.

    The projection is the top-2 principal directions of the modality-pooled
    covariance, sign-fixed so each direction's largest-magnitude coordinate
    is positive; the same basis is applied to every modality so the
    inter-modality geometry stays comparable. Returns (per-modality (B, 2)
    arrays with None where absent, fallback_flag); the fallback (first two
    coordinates) triggers on rank-deficient covariance.
    """
    if latents.batch_size < 2:
        raise ValidationError("project_embeddings: batch size must be >= 2")
    idx = latents.present_indices()
    feats = [np.asarray(latents.features[j].detach().to(torch.float64)) for j in idx]
    pooled = np.concatenate(feats, axis=0)
    center = pooled.mean(axis=0)
    D = pooled.shape[1]

    fallback = False
    if D < 2:
        fallback = True
    else:
        cov = np.cov(pooled - center, rowvar=False, ddof=0)
        eigvals, eigvecs = np.linalg.eigh(np.atleast_2d(cov))
        order = np.argsort(eigvals)[::-1]
        if eigvals[order[1]] < 1e-12:
            fallback = True
        else:
            basis = eigvecs[:, order[:2]]
            for c in range(2):
                lead = np.argmax(np.abs(basis[:, c]))
                if basis[lead, c] < 0:
                    basis[:, c] = -basis[:, c]

    out: list = [None] * latents.present.n_modalities
    for j, f in zip(idx, feats):
        if fallback:
            coords = np.zeros((f.shape[0], 2))
            coords[:, : min(2, D)] = f[:, : min(2, D)]
            out[j] = coords
        else:
            out[j] = (f - center) @ basis
    return out, fallback


@dataclass
class RunRecord:
    """One evaluated run, as consumed by render_report."""

    name: str
    config: dict
    dice_table: DiceTable
    metrics: dict | None = None
    dataset_hash: str | None = None


def write_dice_csv(table: DiceTable, path) -> None:
    # repr keeps full float precision so values round-trip exactly
    lines = ["scenario,present_mask," + ",".join(CLASS_COLUMNS)]
    for i, mask in enumerate(table.masks):
        cells = ",".join(repr(table.scores[c][i]) for c in CLASS_COLUMNS)
        lines.append(f"{scenario_name(mask)},{mask_display_string(mask)},{cells}")
    lines.append(f"# empty_region_dice={EMPTY_REGION_DICE:g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_delta_csv(with_table: DiceTable, without_table: DiceTable, path) -> None:
    """Per-cell (with - without); exact float subtraction."""
    if [m.present for m in with_table.masks] != [m.present for m in without_table.masks]:
        raise ReportError("delta: scenario grids differ between the paired tables")
    lines = ["scenario,present_mask," + ",".join(CLASS_COLUMNS)]
    for i, mask in enumerate(with_table.masks):
        cells = ",".join(
            repr(with_table.scores[c][i] - without_table.scores[c][i]) for c in CLASS_COLUMNS
        )
        lines.append(f"{scenario_name(mask)},{mask_display_string(mask)},{cells}")
    lines.append(f"# empty_region_dice={EMPTY_REGION_DICE:g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _pair_key(config: dict):
    stripped = {k: v for k, v in config.items() if k != "medmap_enabled"}
    return json.dumps(stripped, sort_keys=True)


def _plot_loss_curves(name: str, traces: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for term, values in sorted(traces.items()):
        ax.plot(range(1, len(values) + 1), values, label=term)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"loss terms: {name}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_gap_trace(name: str, gap_values: list, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(gap_values) + 1), gap_values, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean off-diagonal pairwise KL")
    ax.set_title(f"modality gap: {name}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_embeddings(name: str, coords: list, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    J = len(coords)
    names = modality_names(J)
    cmap = plt.get_cmap("tab10")
    for j, c in enumerate(coords):
        if c is None:
            continue
        c = np.asarray(c)
        ax.scatter(c[:, 0], c[:, 1], s=12, color=cmap(j % 10), label=names[j], alpha=0.8)
    ax.set_title(f"latent projection: {name}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_report(records: list[RunRecord], out_dir) -> dict:
    """Write per-run CSVs and figures, paired delta CSVs, and summary.json.

    Runs whose configs differ only in ``medmap_enabled`` are paired and get
    a with-minus-without delta table. All runs must reference the same
    dataset manifest. Returns the summary dict.
    """
    if not records:
        raise ReportError("render_report: no runs to report")
    hashes = {r.dataset_hash for r in records if r.dataset_hash is not None}
    if len(hashes) > 1:
        raise ReportError(f"render_report: runs reference different dataset manifests: {sorted(hashes)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary: dict = {
        "format": SUMMARY_FORMAT,
        "empty_region_dice": EMPTY_REGION_DICE,
        "runs": [],
        "pairs": [],
    }
    files: list[str] = []

    for rec in records:
        csv_path = out / f"dice_{rec.name}.csv"
        write_dice_csv(rec.dice_table, csv_path)
        files.append(csv_path.name)
        entry = {
            "name": rec.name,
            "config": rec.config,
            "grand_average": rec.dice_table.grand_average,
            "total_avg": rec.dice_table.total_avg,
            "avg_by_missing": {
                c: {str(n): v for n, v in d.items()}
                for c, d in rec.dice_table.avg_by_missing.items()
            },
        }
        summary["runs"].append(entry)
        if rec.metrics:
            if rec.metrics.get("loss_traces"):
                p = out / f"loss_{rec.name}.png"
                _plot_loss_curves(rec.name, rec.metrics["loss_traces"], p)
                files.append(p.name)
            if rec.metrics.get("mean_offdiag_kl_trace"):
                p = out / f"gap_{rec.name}.png"
                _plot_gap_trace(rec.name, rec.metrics["mean_offdiag_kl_trace"], p)
                files.append(p.name)
            if rec.metrics.get("final_latents"):
                latents = rec.metrics["final_latents"]
                mask = ScenarioMask(tuple(z is not None for z in latents))
                batch = LatentBatch(
                    [None if z is None else torch.as_tensor(np.asarray(z)) for z in latents],
                    mask,
                )
                coords, _ = project_embeddings(batch)
                p = out / f"embeddings_{rec.name}.png"
                _plot_embeddings(rec.name, coords, p)
                files.append(p.name)

    by_pair: dict[str, dict[bool, RunRecord]] = {}
    for rec in records:
        if "medmap_enabled" in rec.config:
            by_pair.setdefault(_pair_key(rec.config), {})[bool(rec.config["medmap_enabled"])] = rec
    for group in by_pair.values():
        if True in group and False in group:
            with_rec, without_rec = group[True], group[False]
            delta_path = out / f"dice_delta_{with_rec.name}_vs_{without_rec.name}.csv"
            write_delta_csv(with_rec.dice_table, without_rec.dice_table, delta_path)
            files.append(delta_path.name)
            summary["pairs"].append(
                {
                    "with": with_rec.name,
                    "without": without_rec.name,
                    "grand_average_delta": with_rec.dice_table.grand_average
                    - without_rec.dice_table.grand_average,
                    "total_avg_delta": {
                        c: with_rec.dice_table.total_avg[c] - without_rec.dice_table.total_avg[c]
                        for c in CLASS_COLUMNS
                    },
                }
            )

    summary["files"] = sorted(set(files))
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def pair_delta(with_rec: RunRecord, without_rec: RunRecord) -> dict:
    """Grand-average and per-class deltas for an explicitly chosen pair."""
    key_w, key_wo = _pair_key(with_rec.config), _pair_key(without_rec.config)
    if key_w != key_wo:
        raise ReportError(
            f"pair_delta: configs differ beyond medmap_enabled:\n  {key_w}\n  {key_wo}"
        )
    return {
        "grand_average_delta": with_rec.dice_table.grand_average
        - without_rec.dice_table.grand_average,
        "total_avg_delta": {
            c: with_rec.dice_table.total_avg[c] - without_rec.dice_table.total_avg[c]
            for c in CLASS_COLUMNS
        },
    }

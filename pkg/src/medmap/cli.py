"""Config-driven command line for data generation, training, evaluation,
information probes, and report rendering.

Subcommands: gen-data, train, eval, gap, theory, report.

Config files hold one ``key = value`` pair per line ('#' starts a comment);
values are parsed as JSON when possible, otherwise taken as strings. A file
whose first non-blank character is '{' is parsed as plain JSON. Keys must
belong to the run-config schema; unknown keys are rejected. Command-line
flags override config-file values.

One run = one directory containing the exact config echo (config.json), the
checkpoint (checkpoint.mmckpt), and metrics.json. Seeds are explicit and
mandatory for train/theory. Exit codes: 0 success, 2 config error,
3 runtime/numeric error. MEDMAP_NUM_WORKERS bounds parallel seed runs.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import dataio, evalrep, regimes, theory
from .dataio import ScenarioMask, SyntheticSpec, modality_names
from .errors import (
    ConfigurationError,
    FormatError,
    MedmapError,
    NumericError,
    ReportError,
    ValidationError,
)
from .latent_align import AnchorSpec, AnchorVariant, estimate_gap
from .nets import EncoderConfig, EncoderStyle, build_model_from_checkpoint, save_checkpoint

# Single schema shared by every command; each command reads its own subset.
RUNCONFIG_KEYS = {
    # synthetic data
    "n_modalities", "height", "width", "contrast_profile", "noise_sigma",
    "gap_strength", "n_samples",
    # regime
    "regime", "medmap", "anchor", "anchor_k", "anchor_prior", "alpha",
    "epochs", "batch_size", "learning_rate", "normal_mode",
    "encoder_style", "base_channels", "latent_dim", "depth",
    "student_mask", "teacher", "split",
    # run plumbing
    "seed", "seeds", "out", "data",
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def parse_config_file(path) -> dict:
    """Parse key=value lines (or a JSON object) into a config dict."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: JSON config must be an object")
    else:
        data = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            try:
                data[key] = json.loads(value)
            except json.JSONDecodeError:
                data[key] = value
    unknown = set(data) - RUNCONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def _merge_config(args, keys: list[str]) -> dict:
    """Config-file values overridden by explicitly passed CLI flags."""
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(cfg: dict, key: str, command: str):
    if cfg.get(key) is None:
        raise ConfigurationError(f"{command}: '{key}' is required (flag or config file)")
    return cfg[key]


def _spec_from_config(cfg: dict) -> SyntheticSpec:
    fields = {}
    for key in ("n_modalities", "height", "width", "noise_sigma", "gap_strength", "n_samples"):
        if cfg.get(key) is not None:
            fields[key] = cfg[key]
    profile = cfg.get("contrast_profile")
    if profile is not None:
        if isinstance(profile, str):
            profile = json.loads(profile)
        fields["contrast_profile"] = tuple(tuple(row) for row in profile)
    spec = SyntheticSpec(**fields)
    spec.validate()
    return spec


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _merge_config(
        args,
        ["n_modalities", "height", "width", "contrast_profile", "noise_sigma",
         "gap_strength", "n_samples", "seed", "out"],
    )
    seed = int(_require(cfg, "seed", "gen-data"))
    out_dir = Path(_require(cfg, "out", "gen-data"))
    spec = _spec_from_config(cfg)
    samples = dataio.generate_dataset(spec, seed)
    dataio.write_dataset(samples, spec, seed, out_dir)
    digest = dataio.dataset_manifest_hash(out_dir)
    print(f"wrote {len(samples)} samples to {out_dir}")
    print(f"manifest_sha256={digest}")
    return EXIT_OK


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def _default_anchor_prior(n_modalities: int) -> int | None:
    names = modality_names(n_modalities)
    return names.index("Flair") if "Flair" in names else None


def _default_fixed_k(n_modalities: int) -> int:
    names = modality_names(n_modalities)
    return names.index("T1ce") if "T1ce" in names else 0


def _anchor_from_config(cfg: dict, n_modalities: int) -> AnchorSpec:
    variant = AnchorVariant(str(cfg.get("anchor", "adaptive")))
    if variant is AnchorVariant.NORMAL:
        return AnchorSpec(AnchorVariant.NORMAL)
    if variant is AnchorVariant.FIXED_K:
        k = cfg.get("anchor_k")
        k = _default_fixed_k(n_modalities) if k is None else int(k)
        return AnchorSpec(AnchorVariant.FIXED_K, k=k)
    prior = cfg.get("anchor_prior")
    prior = _default_anchor_prior(n_modalities) if prior is None else int(prior)
    return AnchorSpec(
        AnchorVariant.ADAPTIVE,
        weights_raw=regimes.init_adaptive_weights(n_modalities, prior),
    )


def _parse_mask(value, n_modalities: int) -> ScenarioMask:
    if isinstance(value, (list, tuple)):
        return ScenarioMask(tuple(bool(v) for v in value))
    names = [part for part in str(value).split(",") if part.strip()]
    return ScenarioMask.from_names(n_modalities, names)


def _parse_onoff(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ConfigurationError(f"expected on/off, got {value!r}")


def _regime_config_from(cfg: dict, n_modalities: int, seed: int) -> regimes.RegimeConfig:
    regime = regimes.Regime(str(_require(cfg, "regime", "train")))
    encoder = EncoderConfig(
        style=EncoderStyle(str(cfg.get("encoder_style", EncoderStyle.SHARED_TSTAR.value))),
        base_channels=int(cfg.get("base_channels", 4)),
        latent_dim=int(cfg.get("latent_dim", 16)),
        depth=int(cfg.get("depth", 3)),
    )
    mask = cfg.get("student_mask")
    rc = regimes.RegimeConfig(
        regime=regime,
        anchor=_anchor_from_config(cfg, n_modalities),
        alpha=float(cfg.get("alpha", 0.125)),
        encoder=encoder,
        epochs=int(cfg.get("epochs", 10)),
        batch_size=int(cfg.get("batch_size", 8)),
        learning_rate=float(cfg.get("learning_rate", 0.05)),
        seed=int(seed),
        student_mask=_parse_mask(mask, n_modalities) if mask is not None else None,
        medmap_enabled=_parse_onoff(cfg.get("medmap", "on")),
        normal_mode=str(cfg.get("normal_mode", "literal")),
    )
    rc.validate(n_modalities)
    return rc


def _select_split(samples, split: str):
    if split == "all":
        return samples
    parts = dataio.split_samples(samples)
    if split not in parts:
        raise ConfigurationError(f"unknown split {split!r}")
    return parts[split]


def _load_teacher(path):
    if not Path(path).exists():
        raise ConfigurationError(f"teacher checkpoint not found: {path}")
    model, _header = build_model_from_checkpoint(path)
    return model


def run_training(cfg: dict, data_dir: str, out_dir: str, seed: int) -> int:
    """One seeded training run into one directory. Returns the exit code."""
    data_path = Path(data_dir)
    samples = dataio.load_dataset(data_path)
    if not samples:
        raise ConfigurationError(f"dataset at {data_dir} is empty")
    n_modalities = samples[0].n_modalities
    split = str(cfg.get("split", "train"))
    train_samples = _select_split(samples, split)
    rc = _regime_config_from(cfg, n_modalities, seed)

    kwargs = {}
    if rc.regime in (regimes.Regime.KD, regimes.Regime.DA):
        teacher_path = _require(cfg, "teacher", "train")
        model = _load_teacher(teacher_path)
        kwargs["teacher" if rc.regime is regimes.Regime.KD else "reference"] = model

    result = regimes.train(train_samples, rc, **kwargs)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(cfg)
    echo.update({"seed": int(seed), "data": str(data_dir), "out": str(out_dir), "split": split})
    echo["resolved_regime_config"] = rc.to_dict()
    _write_json(out / "config.json", echo)

    save_checkpoint(out / "checkpoint.mmckpt", result.model, rc.to_dict(), step=rc.epochs, seed=seed)
    metrics = result.metrics_dict()
    metrics["dataset_manifest_hash"] = dataio.dataset_manifest_hash(data_path)
    _write_json(out / "metrics.json", metrics)

    if result.diverged_at_epoch is not None:
        print(f"run diverged at epoch {result.diverged_at_epoch}; kept last finite checkpoint")
        return EXIT_RUNTIME
    print(f"trained {rc.regime.value} for {rc.epochs} epochs -> {out}")
    return EXIT_OK


def _run_training_entry(payload) -> int:
    cfg, data_dir, out_dir, seed = payload
    return run_training(cfg, data_dir, out_dir, seed)


def cmd_train(args) -> int:
    cfg = _merge_config(
        args,
        ["regime", "medmap", "anchor", "anchor_k", "anchor_prior", "alpha", "epochs",
         "batch_size", "learning_rate", "normal_mode", "encoder_style", "base_channels",
         "latent_dim", "depth", "student_mask", "teacher", "split", "seed", "seeds",
         "out", "data"],
    )
    data_dir = _require(cfg, "data", "train")
    out_dir = _require(cfg, "out", "train")
    if cfg.get("seed") is None and cfg.get("seeds") is None:
        raise ConfigurationError("train: an explicit --seed (or --seeds) is required")
    if cfg.get("seed") is not None and cfg.get("seeds") is not None:
        raise ConfigurationError("train: pass either --seed or --seeds, not both")

    if cfg.get("seed") is not None:
        return run_training(cfg, data_dir, out_dir, int(cfg["seed"]))

    seeds = cfg["seeds"]
    if isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",") if s.strip()]
    else:
        seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigurationError("train: --seeds is empty")
    jobs = [(cfg, data_dir, str(Path(out_dir) / f"seed{s}"), s) for s in seeds]
    workers = int(os.environ.get("MEDMAP_NUM_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as pool:
            codes = list(pool.map(_run_training_entry, jobs))
    else:
        codes = [_run_training_entry(job) for job in jobs]
    return max(codes)


# ----------------------------------------------------------------------
# eval / gap
# ----------------------------------------------------------------------

def _load_checkpoint_model(path):
    if not Path(path).exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return build_model_from_checkpoint(path)


def cmd_eval(args) -> int:
    model, header = _load_checkpoint_model(args.checkpoint)
    samples = dataio.load_dataset(args.data)
    subset = _select_split(samples, args.split)
    if not subset:
        raise ConfigurationError(f"split {args.split!r} of {args.data} is empty")
    table = evalrep.evaluate_all_scenarios(model, subset, batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalrep.write_dice_csv(table, out / "dice.csv")
    payload = {
        "dice_table": table.to_dict(),
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "n_samples": len(subset),
        "dataset_manifest_hash": dataio.dataset_manifest_hash(args.data),
    }
    _write_json(out / "dice.json", payload)
    print(f"evaluated {len(table.masks)} scenarios on {len(subset)} samples -> {out}")
    print(f"grand_average={table.grand_average:.4f}")
    return EXIT_OK


def cmd_gap(args) -> int:
    import torch

    model, header = _load_checkpoint_model(args.checkpoint)
    samples = dataio.load_dataset(args.data)
    subset = _select_split(samples, args.split)[: args.batch]
    if len(subset) < 2:
        raise ConfigurationError("gap: need at least 2 samples")
    from .nets import samples_to_tensors

    images, _ = samples_to_tensors(subset)
    anchor_dict = (header.get("config") or {}).get("anchor")
    if anchor_dict:
        anchor = AnchorSpec.from_dict(anchor_dict)
    else:
        anchor = AnchorSpec(AnchorVariant.NORMAL)
    with torch.no_grad():
        _, latents = model.encode(images, ScenarioMask.full(model.n_modalities))
    report = estimate_gap(latents, anchor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_json_dict()
    payload["mean_offdiag_kl"] = report.mean_offdiag_kl()
    payload["checkpoint"] = str(args.checkpoint)
    _write_json(out / "gap.json", payload)
    print(f"mean_offdiag_kl={payload['mean_offdiag_kl']:.6f} -> {out / 'gap.json'}")
    return EXIT_OK


# ----------------------------------------------------------------------
# theory
# ----------------------------------------------------------------------

def cmd_theory(args) -> int:
    sigmas = [float(s) for s in str(args.sigmas).split(",") if s.strip()]
    if not sigmas:
        raise ConfigurationError("theory: empty sigma grid")
    report = theory.probe_report(
        sigmas,
        n_instances=args.instances,
        seed=args.seed,
        y_size=args.y_size,
        z_size=args.z_size,
        n_coords=args.coords,
        elbo_instances=args.elbo_instances,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    print(
        f"theory probe: {len(sigmas)} sigmas x {args.instances} instances, "
        f"{report['counterexample_count']} counterexamples -> {out}"
    )
    return EXIT_OK


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

def _load_run_record(run_dir: Path) -> evalrep.RunRecord:
    config_path = run_dir / "config.json"
    dice_path = run_dir / "dice.json"
    if not config_path.exists():
        raise ConfigurationError(f"{run_dir}: missing config.json (not a run directory?)")
    if not dice_path.exists():
        raise ConfigurationError(f"{run_dir}: missing dice.json (run `medmap eval` into it first)")
    config = json.loads(config_path.read_text())
    dice_payload = json.loads(dice_path.read_text())
    metrics = None
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
    dataset_hash = dice_payload.get("dataset_manifest_hash")
    if dataset_hash is None and metrics:
        dataset_hash = metrics.get("dataset_manifest_hash")
    pair_config = config.get("resolved_regime_config", config)
    return evalrep.RunRecord(
        name=run_dir.name,
        config=pair_config,
        dice_table=evalrep.DiceTable.from_dict(dice_payload["dice_table"]),
        metrics=metrics,
        dataset_hash=dataset_hash,
    )


def cmd_report(args) -> int:
    records = [_load_run_record(Path(d)) for d in args.run_dirs]
    summary = evalrep.render_report(records, args.out)
    print(f"report bundle with {len(summary['files'])} files -> {args.out}")
    print(f"pairs_with_delta={len(summary['pairs'])}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medmap",
        description="Anchored latent alignment for missing-modality segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="config file (key=value lines or JSON)")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--seed", type=int, help="generation seed (required)")
    p.add_argument("--n-modalities", dest="n_modalities", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--gap-strength", dest="gap_strength", type=float)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--contrast-profile", dest="contrast_profile", help="JSON matrix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one regime into a run directory")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--out", help="run directory")
    p.add_argument("--regime", choices=[r.value for r in regimes.Regime])
    p.add_argument("--medmap", choices=["on", "off"], help="enable the alignment term")
    p.add_argument("--anchor", choices=[v.value for v in AnchorVariant])
    p.add_argument("--anchor-k", dest="anchor_k", type=int, help="modality index for the fixed anchor")
    p.add_argument("--anchor-prior", dest="anchor_prior", type=int,
                   help="modality index given near-unit initial weight (adaptive anchor)")
    p.add_argument("--alpha", type=float, help="alignment weight (default 0.125)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--normal-mode", dest="normal_mode", choices=["literal", "standard_kl"])
    p.add_argument("--encoder-style", dest="encoder_style",
                   choices=[s.value for s in EncoderStyle])
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--student-mask", dest="student_mask",
                   help="comma-separated modality names (KD/DA)")
    p.add_argument("--teacher", help="teacher/reference checkpoint (KD/DA)")
    p.add_argument("--split", choices=["train", "val", "test", "all"])
    p.add_argument("--seed", type=int, help="run seed (required unless --seeds)")
    p.add_argument("--seeds", help="comma-separated seeds; runs into out/seed<k>/")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice over all missing-modality scenarios")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gap", help="modality-gap report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--batch", type=int, default=64, help="number of samples to encode")
    p.set_defaults(func=cmd_gap)

    p = sub.add_parser("theory", help="discrete alignment-bound and ELBO probe")
    p.add_argument("--sigmas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--instances", type=int, default=200, help="bound checks per sigma")
    p.add_argument("--elbo-instances", dest="elbo_instances", type=int, default=500)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--y-size", dest="y_size", type=int, default=2)
    p.add_argument("--z-size", dest="z_size", type=int, default=2)
    p.add_argument("--coords", type=int, default=2)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("report", help="render CSV/JSON/figure bundle from run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError, FormatError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MedmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line front end: ``jointmri train | eval | compare``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from jointmri import data, pipeline, report, sampler
from jointmri.errors import ConfigError, ContractError, DataError, DimensionError, NumericalError

log = logging.getLogger("jointmri")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "JOINTMRI_OUT"

# Fixed class colours for segmentation PNGs (index = class label).
CLASS_COLORS = np.array(
    [
        [0, 0, 0],        # 0 background
        [230, 25, 75],    # 1 red
        [60, 180, 75],    # 2 green
        [255, 225, 25],   # 3 yellow
        [0, 130, 200],    # 4 blue
        [245, 130, 48],   # 5 orange
        [145, 30, 180],   # 6 purple
        [70, 240, 240],   # 7 cyan
    ],
    dtype=np.uint8,
)

# keys accepted in config files besides TrainConfig fields
DATA_KEYS = {
    "preset": str,
    "data": str,
    "test_subjects": str,
    "phantom_subjects": int,
    "phantom_slices": int,
    "phantom_seed": int,
}

METHODS = {
    "semunet": dict(mode="semunet", mask="learned"),
    "loupe": dict(mode="loupe", mask="learned", lam=0.0),
    "loupe-seg": dict(mode="loupe-seg", mask="learned", lam=0.0),
    "baseline-random": dict(mode="baseline-fixed", mask="random"),
    "baseline-radial": dict(mode="baseline-fixed", mask="radial"),
}


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config files


def _coerce(key: str, value: str):
    if key in DATA_KEYS:
        return DATA_KEYS[key](value)
    ftypes = {f.name: f.type for f in fields(pipeline.TrainConfig)}
    if key not in ftypes:
        raise UsageError(f"unknown config key {key!r}")
    t = str(ftypes[key])
    try:
        if value.lower() == "none" and "None" in t:
            return None
        if t.startswith("int"):
            return int(value)
        if t.startswith("float"):
            return float(value)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def write_config(settings: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(settings.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_settings(config_path, overrides: dict) -> tuple[pipeline.TrainConfig, dict]:
    """Preset < config file < command-line overrides."""
    file_settings = read_config(config_path) if config_path else {}
    merged = {**file_settings, **{k: v for k, v in overrides.items() if v is not None}}
    preset_name = merged.pop("preset", "desk")
    data_settings = {k: merged.pop(k) for k in list(merged) if k in DATA_KEYS}
    data_settings.setdefault("data", "phantom")
    base = dict(pipeline.PRESETS.get(preset_name) or {})
    if preset_name not in pipeline.PRESETS:
        raise UsageError(f"unknown preset {preset_name!r}")
    mode = merged.get("mode", "semunet")
    if mode in ("loupe", "loupe-seg"):
        if merged.get("lam") not in (None, 0, 0.0):
            raise UsageError(f"lambda is fixed to 0 in {mode} mode; drop --lambda")
        merged["lam"] = 0.0
    if mode == "baseline-fixed":
        merged.setdefault("mask", "random")
    cfg = pipeline.TrainConfig(**{**base, **merged})
    data_settings["preset"] = preset_name
    return cfg, data_settings


# ---------------------------------------------------------------------------
# data


def load_data(cfg: pipeline.TrainConfig, settings: dict) -> data.DatasetSplit:
    source = settings.get("data", "phantom")
    if source == "phantom":
        n_subj = settings.get("phantom_subjects", 5)
        per = settings.get("phantom_slices", 100)
        slices = data.phantom_dataset(
            n_subj, per, cfg.image_size, cfg.image_size, cfg.class_count,
            seed=settings.get("phantom_seed", 1000),
        )
        # last subject held out, the rest train
        last = f"subj{n_subj:02d}"
        return data.DatasetSplit(
            [s for s in slices if s.subject_id != last],
            [s for s in slices if s.subject_id == last],
            cfg.class_count,
        )
    manifest = Path(source)
    tests = settings.get("test_subjects")
    return data.ingest_slices(
        manifest.parent, manifest, cfg.class_count, (cfg.image_size, cfg.image_size),
        test_subjects=tests.split(",") if tests else None,
    )


# ---------------------------------------------------------------------------
# outputs


def write_train_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "recon", "seg", "total", "mask_mean"])
        for row in history:
            w.writerow([row["epoch"], row["stage"]] +
                       [f"{row[k]:.10g}" for k in ("recon", "seg", "total", "mask_mean")])


def _to_png(array: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(array).save(path, optimize=False)


def colorize(labels: np.ndarray) -> np.ndarray:
    return CLASS_COLORS[np.asarray(labels) % len(CLASS_COLORS)]


def _commit_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_provenance(path, cfg: pipeline.TrainConfig, runtime: float, **extra) -> None:
    lines = [f"config_hash {pipeline.config_hash(cfg)}", f"commit {_commit_id()}",
             f"runtime_s {runtime:.1f}"] + [f"{k} {v}" for k, v in extra.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def reference_mode() -> None:
    """Single-threaded deterministic kernels, denormals flushed to zero.

    Small nets drift into subnormal activations and Adam moments, which can
    make CPU steps several times slower without changing the results.
    """
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.set_flush_denormal(True)


# ---------------------------------------------------------------------------
# commands


def train_run(cfg: pipeline.TrainConfig, settings: dict, out: Path) -> pipeline.PipelineState:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    split = load_data(cfg, settings)
    train_slices, val_slices = data.carve_validation(
        split.train, cfg.val_fraction, pipeline.derive_seed(cfg.seed, "val")
    )
    state = pipeline.train(cfg, train_slices)
    state.meta = {"data": settings}
    pipeline.save_state(state, out / "checkpoint.pt")
    write_train_log(state.history, out / "train_log.csv")
    sampler.export_mask(state.binary_mask, out / "mask.pgm")
    write_config({**cfg.to_dict(), **settings}, out / "config.txt")
    val_psnr = pipeline.validation_psnr(state, val_slices)
    write_provenance(out / "run_info.txt", cfg, time.time() - t0,
                     val_psnr=f"{val_psnr:.4f}", train_slices=len(train_slices),
                     val_slices=len(val_slices))
    return state


def cmd_train(args) -> int:
    overrides = {
        "mode": args.mode, "mask": args.mask, "rate": args.rate, "lam": args.lam,
        "joint_epochs": args.epochs_joint, "finetune_epochs": args.epochs_finetune,
        "seed": args.seed, "data": args.data, "preset": args.preset,
    }
    cfg, settings = resolve_settings(args.config, overrides)
    out = Path(args.out or Path(os.environ.get(OUT_ENV, "runs")) / f"{cfg.method_name}_r{cfg.rate:.2f}_s{cfg.seed}")
    state = train_run(cfg, settings, out)
    print(f"trained {cfg.method_name} rate={cfg.rate} seed={cfg.seed}: mask ones={state.binary_mask.ones_count} -> {out}")
    return EXIT_OK


def eval_run(checkpoint, out: Path, data_source=None, bypass=False, images=True) -> report.MetricsReport:
    t0 = time.time()
    state = pipeline.load_state(checkpoint)
    settings = dict(getattr(state, "meta", {}).get("data", {"data": "phantom"}))
    if data_source:
        settings["data"] = data_source
    split = load_data(state.config, settings)
    rep = pipeline.evaluate(state, split.test, bypass=bypass)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "metrics.csv")
    if images:
        recon_dir, seg_dir = out / "recon", out / "seg"
        recon_dir.mkdir(exist_ok=True)
        seg_dir.mkdir(exist_ok=True)
        imgs, _ = pipeline.stack_batch(split.test)
        recons, preds = pipeline.predict(state, imgs, bypass=bypass)
        for sl, r, p in zip(split.test, recons.numpy(), preds.numpy()):
            stem = f"{sl.subject_id}_{sl.slice_index:04d}"
            _to_png(np.round(np.clip(r, 0, 1) * 255).astype(np.uint8), recon_dir / f"{stem}.png")
            _to_png(colorize(p), seg_dir / f"{stem}.png")
    write_provenance(out / "eval_info.txt", state.config, time.time() - t0, checkpoint=checkpoint)
    return rep


def cmd_eval(args) -> int:
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    rep = eval_run(args.checkpoint, out, args.data, args.bypass, not args.no_images)
    s = rep.summary()
    print(f"{rep.method} rate={rep.rate}: PSNR {s['psnr']:.2f} dB  SSIM {s['ssim']:.2f}%  DSC {s['dsc']:.2f}% -> {out / 'metrics.csv'}")
    return EXIT_OK


def read_manifest(path) -> dict:
    """Experiment manifest: ``methods``, ``rates``, ``seeds``, ``out`` and optional ``config``."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    m = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        m[k] = v
    unknown = set(m) - {"methods", "rates", "seeds", "out", "config"}
    if unknown:
        raise UsageError(f"{path}: unknown manifest keys {sorted(unknown)}")
    methods = m.get("methods", "").split()
    for meth in methods:
        if meth not in METHODS:
            raise UsageError(f"{path}: unknown method {meth!r}; expected one of {sorted(METHODS)}")
    try:
        rates = [float(r) for r in m.get("rates", "").split()]
        seeds = [int(s) for s in m.get("seeds", "0").split()]
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not methods or not rates:
        raise UsageError(f"{path}: methods and rates are required")
    base = path.parent
    out = Path(m["out"]) if "out" in m else Path(os.environ.get(OUT_ENV, "runs"))
    config = m.get("config")
    return {
        "methods": methods, "rates": rates, "seeds": seeds,
        "out": out if out.is_absolute() else base / out,
        "config": None if config is None else (Path(config) if Path(config).is_absolute() else base / config),
    }


def run_dir(out: Path, method: str, rate: float, seed: int) -> Path:
    return out / "runs" / f"{method}_r{rate:.2f}_s{seed}"


def cmd_compare(args) -> int:
    man = read_manifest(args.manifest)
    out = man["out"]
    tuples = [(m, r, s) for m in man["methods"] for r in man["rates"] for s in man["seeds"]]
    missing = [t for t in tuples if not (run_dir(out, *t) / "checkpoint.pt").exists()]
    if missing and not args.train_missing:
        listing = ", ".join(f"{m}@{r:.2f}/seed{s}" for m, r, s in missing)
        raise DataError(f"missing checkpoints for: {listing}")
    for m, r, s in missing:
        cfg, settings = resolve_settings(man["config"], {**METHODS[m], "rate": r, "seed": s})
        log.info("training %s rate %.2f seed %d", m, r, s)
        train_run(cfg, settings, run_dir(out, m, r, s))

    results = []
    for m, r, s in tuples:
        rd = run_dir(out, m, r, s)
        rep = eval_run(rd / "checkpoint.pt", rd / "eval", images=False)
        results.append({"method": m, "rate": r, "seed": s, **rep.summary()})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "rate", "seed", "psnr", "ssim", "dsc"])
        for row in results:
            w.writerow([row["method"], f"{row['rate']:.4f}", row["seed"]] +
                       [f"{row[k]:.6f}" for k in ("psnr", "ssim", "dsc")])
    table = report.comparison_table(results, man["methods"], man["rates"])
    report.write_comparison_csv(table, out / "comparison.csv")
    write_gallery(man, out)
    print(f"{len(table)} rows -> {out / 'comparison.csv'}")
    return EXIT_OK


def write_gallery(man: dict, out: Path) -> Path:
    """Per rate: fixed radial, fixed random and each method's mask (first seed)."""
    gdir = out / "gallery"
    gdir.mkdir(parents=True, exist_ok=True)
    seed = man["seeds"][0]
    grid_rows = []
    for rate in man["rates"]:
        tiles = []
        masks = []
        first = pipeline.load_state(run_dir(out, man["methods"][0], rate, seed) / "checkpoint.pt")
        H = first.config.image_size
        for kind in ("radial", "random"):
            masks.append((f"fixed-{kind}", sampler.fixed_mask(kind, H, H, rate, seed)))
        for m in man["methods"]:
            st = pipeline.load_state(run_dir(out, m, rate, seed) / "checkpoint.pt")
            masks.append((m, st.binary_mask))
        for name, mask in masks:
            path = gdir / f"{name}_r{rate:.2f}.pgm"
            sampler.export_mask(mask, path)
            tiles.append(np.pad(mask.pattern * 255, 1, constant_values=128))
        grid_rows.append(np.concatenate(tiles, axis=1))
    width = max(r.shape[1] for r in grid_rows)
    grid = np.concatenate([np.pad(r, ((0, 0), (0, width - r.shape[1])), constant_values=128) for r in grid_rows])
    path = gdir / "gallery.png"
    _to_png(grid.astype(np.uint8), path)
    return path


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="jointmri",
        description="Learned k-space sampling trained jointly with reconstruction and segmentation.",
        epilog="exit codes: 0 ok, 2 usage, 3 data, 4 numerical",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one pipeline and export checkpoint, log and mask")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    t.add_argument("--mode", choices=pipeline.MODES)
    t.add_argument("--mask", choices=pipeline.MASK_KINDS)
    t.add_argument("--rate", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--epochs-joint", type=int)
    t.add_argument("--epochs-finetune", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="'phantom' or a manifest path")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<method>_r<rate>_s<seed>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a test-ready checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="override the data source stored in the checkpoint")
    e.add_argument("--out")
    e.add_argument("--bypass", action="store_true", help="feed ground truth to the segmenter")
    e.add_argument("--no-images", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="method x rate table and mask gallery from a manifest")
    c.add_argument("manifest")
    c.add_argument("--train-missing", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    reference_mode()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

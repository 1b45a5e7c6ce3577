"""Command-line interface: synthesis, preprocessing, training, reporting.

One strict flat configuration (unknown keys fatal) backs every subcommand;
flags override config-file values, which override defaults. The HADG_SEED
environment variable replaces the default seed only; explicit settings win.
Each run directory receives a resolved-config.json echo sufficient to replay
the run.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .evaluate import FoldReport, export_embeddings, predict_slides, render_report, slide_accuracy
from .figures import embeddings_figure, report_figure
from .model import ModelConfig, load_checkpoint
from .preprocess import load_manifest, load_patches, preprocess_corpus
from .synthgen import SynthConfig, generate_corpus
from .trainer import TrainConfig, run_fold, subset_patches


class ConfigError(ValueError):
    """Usage-class configuration problem; maps to exit status 2."""


def default_seed() -> int:
    raw = os.environ.get("HADG_SEED", "")
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"HADG_SEED must be an integer, got {raw!r}") from None


def default_config() -> dict:
    """Every RunConfig field with its default; path fields default empty."""
    synth = SynthConfig()
    train = TrainConfig()
    cfg = {
        "name": "run",
        "out_root": "runs",
        "manifest": "",
        "corpus": "",
        "out": "",
        "checkpoint": "",
        "hospitals": synth.hospitals,
        "classes": synth.classes,
        "slides_per_cell": synth.slides_per_cell,
        "size": synth.size,
        "patch_analog": synth.patch_analog,
        "patch_size": 64,
        "max_background": 0.5,
        "cell_cap": 512,
        "hold_out": "all",
        "holdout_split": "all",
        "split": "",
        "pca_k": 20,
        "jobs": 1,
    }
    cfg.update(train.to_dict())
    cfg["seed"] = default_seed()
    return cfg


def _coerce(key: str, value, default):
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
    return value


def parse_config(path=None, overrides=None) -> dict:
    """Resolved RunConfig: defaults, then config file, then flag overrides."""
    cfg = default_config()
    layers = []
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        layers.append(loaded)
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, default_config()[key])
    return cfg


def write_echo(cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved-config.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _require(cfg: dict, key: str, subcommand: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"{subcommand} needs --{key.replace('_', '-')} (or config key {key!r})")
    return cfg[key]


def _model_config(data: dict) -> ModelConfig:
    return ModelConfig(
        input_shape=tuple(data["x"].shape[1:]),
        class_count=int(data["y"].max()) + 1,
    )


def _load_data(cfg: dict, subcommand: str):
    manifest = Path(_require(cfg, "manifest", subcommand))
    records = load_manifest(manifest)
    data = load_patches(records, manifest.parent)
    return records, data


def cmd_synth(cfg: dict) -> int:
    out = Path(_require(cfg, "out", "synth"))
    synth = SynthConfig(
        hospitals=cfg["hospitals"],
        classes=cfg["classes"],
        slides_per_cell=cfg["slides_per_cell"],
        size=cfg["size"],
        patch_analog=cfg["patch_analog"],
        seed=cfg["seed"],
    )
    generate_corpus(synth, out)
    write_echo(cfg, out)
    print(f"corpus: {out} ({synth.hospitals * synth.classes * synth.slides_per_cell} slides)")
    return 0


def cmd_preprocess(cfg: dict) -> int:
    corpus = Path(_require(cfg, "corpus", "preprocess"))
    out = Path(_require(cfg, "out", "preprocess"))
    manifest = preprocess_corpus(
        corpus,
        out,
        patch_size=cfg["patch_size"],
        max_background=cfg["max_background"],
        seed=cfg["seed"],
        cell_cap=cfg["cell_cap"],
    )
    write_echo(cfg, out)
    print(f"manifest: {manifest}")
    return 0


def _train_one_fold(cfg, records, data, model_config, held_out, regimes, run_root):
    lines = []
    for regime in regimes:
        resolved = {**cfg, "regime": regime, "hold_out": held_out}
        tcfg = TrainConfig.from_dict(
            {k: resolved[k] for k in TrainConfig().to_dict()}
        )
        report = run_fold(
            records,
            data,
            held_out,
            tcfg,
            model_config=model_config,
            run_root=run_root,
            holdout_split=cfg["holdout_split"],
        )
        fold_dir = run_root / held_out / regime
        write_echo(resolved, fold_dir)
        with open(fold_dir / "fold-report.json", "w", encoding="utf-8") as f:
            json.dump(
                {
                    "hospital": report.hospital,
                    "regime": report.regime,
                    "slide_count": report.slide_count,
                    "accuracy": report.accuracy,
                },
                f,
            )
            f.write("\n")
        lines.append(
            f"{report.hospital} {report.regime} accuracy {report.accuracy:.2f} "
            f"({report.slide_count} slides)"
        )
    return lines


def cmd_train(cfg: dict) -> int:
    records, data = _load_data(cfg, "train")
    hospitals = sorted({r.hospital for r in records})
    if cfg["hold_out"] == "all":
        folds = hospitals
    elif cfg["hold_out"] in hospitals:
        folds = [cfg["hold_out"]]
    else:
        raise ConfigError(f"--hold-out {cfg['hold_out']!r} not in manifest (have {hospitals})")
    regimes = ("masf", "baseline") if cfg["regime"] == "both" else (cfg["regime"],)
    model_config = _model_config(data)
    run_root = Path(cfg["out_root"]) / cfg["name"]

    def one(held_out):
        return _train_one_fold(cfg, records, data, model_config, held_out, regimes, run_root)

    if cfg["jobs"] > 1 and len(folds) > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(one, folds))
    else:
        results = [one(h) for h in folds]
    for lines in results:
        for line in lines:
            print(line)
    return 0


def cmd_eval(cfg: dict) -> int:
    records, data = _load_data(cfg, "eval")
    checkpoint = _require(cfg, "checkpoint", "eval")
    hold_out = cfg["hold_out"]
    if hold_out == "all":
        raise ConfigError("eval needs --hold-out naming one hospital")
    mask = data["hospital"] == hold_out
    if cfg["holdout_split"] == "test":
        mask &= data["split"] == "test"
    elif cfg["holdout_split"] != "all":
        raise ConfigError(f"holdout_split must be 'all' or 'test', got {cfg['holdout_split']!r}")
    subset = subset_patches(data, mask)
    if subset["x"].shape[0] == 0:
        raise ConfigError(f"no patches for hospital {hold_out!r} in the chosen split")
    params = load_checkpoint(checkpoint, _model_config(data))
    preds = predict_slides(params, subset)
    acc = slide_accuracy(preds)
    print(f"{hold_out} {cfg['regime']} accuracy {acc:.2f} ({len(preds)} slides)")
    return 0


def cmd_embed(cfg: dict) -> int:
    records, data = _load_data(cfg, "embed")
    checkpoint = _require(cfg, "checkpoint", "embed")
    out = Path(_require(cfg, "out", "embed"))
    mask = np.ones(data["x"].shape[0], dtype=bool)
    if cfg["hold_out"] != "all":
        mask &= data["hospital"] == cfg["hold_out"]
    if cfg["split"]:
        mask &= data["split"] == cfg["split"]
    subset = subset_patches(data, mask)
    if subset["x"].shape[0] == 0:
        raise ConfigError("embedding subset is empty; relax --hold-out/--split")
    params = load_checkpoint(checkpoint, _model_config(data))
    out.mkdir(parents=True, exist_ok=True)
    csv_path = export_embeddings(params, subset, out / "embeddings.csv", k=cfg["pca_k"])
    print(f"embeddings: {csv_path}")
    if cfg["pca_k"] >= 2:
        png = embeddings_figure(csv_path, out / "embeddings.png")
        print(f"figure: {png}")
    write_echo(cfg, out)
    return 0


def cmd_report(cfg: dict) -> int:
    run_root = Path(cfg["out_root"]) / cfg["name"]
    out = Path(cfg["out"]) if cfg["out"] else run_root
    found = sorted(run_root.glob("*/*/fold-report.json"))
    if not found:
        raise ConfigError(f"no fold-report.json under {run_root}")
    reports = []
    for path in found:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        reports.append(FoldReport(d["hospital"], d["regime"], d["slide_count"], d["accuracy"]))
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = render_report(reports, out / "report.csv", out / "report.txt")
    png_path = report_figure(reports, out / "report.png")
    print((Path(txt_path)).read_text(), end="")
    print(f"report: {csv_path} {txt_path} {png_path}")
    return 0


_FLAG_TYPES = {
    "name": str,
    "out_root": str,
    "manifest": str,
    "corpus": str,
    "out": str,
    "checkpoint": str,
    "hospitals": int,
    "classes": int,
    "slides_per_cell": int,
    "size": int,
    "patch_analog": int,
    "patch_size": int,
    "max_background": float,
    "cell_cap": int,
    "alpha_inner": float,
    "eta": float,
    "gamma": float,
    "beta1": float,
    "beta2": float,
    "tau": float,
    "margin": float,
    "clip_threshold": float,
    "batch_per_class": int,
    "max_iterations": int,
    "eval_every": int,
    "regime": str,
    "hold_out": str,
    "holdout_split": str,
    "split": str,
    "pca_k": int,
    "jobs": int,
    "seed": int,
}

_SUBCOMMAND_FLAGS = {
    "synth": ("out", "hospitals", "classes", "slides_per_cell", "size", "patch_analog", "seed"),
    "preprocess": ("corpus", "out", "patch_size", "max_background", "cell_cap", "seed"),
    "train": (
        "manifest",
        "name",
        "out_root",
        "regime",
        "hold_out",
        "holdout_split",
        "alpha_inner",
        "eta",
        "gamma",
        "beta1",
        "beta2",
        "tau",
        "margin",
        "clip_threshold",
        "batch_per_class",
        "max_iterations",
        "eval_every",
        "jobs",
        "seed",
    ),
    "eval": ("manifest", "checkpoint", "hold_out", "holdout_split", "regime", "seed"),
    "embed": ("manifest", "checkpoint", "out", "pca_k", "hold_out", "split", "seed"),
    "report": ("name", "out_root", "out"),
}

_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hadg", description="hospital-agnostic training pipeline"
    )
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, keys in _SUBCOMMAND_FLAGS.items():
        sub = subs.add_parser(name)
        sub.add_argument("--config", default=None, help="JSON config file")
        for key in keys:
            sub.add_argument(
                "--" + key.replace("_", "-"), dest=key, type=_FLAG_TYPES[key], default=None
            )
        sub.set_defaults(keys=keys)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in args.keys if getattr(args, k) is not None}
    try:
        cfg = parse_config(args.config, overrides)
        return _HANDLERS[args.subcommand](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

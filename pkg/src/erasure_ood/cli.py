"""Command-line entry point.

Usage::

    erasure-ood <command> [--config run.cfg] [--set key=value ...] [--out DIR]

Configuration is plain ``key = value`` lines; ``#`` starts a comment.  Keys
given with ``--set`` override the file.  Unknown keys are rejected.  Every
output goes under ``--out`` with a fixed file name.

Exit codes: 0 success, 2 configuration or input error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, datasets, detector, entropy, uen
from .errors import FormatError

log = logging.getLogger("erasure_ood")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ConfigError(ValueError):
    pass


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_tuple(text: str):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    doc: str


KEYS: dict[str, Key] = {
    # data
    "dataset": Key("", str, "dataset URI for train/score/entropy/heatmap/features/synth"),
    "checkpoint": Key("", str, "UENC checkpoint to load (default: <out>/checkpoint.uenc)"),
    "strategy": Key("center", str, "erasing strategy: center, corner[:i|*], side[:i|*]"),
    # network and training
    "k_mixture": Key(10, int, "mixture components per pixel"),
    "lam": Key(0.8, float, "weight of the reconstruction loss"),
    "lr": Key(1e-5, float, "Adam learning rate"),
    "batch_size": Key(64, int, "training and scoring batch size"),
    "epochs": Key(30, int, "maximum training epochs"),
    "seed": Key(0, int, "seed for initialization, shuffling, masks and grouping"),
    "branch_widths": Key((32, 64, 32, 16), _int_tuple, "channel widths of the four branch convolutions"),
    "branch_kernels": Key((3, 5, 7), _int_tuple, "kernel size of each encoder branch"),
    "decoder_width": Key(32, int, "hidden width of the decoder"),
    "patience": Key(5, int, "early-stopping window in epochs (0 disables)"),
    "min_rel_improvement": Key(1e-3, float, "relative loss improvement required within the window"),
    "beta1": Key(0.9, float, "Adam beta1"),
    "beta2": Key(0.999, float, "Adam beta2"),
    "adam_eps": Key(1e-8, float, "Adam epsilon"),
    # entropy oracle
    "bins": Key(32, int, "histogram bins of the entropy oracle"),
    "alpha": Key(1.0, float, "Laplace smoothing of the entropy oracle"),
    # detection
    "group_size": Key(10, int, "samples per test group"),
    "threshold": Key(None, _opt_float, "KL threshold for group decisions (empty: no decisions)"),
    "trials": Key(5, int, "grouping trials per test-set draw"),
    "testset_draws": Key(2, int, "independent test-set draws"),
    "id_scores": Key("", str, "CSV of in-distribution reference scores"),
    "test_id_scores": Key("", str, "CSV of held-out in-distribution scores"),
    "test_ood_scores": Key("", str, "CSV of OOD scores"),
    "id_dataset": Key("", str, "dataset URI scored when id_scores is empty"),
    "test_id_dataset": Key("", str, "dataset URI scored when test_id_scores is empty"),
    "test_ood_dataset": Key("", str, "dataset URI scored when test_ood_scores is empty"),
}

_UEN_KEYS = ("k_mixture", "lam", "lr", "batch_size", "epochs", "seed", "branch_widths", "branch_kernels",
             "decoder_width", "strategy", "patience", "min_rel_improvement", "beta1", "beta2", "adam_eps")


def default_config() -> dict:
    return {k: v.default for k, v in KEYS.items()}


def parse_assignment(line: str, where: str) -> tuple[str, object]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected key = value, got {line!r}")
    key, _, raw = line.partition("=")
    key, raw = key.strip(), raw.strip()
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return key, KEYS[key].parse(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {raw!r} ({e})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    cfg = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            key, value = parse_assignment(line, f"{source}:{i}")
            cfg[key] = value
    return cfg


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg.update(parse_config_text(text, path))
    for item in overrides:
        key, value = parse_assignment(item, "--set")
        cfg[key] = value
    return cfg


def uen_config(cfg: dict) -> uen.UenConfig:
    return uen.UenConfig(**{k: cfg[k] for k in _UEN_KEYS})


def detection_config(cfg: dict) -> detector.DetectionConfig:
    return detector.DetectionConfig(cfg["group_size"], cfg["threshold"], cfg["trials"], cfg["testset_draws"], cfg["seed"])


def entropy_config(cfg: dict) -> entropy.EntropyConfig:
    return entropy.EntropyConfig(cfg["bins"], cfg["alpha"])


def _dataset(uri: str, key: str = "dataset") -> datasets.ImageDataset:
    if not uri:
        raise ConfigError(f"{key} is not set")
    try:
        return datasets.load_dataset(uri)
    except FileNotFoundError as e:
        raise ConfigError(f"{key}: file not found: {e.filename}") from None


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "checkpoint.uenc"


def _load_weights(cfg: dict, out: Path) -> uen.UenWeights:
    path = _checkpoint_path(cfg, out)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return checkpoint.load_checkpoint(path)[0]


def write_scores(path: Path, scores: np.ndarray, column: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"index,{column}\n")
        for i, s in enumerate(scores):
            f.write(f"{i},{float(s)!r}\n")


def read_scores(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise ConfigError(f"score file not found: {path}") from None
    if not rows or len(rows[0]) < 2:
        raise ConfigError(f"{path}: expected an index,score CSV")
    try:
        return np.array([float(r[1]) for r in rows[1:]])
    except (ValueError, IndexError):
        raise ConfigError(f"{path}: malformed score row") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, out: Path, args) -> int:
    ucfg = uen_config(cfg)
    data = _dataset(cfg["dataset"])
    weights, history = uen.train(ucfg, data.images)
    meta = {"dataset": data.provenance, "epochs_run": len(history)}
    checkpoint.save_checkpoint(out / "checkpoint.uenc", weights, meta)
    with open(out / "loss.csv", "w") as f:
        f.write("epoch,L_total,L_r,L_e\n")
        for e in history:
            f.write(f"{e.epoch},{e.total!r},{e.recon!r},{e.gen!r}\n")
    log.info("wrote %s after %d epochs", out / "checkpoint.uenc", len(history))
    return EXIT_OK


def _scores_for(cfg: dict, out: Path, data: datasets.ImageDataset, oracle: bool, weights=None) -> np.ndarray:
    if oracle:
        return entropy.entropy_scores(data.images, cfg["strategy"], entropy_config(cfg))
    w = weights if weights is not None else _load_weights(cfg, out)
    return uen.score_dataset(w, data.images, cfg["strategy"], cfg["batch_size"])


def cmd_score(cfg: dict, out: Path, args) -> int:
    data = _dataset(cfg["dataset"])
    scores = _scores_for(cfg, out, data, args.oracle)
    write_scores(out / "scores.csv", scores, "entropy_bits" if args.oracle else "le_bits")
    return EXIT_OK


def cmd_entropy(cfg: dict, out: Path, args) -> int:
    data = _dataset(cfg["dataset"])
    write_scores(out / "scores.csv", entropy.entropy_scores(data.images, cfg["strategy"], entropy_config(cfg)),
                 "entropy_bits")
    return EXIT_OK


def cmd_detect(cfg: dict, out: Path, args) -> int:
    dcfg = detection_config(cfg)
    weights = None
    pools = []
    for key in ("id", "test_id", "test_ood"):
        if cfg[f"{key}_scores"]:
            pools.append(read_scores(cfg[f"{key}_scores"]))
            continue
        data = _dataset(cfg[f"{key}_dataset"], f"{key}_dataset (or {key}_scores)")
        if not args.oracle and weights is None:
            weights = _load_weights(cfg, out)
        pools.append(_scores_for(cfg, out, data, args.oracle, weights))
    report = detector.run_detection(*pools, dcfg)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(detector.format_report(report))
    (out / "report.json").write_text(report.to_json() + "\n")
    grid, dens = detector.kde_curve(detector.fit_kde(pools[0]))
    with open(out / "kde.csv", "w") as f:
        f.write("score,density\n")
        for g, d in zip(grid, dens):
            f.write(f"{g!r},{d!r}\n")
    sys.stdout.write(detector.format_report(report))
    return EXIT_OK


def cmd_heatmap(cfg: dict, out: Path, args) -> int:
    data = _dataset(cfg["dataset"])
    hm = uen.likelihood_heatmap(_load_weights(cfg, out), data.images, cfg["strategy"], cfg["batch_size"])
    datasets.write_imgb(out / "heatmap.imgb", hm[None, None].astype(np.float32))
    np.savetxt(out / "heatmap.csv", hm, delimiter=",", fmt="%.9g")
    return EXIT_OK


def cmd_features(cfg: dict, out: Path, args) -> int:
    data = _dataset(cfg["dataset"])
    feats = uen.export_features(_load_weights(cfg, out), data.images, cfg["strategy"], cfg["batch_size"])
    np.save(out / "features.npy", feats)
    return EXIT_OK


def cmd_synth(cfg: dict, out: Path, args) -> int:
    data = _dataset(cfg["dataset"])
    datasets.save_imgb(out / "dataset.imgb", data)
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train the network on `dataset`; writes checkpoint.uenc and loss.csv"),
    "score": (cmd_score, "per-image generation-loss scores of `dataset`; writes scores.csv"),
    "detect": (cmd_detect, "group detection on an ID reference and two test pools; writes report.*"),
    "entropy": (cmd_entropy, "entropy-oracle scores of `dataset`; writes scores.csv"),
    "heatmap": (cmd_heatmap, "mean per-pixel log2-likelihood map; writes heatmap.imgb and heatmap.csv"),
    "features": (cmd_features, "flattened mixture feature maps; writes features.npy"),
    "synth": (cmd_synth, "materialize a dataset URI; writes dataset.imgb"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:20s} {v.doc} (default: {v.default!r})" for k, v in KEYS.items())
    p = argparse.ArgumentParser(
        prog="erasure-ood",
        description="Erasure-based OOD detection: train, score, detect.",
        epilog="configuration keys:\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS), help="; ".join(f"{k}: {v[1]}" for k, v in COMMANDS.items()))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--oracle", action="store_true", help="score/detect with the entropy oracle instead of the network")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command][0](cfg, out, args)
    except uen.TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, prepare, train, eval, ablate, alpha-report.

Every command writes ``manifest.json`` into its output directory with the
config hash, seed, package versions and content hashes of what it wrote.
Failures print a JSON error object on stderr and exit non-zero. Verbosity
is taken from ``HIFN_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import datamodel as dm
from . import evaluation as ev
from . import synthgen
from .model import encode_samples, load_checkpoint, HIFNNetwork
from .training import TrainConfig, load_prepared, train

log = logging.getLogger("hifn")

PREPARE_DEFAULTS = {
    "Ts": dm.DEFAULT_SHORT_LEN,
    "L_max": dm.DEFAULT_LONG_CAP,
    "n_negatives": dm.DEFAULT_NEGATIVES,
    "train_negatives": None,
    "min_events": dm.DEFAULT_MIN_EVENTS,
    "rng_seed": 0,
    "mode": "standard",
    "holdout_fraction": 0.25,
    "valid_fraction": 0.1,
}


class CommandError(Exception):
    """A user-facing failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2) + "\n")


def _count_lines(path: Path) -> int:
    with open(path, "rb") as fh:
        return sum(1 for _ in fh)


def _versions() -> dict:
    return {"hifn": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, config: dict, seed, inputs=(), outputs=()) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "versions": _versions(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {
            name: {"sha256": _sha256(out / name), "lines": _count_lines(out / name)} for name in outputs
        },
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CommandError("missing_file", f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError("config_error", f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise CommandError("config_error", f"config {p} must be a JSON object")
    return obj


def _require(path, what: str) -> Path:
    if path is None:
        raise CommandError("usage_error", f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CommandError("missing_file", f"{what} not found: {p}")
    return p


def _out_dir(args, force_required: bool = False) -> Path:
    out = Path(args.out)
    if force_required and out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError("exists", f"output directory {out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["rng_seed"] = args.seed
    cfg = synthgen.SynthConfig.from_dict(raw)
    cfg.validate()
    out = _out_dir(args, force_required=True)
    tsv, truth = synthgen.generate(cfg)
    _write_text(out / "events.tsv", tsv)
    _write_text(out / "ground_truth.jsonl", "\n".join(truth.sidecar_lines()) + "\n")
    _write_json(out / "ground_truth_factors.json", truth.factors_json())
    files = ["events.tsv", "ground_truth.jsonl", "ground_truth_factors.json"]
    manifest = write_manifest(out, "synth", cfg.to_dict(), cfg.rng_seed, outputs=files)
    return {"out": str(out), "events": manifest["outputs"]["events.tsv"]["lines"] - 1}


def cmd_prepare(args) -> dict:
    raw = _load_json(args.config)
    unknown = set(raw) - set(PREPARE_DEFAULTS)
    if unknown:
        raise CommandError("config_error", f"unknown prepare config keys: {sorted(unknown)}")
    cfg = {**PREPARE_DEFAULTS, **raw}
    if args.seed is not None:
        cfg["rng_seed"] = args.seed
    if cfg["mode"] not in ("standard", "counterfactual"):
        raise CommandError("config_error", "mode must be 'standard' or 'counterfactual'")
    log_path = _require(args.log, "--log")
    out = _out_dir(args)
    vocab, users, dropped = dm.ingest_log(log_path, min_events=cfg["min_events"])
    if not users:
        raise CommandError("empty_dataset", f"no user has at least {cfg['min_events']} events")
    common = dict(
        short_len=cfg["Ts"], long_cap=cfg["L_max"], n_negatives=cfg["n_negatives"],
        train_negatives=cfg["train_negatives"], seed=cfg["rng_seed"],
    )
    if cfg["mode"] == "standard":
        splits, report = dm.prepare_dataset(vocab, users, dropped=dropped, **common)
        report_json = report.to_json()
    else:
        tr, va, slices = dm.build_counterfactual_sets(
            vocab, users, holdout_fraction=cfg["holdout_fraction"], valid_fraction=cfg["valid_fraction"], **common
        )
        splits = {"train": tr, "valid": va, **{f"slice_{k}": v for k, v in slices.items()}}
        report_json = {
            "users_kept": len(users),
            "users_dropped": dropped,
            "samples": {k: len(v) for k, v in splits.items()},
        }
    files = []
    for name, samples in splits.items():
        path = out / f"{name}.jsonl"
        tmp = path.with_name(path.name + ".tmp")
        dm.write_samples(samples, tmp)
        tmp.replace(path)
        files.append(path.name)
    dm.save_vocabulary(vocab, out / "vocab.json")
    _write_json(out / "report.json", report_json)
    write_manifest(out, "prepare", cfg, cfg["rng_seed"], inputs=[log_path], outputs=files + ["vocab.json", "report.json"])
    return report_json


def _train_config(args) -> TrainConfig:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["rng_seed"] = args.seed
    if getattr(args, "data", None):
        raw["data_dir"] = str(args.data)
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    if not cfg.data_dir:
        raise CommandError("usage_error", "a prepared data directory is required (--data or data_dir)")
    _require(cfg.data_dir, "data directory")
    out = _out_dir(args)
    summary = train(cfg, out)
    _write_json(out / "summary.json", summary)
    write_manifest(out, "train", cfg.to_dict(), cfg.rng_seed, outputs=["checkpoint.bin", "metrics.jsonl", "summary.json"])
    return summary


def _load_net(path) -> HIFNNetwork:
    cfg, params, _ = load_checkpoint(_require(path, "--checkpoint"))
    return HIFNNetwork(cfg, params)


def cmd_eval(args) -> dict:
    net = _load_net(args.checkpoint)
    data = _require(args.data, "--data")
    path = data / "test.jsonl" if data.is_dir() else data
    samples = dm.read_samples(_require(path, "evaluation samples"))
    metrics = ev.evaluate(net, encode_samples(samples, net.cfg))
    out = _out_dir(args)
    _write_json(out / "metrics.json", metrics)
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "data": str(path)}, None,
                   inputs=[args.checkpoint, path], outputs=["metrics.json"])
    return metrics


def cmd_ablate(args) -> dict:
    raw = _load_json(args.config)
    unknown = set(raw) - {"base", "matrix", "repeats", "data_dir", "metrics", "split"}
    if unknown:
        raise CommandError("config_error", f"unknown ablate config keys: {sorted(unknown)}")
    base = TrainConfig.from_dict(dict(raw.get("base", {})))
    if args.seed is not None:
        base = base.replace(rng_seed=args.seed)
    data_dir = args.data or raw.get("data_dir") or base.data_dir
    data = load_prepared(_require(data_dir, "data directory"))
    spec = raw.get("matrix", "sie")
    metrics = raw.get("metrics", ["auc", "logloss", "ndcg@10", "mrr", "map"])
    table = ev.run_ablation(spec, base, data, n_repeats=int(raw.get("repeats", 1)), metrics=metrics,
                            split=raw.get("split", "test"))
    out = _out_dir(args)
    _write_json(out / "results.json", table.to_json())
    _write_text(out / "results.txt", table.to_text() + "\n")
    config = {**raw, "base": base.to_dict(), "data_dir": str(data_dir)}
    write_manifest(out, "ablate", config, base.rng_seed, outputs=["results.json", "results.txt"])
    return {"rows": len(table.rows), "arms": [r["arm"] for r in table.rows]}


def cmd_alpha_report(args) -> dict:
    net = _load_net(args.checkpoint)
    data = _require(args.data, "--data")
    slices = {}
    for t in dm.BehaviorType:
        path = data / f"slice_{t.label}.jsonl"
        samples = dm.read_samples(path) if path.exists() else []
        slices[t.label] = encode_samples(samples, net.cfg) if samples else None
    report = ev.alpha_report(net, slices)
    out = _out_dir(args)
    _write_json(out / "alpha_report.json", report.to_json())
    write_manifest(out, "alpha-report", {"checkpoint": str(args.checkpoint), "data": str(data)}, None,
                   inputs=[args.checkpoint], outputs=["alpha_report.json"])
    return report.to_json()


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "alpha-report": cmd_alpha_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hifn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        if name == "prepare":
            p.add_argument("--log", required=True, help="behavior log (TSV)")
        if name in ("train", "ablate", "eval", "alpha-report"):
            p.add_argument("--data", type=Path, help="prepared data directory (or samples file for eval)")
        if name in ("eval", "alpha-report"):
            p.add_argument("--checkpoint", required=True, type=Path)
    return parser


def _error_code(exc: Exception) -> str:
    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, synthgen.ConfigError):
        return "config_error"
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, dm.ParseError):
        return "parse_error"
    return type(exc).__name__


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("HIFN_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as a machine-readable object
        log.debug("command failed", exc_info=True)
        err = {"error": {"code": _error_code(exc), "type": type(exc).__name__, "message": str(exc), "command": args.command}}
        print(json.dumps(err), file=sys.stderr)
        return 2 if _error_code(exc) in ("config_error", "usage_error", "exists") else 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

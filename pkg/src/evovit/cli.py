"""Command-line entry point: train | bench | analyze | visualize.

Exit codes: 0 success, 2 configuration/format error, 3 numeric failure.
The EVO_THREADS env var caps BLAS worker threads (default 1, for
deterministic and comparable runs).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, training
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .encoder import EncoderConfig
from .errors import ConfigError, FormatError, NumericError
from .evolution import EvoConfig, model_forward_evo, selection_mask_grid
from .netpbm import overlay_mask, write_pgm, write_ppm
from .params import RngState
from .encoder import init_params

_SCHEMA = {
    "encoder": {"image_side", "patch_side", "channels_in", "embed_dim",
                "heads", "depth", "ffn_hidden", "num_classes"},
    "evo": {"keep_ratio", "start_layer", "alpha", "aggregation", "expansion"},
    "train": {"epochs", "batch_size", "learning_rate", "weight_decay",
              "seed", "stage_size", "layer_to_stage_switch", "model"},
    "dataset": None,   # checked separately
    "out_dir": None,
}

_DEFAULTS = {
    "encoder": {"image_side": 16, "patch_side": 4, "channels_in": 1,
                "embed_dim": 32, "heads": 4, "depth": 4, "ffn_hidden": 0,
                "num_classes": 10},
    "evo": {"keep_ratio": 0.5, "start_layer": 2, "alpha": 0.5,
            "aggregation": "weighted-sum", "expansion": "copy"},
    "train": {"epochs": 20, "batch_size": 16, "learning_rate": 1e-3,
              "weight_decay": 0.0, "seed": 0, "stage_size": 4,
              "layer_to_stage_switch": 2.0 / 3.0, "model": "evo"},
    "dataset": {"synthetic": {"classes": 10, "samples": 200, "side": 16,
                              "seed": 1}},
    "out_dir": "run_out",
}


def _validate_keys(cfg: dict):
    for key in cfg:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None:
            for sub in cfg[key]:
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {key}.{sub!r}")
    if "dataset" in cfg:
        ds = cfg["dataset"]
        if not isinstance(ds, dict) or not ({"synthetic", "idx"} & ds.keys()):
            raise ConfigError("dataset must contain 'synthetic' or 'idx'")


def load_run_config(path, overrides=(), seed=None, out=None) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    _validate_keys(user)
    cfg = json.loads(json.dumps(_DEFAULTS))  # deep copy
    for key, val in user.items():
        if isinstance(val, dict) and key != "dataset":
            cfg[key].update(val)
        else:
            cfg[key] = val
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown override path {dotted!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown override path {dotted!r}")
        node[leaf] = value
    if seed is not None:
        cfg["train"]["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    _validate_keys(cfg)
    return cfg


def _configs(cfg: dict):
    enc = EncoderConfig(**cfg["encoder"])
    evo = EvoConfig(**cfg["evo"])
    tr = training.TrainConfig(**cfg["train"])
    return enc, evo, tr


def _write_manifest(out_dir: Path, cfg: dict, outputs):
    payload = json.dumps(cfg, sort_keys=True).encode()
    manifest = {
        "config_hash": hashlib.sha256(payload).hexdigest(),
        "seed": cfg["train"]["seed"],
        "source_rev": _git_rev(),
        "command_line": sys.argv,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "end_time": None,
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return manifest, path


def _git_rev() -> str:
    try:
        return subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True,
            timeout=5, cwd=os.path.dirname(__file__)).stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    enc, evo, tr = _configs(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.bin"
    manifest, manifest_path = _write_manifest(
        out_dir, cfg, [metrics_path, ckpt_path])
    dataset = load_dataset(cfg["dataset"])
    params = init_params(enc, RngState(tr.seed))
    with open(metrics_path, "w") as fh:
        def sink(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        training.train(tr.model, dataset, params, enc, tr,
                       evo if tr.model == "evo" else None,
                       metrics_sink=sink)
    save_checkpoint(ckpt_path, enc, params)
    manifest["end_time"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"wrote {metrics_path} and {ckpt_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    enc, evo, tr = _configs(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "bench.json"
    manifest, manifest_path = _write_manifest(out_dir, cfg, [report_path])
    params = init_params(enc, RngState(tr.seed))
    flops = analysis.flop_report(enc, evo)
    vanilla = analysis.throughput_bench("vanilla", params, enc,
                                        batch=args.batch, repeats=args.repeats)
    evor = analysis.throughput_bench("evo", params, enc, evo,
                                     batch=args.batch, repeats=args.repeats)
    report = {
        "flops": flops.to_dict(),
        "throughput": {"vanilla": vanilla, "evo": evor},
        "speedup_p50": vanilla["p50_seconds"] / evor["p50_seconds"],
    }
    report_path.write_text(json.dumps(report, indent=2))
    manifest["end_time"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(json.dumps(report["throughput"], indent=2))
    print(f"reduction_fraction={flops.reduction_fraction:.4f} "
          f"speedup_p50={report['speedup_p50']:.3f}")
    return 0


def _load_ckpt_for(args, cfg):
    enc, params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg["dataset"])
    probe = np.asarray(dataset["eval_images"][0])
    if probe.shape[0] != enc.image_side:
        raise ConfigError(
            f"checkpoint expects {enc.image_side}x{enc.image_side} images, "
            f"dataset provides {probe.shape[0]}x{probe.shape[1]}")
    return enc, params, dataset


def cmd_analyze(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    _, evo, tr = _configs(cfg)
    enc, params, dataset = _load_ckpt_for(args, cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    images = dataset["eval_images"][:args.samples]
    labels = dataset["eval_labels"][:args.samples]
    wrote = []
    if args.cka:
        curve = analysis.cka_curve(images, params, enc)
        path = out_dir / "cka.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "cka"])
            for i, v in enumerate(curve):
                w.writerow([i + 1, v])
        wrote.append(path)
    if args.pcc:
        curve = analysis.pcc_curve(images, params, enc)
        path = out_dir / "pcc.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "pcc_mean", "pcc_variance"])
            for i, v in enumerate(curve):
                w.writerow([i + 1, v["mean"], v["variance"]])
        wrote.append(path)
    if args.strategies:
        table = {
            kind: analysis.strategy_accuracy(
                kind, images, labels, params, enc, evo, seed=tr.seed)
            for kind in analysis.STRATEGY_KINDS
        }
        path = out_dir / "strategies.json"
        path.write_text(json.dumps(table, indent=2))
        wrote.append(path)
        print(json.dumps(table, indent=2))
    for p in wrote:
        print(f"wrote {p}")
    return 0


def cmd_visualize(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    _, evo, tr = _configs(cfg)
    enc, params, dataset = _load_ckpt_for(args, cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    images = dataset["eval_images"][:args.count]
    for idx, img in enumerate(images):
        _, _, _, sels, _ = model_forward_evo(img, params, enc, evo)
        for sel in sels:
            grid = selection_mask_grid(sel, enc.grid_side)
            write_pgm(out_dir / f"img{idx:03d}_layer{sel.layer:02d}.pgm",
                      grid)
            write_ppm(out_dir / f"img{idx:03d}_layer{sel.layer:02d}.ppm",
                      overlay_mask(img, grid, enc.patch_side))
    print(f"wrote masks for {len(images)} images to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evovit",
        description="Slow-fast token evolution for vision transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dot-path config override")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="FLOP report and throughput comparison")
    common(p)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="representation and strategy analyses")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cka", action="store_true")
    p.add_argument("--pcc", action="store_true")
    p.add_argument("--strategies", action="store_true")
    p.add_argument("--samples", type=int, default=32)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("visualize", help="dump per-layer selection masks")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("EVO_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``puae <subcommand> [options]``.

Exit codes: 0 success, 1 gradient check failure, 2 usage or configuration
error, 3 data or checkpoint error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import dataclasses
import datetime
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

try:  # Python >= 3.11 ships tomllib
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from . import gradcheck as gradcheck_suite
from .data_io import (
    SHAPE_KINDS,
    SyntheticShape,
    _validate_params,
    load_checkpoint,
    load_manifest,
    load_off,
    load_xyz,
    make_synthetic_dataset,
    save_checkpoint,
    save_xyz,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    LabelMismatchError,
    NonFiniteError,
    PuaeError,
)
from .geometry import chamfer_per_cloud, earth_movers_distance, hausdorff_distance, nn_distance_cv, point_to_surface
from .model import ArchConfig, UAE
from .training import PRESETS, MetricsSink, TrainConfig, pretrain, transfer

log = logging.getLogger("puae")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# data sections of the presets; the training sections live in training.PRESETS
DATA_PRESETS = {
    "paper": {"kinds": list(SHAPE_KINDS), "n_shapes": 64, "n_points": 2048},
    "desk": {"kinds": list(SHAPE_KINDS), "n_shapes": 8, "n_points": 512},
}

DEFAULT_DATA = {
    "kinds": list(SHAPE_KINDS),
    "n_shapes": 8,
    "per_kind": 20,
    "n_points": 512,
    "seed": 0,
    "manifest": "",
    "test_per_kind": 10,
    "test_seed": 1,
}

DEFAULT_TRANSFER = {
    "head": "classification",
    "kinds": ["sphere", "cube", "torus"],
    "linear": True,
    "baseline": True,
    "epochs": 100,
    "lr0": 1e-2,
    "lr_min": 1e-4,
    "batch_size": 32,
}


class UsageError(PuaeError):
    code = "usage"


# ---------------------------------------------------------------------- config


def default_config(preset_name: str = "desk") -> dict:
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    train = TrainConfig.from_dict(copy.deepcopy(PRESETS[preset_name])).to_dict()
    data = dict(DEFAULT_DATA)
    data.update(DATA_PRESETS.get(preset_name, {}))
    return {
        "preset": preset_name,
        "model": ArchConfig().to_dict(),
        "train": train,
        "data": data,
        "transfer": dict(DEFAULT_TRANSFER),
    }


def parse_value(text: str):
    """TOML scalar or array; anything else is taken as a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _section_for(key: str, config: dict):
    head = key.split(".", 1)[0]
    if head in ("model", "train", "data", "transfer"):
        return head, key.split(".", 1)[1] if "." in key else ""
    for section in ("train", "model", "data", "transfer"):
        if head in config[section]:
            return section, key
    raise ConfigError(f"unknown configuration key {key!r}")


def set_dotted(config: dict, key: str, value) -> None:
    section, rest = _section_for(key, config)
    if not rest:
        raise ConfigError(f"cannot replace the whole {section!r} section")
    node = config[section]
    parts = rest.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown configuration key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown configuration key {key!r}")
    node[parts[-1]] = value


def _merge(config: dict, updates: dict, prefix=""):
    for k, v in updates.items():
        if isinstance(v, dict) and isinstance(config.get(k), dict):
            _merge(config[k], v, f"{prefix}{k}.")
        elif k in config:
            config[k] = v
        else:
            raise ConfigError(f"unknown configuration key {prefix}{k!r}")


def resolve_config(args) -> dict:
    config = default_config(args.preset)
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                file_cfg = tomllib.load(fh)
        except FileNotFoundError:
            raise DataFormatError("config file not found", args.config) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        _merge(config, file_cfg)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        set_dotted(config, key.strip(), parse_value(text.strip()))
    if args.seed is not None:
        config["train"]["seed"] = args.seed
    # validate eagerly so usage errors surface before any work
    TrainConfig.from_dict(config["train"])
    ArchConfig.from_dict(config["model"])
    return config


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -------------------------------------------------------------------- run dirs


def make_run_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        out = Path("runs") / f"{command}-{stamp}"
    if out.exists() and any(out.iterdir()) and not getattr(args, "resume", False):
        raise UsageError(f"output directory {out} is not empty (use --resume to continue a run)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_files(out: Path, config: dict, seed: int):
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    (out / "seed").write_text(f"{seed}\n")
    (out / "build").write_text(build_id() + "\n")


def write_summary(out: Path, summary: dict):
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def echo_config(config: dict):
    print(json.dumps(config, indent=2, sort_keys=True))


# ---------------------------------------------------------------------- data


def pretrain_dataset(config: dict):
    d = config["data"]
    if d.get("manifest"):
        return load_manifest(d["manifest"])
    return make_synthetic_dataset(
        kinds=tuple(d["kinds"]), n_shapes=d["n_shapes"], n_points=d["n_points"], seed=d["seed"]
    )


def transfer_datasets(config: dict, head: str):
    d, t = config["data"], config["transfer"]
    kinds = tuple(t["kinds"])
    with_parts = head == "segmentation"
    train = make_synthetic_dataset(kinds=kinds, per_kind=d["per_kind"], n_points=d["n_points"], seed=d["seed"],
                                   split="train", with_parts=with_parts)
    test = make_synthetic_dataset(kinds=kinds, per_kind=d["test_per_kind"], n_points=d["n_points"],
                                  seed=d["test_seed"], split="test", with_parts=with_parts)
    return train, test


# ------------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    echo_config(config)
    if args.dry_run:
        return EXIT_OK
    out = make_run_dir(args, "pretrain")
    cfg = TrainConfig.from_dict(config["train"])
    arch = ArchConfig.from_dict(config["model"])
    resume_from = None
    if args.resume:
        previous = out / "config.json"
        if previous.exists() and json.loads(previous.read_text()) != json.loads(json.dumps(config)):
            raise UsageError(f"{out}: configuration differs from the run being resumed")
        ck = out / "checkpoints" / "last.ckpt"
        resume_from = ck if ck.exists() else None
    write_run_files(out, config, cfg.seed)
    dataset = pretrain_dataset(config)
    model = UAE(arch, seed=cfg.seed, dtype=cfg.dtype)
    sink = MetricsSink(out / "metrics.csv")
    result = pretrain(dataset, model, cfg, sink, checkpoint_dir=out / "checkpoints", resume_from=resume_from)
    last = result.log[-1] if result.log else {}
    summary = {
        "command": "pretrain",
        "config": config,
        "seed": cfg.seed,
        "build": build_id(),
        "loss_variant": cfg.loss.variant,
        "epochs_run": result.epochs_run,
        "steps": result.optimizer.step,
        "initial_cd": result.initial_cd,
        "final_cd": float(last["cd"]) if last else None,
        "final_loss": float(last["loss"]) if last else None,
        "checkpoint": str(out / "checkpoints" / "last.ckpt"),
        "param_count": model.param_count(),
    }
    write_summary(out, summary)
    print(f"pretrain finished: final cd {summary['final_cd']}, artifacts in {out}")
    return EXIT_OK


def _transfer_arch(base: ArchConfig, config: dict, head: str, n_classes: int, n_parts: int) -> ArchConfig:
    changes = {"num_classes": max(n_classes, 1), "num_parts": max(n_parts, 1)}
    if config["transfer"]["linear"]:
        changes["cls_hidden"] = ()
    return dataclasses.replace(base, **changes)


def _run_transfer(config: dict, mode: str, checkpoint, seed: int, out: Path = None) -> dict:
    head = config["transfer"]["head"]
    if head not in ("classification", "segmentation"):
        raise ConfigError(f"unknown head {head!r}")
    train_set, test_set = transfer_datasets(config, head)
    n_parts = sum(len(v) for v in train_set.part_space().values())
    t = config["transfer"]
    cfg = TrainConfig.from_dict(dict(
        config["train"], schedule="cosine", epochs=t["epochs"], lr0=t["lr0"], lr_min=t["lr_min"],
        batch_size=t["batch_size"], seed=seed,
    ))

    def build(params=None, bn_state=None):
        arch = _transfer_arch(ArchConfig.from_dict(config["model"]), config, head, len(train_set.class_names),
                              n_parts)
        model = UAE(arch, seed=seed, dtype=cfg.dtype)
        if params is not None:
            for name, value in params.items():
                if name.startswith("encoder."):
                    if name not in model.params or model.params[name].shape != value.shape:
                        raise CheckpointError(f"checkpoint tensor {name} does not fit the architecture")
                    model.params[name] = value.astype(cfg.dtype)
            for name, (mean, var) in bn_state.items():
                model.bn_state[name] = (mean.astype(cfg.dtype), var.astype(cfg.dtype))
        return model

    runs = {}
    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        enc_arch = ArchConfig.from_dict(ck.arch)
        model_cfg = ArchConfig.from_dict(config["model"])
        if (enc_arch.neighbors, enc_arch.enc_widths, enc_arch.emb_dim) != (model_cfg.neighbors, model_cfg.enc_widths,
                                                                     model_cfg.emb_dim):
            raise CheckpointError("checkpoint encoder does not match the configured architecture")
        model = build(ck.params, ck.bn_state)
        sink = MetricsSink(None if out is None else out / "metrics.csv")
        runs["pretrained"] = transfer(train_set, test_set, model, mode, head, cfg, sink)
    if checkpoint is None or (t["baseline"] and mode == "probe"):
        runs["random"] = transfer(train_set, test_set, build(), mode, head, cfg)
    summary = {
        name: {"metric": r.metric, "train": r.train_score, "test": r.test_score, "final_loss": r.log[-1]["loss"]}
        for name, r in runs.items()
    }
    return {"head": head, "mode": mode, "runs": summary, "_models": runs}


def cmd_transfer(args, mode: str) -> int:
    config = resolve_config(args)
    echo_config(config)
    if args.dry_run:
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    out = make_run_dir(args, mode)
    seed = config["train"]["seed"]
    write_run_files(out, config, seed)
    before = load_checkpoint(args.checkpoint).params
    result = _run_transfer(config, mode, args.checkpoint, seed, out)
    trained = result.pop("_models")["pretrained"].params
    changed = sorted(k for k in before if k.startswith("encoder.") and not np.array_equal(before[k], trained[k]))
    summary = {"command": mode, "config": config, "seed": seed, "build": build_id(),
               "checkpoint": str(args.checkpoint), "encoder_tensors_changed": len(changed), **result}
    write_summary(out, summary)
    for name, run in result["runs"].items():
        print(f"{mode} {name}: {run['metric']} train {run['train']:.4f} test {run['test']:.4f}")
    return EXIT_OK


def parse_reference(text: str):
    """An OFF mesh path or ``kind[:key=value,...]`` for an analytic surface."""
    if text.lower().endswith(".off"):
        return load_off(text)
    kind, _, rest = text.partition(":")
    if kind not in SHAPE_KINDS:
        raise UsageError(f"reference must be an .off file or one of {SHAPE_KINDS}, got {text!r}")
    params = {}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        params[key] = parse_value(value)
    try:
        return SyntheticShape(kind, _validate_params(kind, params))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cloud_metrics(pred: np.ndarray, target: np.ndarray, reference=None, emd_cap: int = 1024) -> dict:
    metrics = {
        "cd": float(chamfer_per_cloud(pred, target)[0]),
        "hd": hausdorff_distance(pred, target),
        "nn_cv": nn_distance_cv(pred),
    }
    if len(pred) == len(target) and len(pred) <= emd_cap:
        metrics["emd"] = float(earth_movers_distance(pred, target, cap=emd_cap).data)
    if reference is not None:
        metrics["p2f"] = point_to_surface(pred, reference)
    return metrics


def cmd_upsample(args) -> int:
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    cloud = load_xyz(args.input)
    ck = load_checkpoint(args.checkpoint)
    trained_ratio = ck.meta.get("train", {}).get("ratio")
    ratio = args.ratio if args.ratio is not None else trained_ratio
    if ratio is None:
        raise UsageError("--ratio is required when the checkpoint does not record its ratio")
    if trained_ratio is not None and not np.isclose(ratio, trained_ratio):
        raise ConfigError(f"ratio {ratio} does not match the checkpoint's training ratio {trained_ratio}")
    factor = 1.0 / ratio
    if abs(factor - round(factor)) > 1e-9:
        raise ConfigError(f"1/ratio must be an integer, got ratio={ratio}")
    arch = ArchConfig.from_dict(ck.arch)
    model = UAE(arch, seed=0)
    model.params = {k: v.astype(np.float32) for k, v in ck.params.items()}
    model.bn_state = {k: (m.astype(np.float32), v.astype(np.float32)) for k, (m, v) in ck.bn_state.items()}
    pred = model.upsample(cloud.points, ratio).astype(np.float64)
    out = make_run_dir(args, "upsample")
    save_xyz(pred, out / "upsampled.xyz")
    reference = parse_reference(args.reference) if args.reference else None
    metrics = cloud_metrics(pred, cloud.points, reference)
    summary = {"command": "upsample", "input": str(args.input), "checkpoint": str(args.checkpoint), "ratio": ratio,
               "input_points": len(cloud), "output_points": len(pred), "metrics": metrics, "build": build_id()}
    write_summary(out, summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_xyz(args.input).points
    target = load_xyz(args.target).points if args.target else None
    reference = parse_reference(args.reference) if args.reference else None
    if target is None and reference is None:
        raise UsageError("eval needs --target and/or --reference")
    metrics = cloud_metrics(pred, target, reference) if target is not None else {
        "p2f": point_to_surface(pred, reference)}
    summary = {"command": "eval", "input": str(args.input), "metrics": metrics}
    if args.out:
        write_summary(make_run_dir(args, "eval"), summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite.run(args.scope)
    failed = []
    for name, err in results:
        ok = err <= gradcheck_suite.TOLERANCE
        print(f"{name:34s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"gradcheck {args.scope}: all {len(results)} items within {gradcheck_suite.TOLERANCE:g}")
    return EXIT_OK


# ---------------------------------------------------------------------- ablate

ABLATION_AXES = ("strategy", "ratio", "loss.variant")


def parse_axes(items) -> dict:
    axes = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--axis expects name=v1,v2,..., got {item!r}")
        name, _, values = item.partition("=")
        name = name.strip()
        if name not in ABLATION_AXES:
            raise UsageError(f"unknown axis {name!r}; choose from {ABLATION_AXES}")
        axes[name] = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
        if not axes[name]:
            raise UsageError(f"axis {name!r} has no values")
    if not axes:
        raise UsageError("no axes specified")
    return axes


def grid_cells(axes: dict) -> list:
    cells = [{}]
    for name, values in axes.items():
        cells = [dict(c, **{name: v}) for c in cells for v in values]
    return cells


def run_cell(config: dict, cell: dict, out_dir: str) -> dict:
    """One ablation cell: pre-train, then a linear probe. Failures are reported, not raised."""
    row = {"cell": "|".join(f"{k}={v}" for k, v in cell.items()), **cell}
    try:
        cfg_dict = copy.deepcopy(config)
        for key, value in cell.items():
            set_dotted(cfg_dict, key, value)
        cfg = TrainConfig.from_dict(cfg_dict["train"])
        arch = ArchConfig.from_dict(cfg_dict["model"])
        cell_dir = Path(out_dir) / row["cell"].replace("|", "_").replace("=", "-").replace("+", "p")
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_run_files(cell_dir, cfg_dict, cfg.seed)
        model = UAE(arch, seed=cfg.seed, dtype=cfg.dtype)
        result = pretrain(pretrain_dataset(cfg_dict), model, cfg, MetricsSink(cell_dir / "metrics.csv"),
                          checkpoint_dir=cell_dir / "checkpoints")
        probe_cfg = copy.deepcopy(cfg_dict)
        probe_cfg["transfer"]["baseline"] = False
        probe = _run_transfer(probe_cfg, "probe", cell_dir / "checkpoints" / "last.ckpt", cfg.seed)
        probe.pop("_models")
        row.update(status="ok", final_cd=float(result.log[-1]["cd"]), initial_cd=result.initial_cd,
                   probe_accuracy=probe["runs"]["pretrained"]["test"], error="")
    except Exception as exc:  # isolate the cell, keep the grid going
        row.update(status="failed", final_cd="", initial_cd="", probe_accuracy="", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_ablate(args) -> int:
    axes = parse_axes(args.axis)
    config = resolve_config(args)
    cells = grid_cells(axes)
    echo_config(config)
    print(f"ablation grid: {len(cells)} cells over {list(axes)}")
    if args.dry_run:
        for c in cells:
            print(c)
        return EXIT_OK
    out = make_run_dir(args, "ablate")
    write_run_files(out, config, config["train"]["seed"])
    workers = max(1, int(os.environ.get("PUAE_THREADS", "1") or 1))
    if workers == 1:
        rows = [run_cell(config, c, str(out)) for c in cells]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [config] * len(cells), cells, [str(out)] * len(cells)))
    fields = ["cell", *axes, "status", "initial_cd", "final_cd", "probe_accuracy", "error"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    write_summary(out, {"command": "ablate", "config": config, "axes": axes, "cells": rows, "build": build_id()})
    for row in rows:
        print(f"{row['cell']:40s} {row['status']:7s} cd {row['final_cd']}  probe {row['probe_accuracy']}")
    return EXIT_OK


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="puae", description="Upsampling autoencoder for point clouds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("--config", help="TOML file with [model], [train], [data], [transfer] tables")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        p.add_argument("--out", help="run directory (must be new unless --resume)")
        p.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
        if run:
            p.add_argument("--resume", action="store_true", help="continue the run in --out")

    p = sub.add_parser("pretrain", help="self-supervised reconstruction pre-training")
    common(p)
    for name in ("probe", "finetune"):
        p = sub.add_parser(name, help=f"{name} a downstream head on a pre-trained encoder")
        common(p)
        p.add_argument("--checkpoint")

    p = sub.add_parser("upsample", help="upsample an XYZ cloud with a trained model")
    p.add_argument("input")
    p.add_argument("--checkpoint")
    p.add_argument("--ratio", type=float)
    p.add_argument("--reference", help="OFF mesh or analytic surface such as sphere:radius=0.5")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="CD / HD / EMD / P2F of a cloud")
    p.add_argument("input")
    p.add_argument("--target")
    p.add_argument("--reference")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient suite")
    p.add_argument("scope", choices=gradcheck_suite.SCOPES)

    p = sub.add_parser("ablate", help="grid of pre-training runs with probe accuracy")
    common(p, run=False)
    p.add_argument("--axis", action="append", metavar="NAME=V1,V2", help=f"one of {ABLATION_AXES}, repeatable")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {
        "pretrain": cmd_pretrain,
        "probe": lambda a: cmd_transfer(a, "probe"),
        "finetune": lambda a: cmd_transfer(a, "finetune"),
        "upsample": cmd_upsample,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"puae: error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"puae: error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, LabelMismatchError, PuaeError) as exc:
        print(f"puae: error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"puae: error [not_found]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

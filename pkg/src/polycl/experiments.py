"""Experiment configs, pipeline orchestration, sweeps and model comparison.

One TOML (or JSON) file describes one experiment. Stages run in a fixed order:
pretrain -> finetune -> evaluate -> refine -> propagate. Every run writes into
its own directory together with the fully resolved config.
"""

from __future__ import annotations

import copy
import datetime as _dt
import itertools
import json
import logging
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np
import tomli_w

from .dataset import DatasetIndex, SplitSpec, build_index, make_split
from .finetune import FinetuneConfig, predict_slices, run_finetuning
from .metrics import (
    EvalReport,
    dice_score,
    hausdorff,
    json_safe,
    paired_ttest_one_tailed,
    significance_marker,
)
from .models import EncoderConfig
from .plots import (
    plot_ablation,
    plot_model_comparison,
    plot_refinement,
    plot_training_curve,
)
from .pretrain import PretrainConfig, run_pretraining
from .propagate import POSITIONS, ablation_grid
from .refine import RefineConfig, refine_volume
from .segmenters import NoiseModel, OracleSegmenter, get_backend
from .volume_io import (
    Volume,
    list_dataset,
    load_volume,
    make_phantom,
    preprocess,
    resize_image,
    window_level,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("pretrain", "finetune", "evaluate", "refine", "propagate")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


class MismatchedScanSetError(ValueError):
    pass


_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_frac = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

CONFIG_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "experiment", "data"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "seed": _int,
                "repeat": _pos_int,
                "stages": {"type": "array", "items": {"enum": list(STAGES)}, "uniqueItems": True},
                "output_root": {"type": "string"},
                "baseline": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["phantom", "directory"]},
                "path": {"type": "string"},
                "phantom_count": {"type": "integer", "minimum": 2},
                "phantom_shape": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "organ_radius_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2},
                "slice_fraction": _frac,
                "resolution": {"type": "integer", "minimum": 8},
                "window_center": _num,
                "window_width": {"type": "number", "exclusiveMinimum": 0},
                "n_val": {"type": "integer", "minimum": 0},
                "n_test": {"type": "integer", "minimum": 1},
                "split_file": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stage_widths": {"type": "array", "items": _pos_int, "minItems": 2},
                "backbone": {"enum": ["unet", "resunet"]},
                "negative_slope": _num,
                "proj_dim": _pos_int,
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": ["S", "O", "M"]},
                "epochs": _pos_int,
                "batch_size": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "restart_period": _pos_int,
                "write_trace": {"type": "boolean"},
            },
        },
        "finetune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "batch_size": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "label_fraction": _frac,
                "restart_period": _pos_int,
            },
        },
        "refine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["oracle", "oracle_noisy", "null", "sam"]},
                "weights": {"type": "string"},
                "min_area": {"type": "integer", "minimum": 1},
                "margin": {"type": "integer", "minimum": 0},
            },
        },
        "propagate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["oracle", "oracle_noisy", "null", "sam2"]},
                "weights": {"type": "string"},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "positions": {"type": "array", "items": {"enum": list(POSITIONS)}, "minItems": 1},
                "seed_source": {"enum": ["label", "coarse"]},
                "dilation_radius": {"type": "integer", "minimum": 0},
                "drift_prob": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

DEFAULTS: dict = {
    "experiment": {"seed": 0, "repeat": 1, "stages": ["pretrain", "finetune", "evaluate"], "baseline": False},
    "data": {
        "source": "phantom",
        "phantom_count": 20,
        "phantom_shape": [64, 64, 48],
        "organ_radius_range": [4.0, 9.0],
        "slice_fraction": 0.3,
        "resolution": 256,
        "window_center": 40.0,
        "window_width": 400.0,
        "n_val": 4,
        "n_test": 4,
    },
    "model": {"stage_widths": [16, 32, 64, 128], "backbone": "unet", "negative_slope": 0.2, "proj_dim": 256},
    "pretrain": {"strategy": "M", "epochs": 100, "batch_size": 20, "lr": 1e-4, "restart_period": 5, "write_trace": False},
    "finetune": {"epochs": 100, "batch_size": 10, "lr": 1e-3, "label_fraction": 1.0, "restart_period": 5},
    "refine": {"backend": "oracle", "min_area": 5, "margin": 0},
    "propagate": {
        "backend": "oracle",
        "seeds": [1],
        "positions": ["middle"],
        "seed_source": "label",
        "dilation_radius": 1,
        "drift_prob": 0.0,
    },
}


def cache_root() -> Path:
    return Path(os.environ.get("POLYCL_CACHE", Path.home() / ".cache" / "polycl"))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> None:
    """Raise :class:`ConfigError` listing every schema violation."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    data = raw.get("data", {}) if isinstance(raw.get("data"), dict) else {}
    if data.get("source") == "directory" and "path" not in data:
        errors.append("data.path: required when data.source = 'directory'")
    widths = raw.get("model", {}).get("stage_widths") if isinstance(raw.get("model"), dict) else None
    res = data.get("resolution", DEFAULTS["data"]["resolution"])
    if isinstance(widths, list) and isinstance(res, int) and len(widths) >= 2:
        if res % (2 ** (len(widths) - 1)):
            errors.append(f"data.resolution: {res} not divisible by 2^{len(widths) - 1}")
    if errors:
        raise ConfigError(errors)


def load_config(path: str | Path) -> dict:
    """Parse, validate and fill defaults; the result is the resolved config."""
    path = Path(path)
    if path.suffix == ".json":
        raw = json.loads(path.read_text())
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        raw = tomllib.loads(path.read_text())
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    validate_config(raw)
    cfg = _merge(DEFAULTS, raw)
    return cfg


def encoder_config(cfg: dict) -> EncoderConfig:
    m = cfg["model"]
    widths = tuple(m["stage_widths"])
    return EncoderConfig(
        stage_widths=widths,
        downsamples=len(widths) - 1,
        backbone=m["backbone"],
        negative_slope=m["negative_slope"],
    )


def pretrain_config(cfg: dict, seed: int) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(
        strategy=p["strategy"],
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        lr=p["lr"],
        tau=p.get("tau"),
        proj_dim=cfg["model"]["proj_dim"],
        restart_period=p["restart_period"],
        seed=seed,
        write_trace=p["write_trace"],
    )


def finetune_config(cfg: dict, seed: int, init: str) -> FinetuneConfig:
    f = cfg["finetune"]
    return FinetuneConfig(
        epochs=f["epochs"],
        batch_size=f["batch_size"],
        lr=f["lr"],
        label_fraction=f["label_fraction"],
        init=init,
        restart_period=f["restart_period"],
        seed=seed,
    )


def load_volumes(cfg: dict) -> list[Volume]:
    d = cfg["data"]
    if d["source"] == "phantom":
        seed = cfg["experiment"]["seed"]
        return [
            make_phantom(seed * 1000 + i, tuple(d["phantom_shape"]), tuple(d["organ_radius_range"]))
            for i in range(d["phantom_count"])
        ]
    return [load_volume(p) for p in list_dataset(d["path"])]


def prepare_index(cfg: dict, volumes: Sequence[Volume]) -> DatasetIndex:
    d = cfg["data"]
    slices = [
        preprocess(v, d["slice_fraction"], d["resolution"], d["window_center"], d["window_width"])
        for v in volumes
    ]
    if d.get("split_file"):
        split = SplitSpec.load(d["split_file"])
    else:
        split = make_split([v.scan_id for v in volumes], d["n_val"], d["n_test"], seed=cfg["experiment"]["seed"])
    return build_index(slices, split)


def predict_volume(model, volume: Volume, cfg: dict) -> np.ndarray:
    """Predict every slice of a raw volume and map masks back to its native grid."""
    d = cfg["data"]
    v = volume if volume.normalized else window_level(volume, d["window_center"], d["window_width"])
    h, w, depth = v.shape
    pixels = np.stack([resize_image(v.voxels[:, :, s], d["resolution"]) for s in range(depth)])
    pred = predict_slices(model, pixels)
    out = np.zeros(v.shape, dtype=bool)
    for s in range(depth):
        m = pred[s]
        if m.shape != (h, w):
            from scipy import ndimage

            m = ndimage.zoom(m.astype(np.uint8), (h / m.shape[0], w / m.shape[1]), order=0, grid_mode=True) > 0
        out[:, :, s] = m
    return out


def git_stamp() -> str:
    try:
        return subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def _timestamped_dir(root: Path, name: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{name}-{stamp}"
    out, k = base, 1
    while out.exists():
        out = Path(f"{base}-{k}")
        k += 1
    out.mkdir(parents=True)
    return out


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(payload), indent=2, sort_keys=True, allow_nan=False))


def run_refine_stage(model, cfg: dict, index: DatasetIndex, out_dir: Path) -> dict:
    """Box-refine the model's test predictions against an oracle or SAM backend."""
    r = cfg["refine"]
    test = index.for_split("test")
    records = list(test.records)
    images = [rec.pixels for rec in records]
    masks = [rec.mask for rec in records]
    if r["backend"] in ("oracle", "oracle_noisy"):
        backend = get_backend(r["backend"], pairs=list(zip(images, masks)))
    else:
        backend = get_backend(r["backend"], weights=r.get("weights"))
    coarse = predict_slices(model, np.stack(images))
    result = refine_volume(records, coarse, backend, RefineConfig(r["min_area"], r["margin"]))
    rows = []
    per_scan: dict[str, list[int]] = {}
    for i, (rec, row) in enumerate(zip(records, result.slices)):
        per_scan.setdefault(rec.scan_id, []).append(i)
        rows.append({"scan_id": rec.scan_id, **row.__dict__})
    scans = []
    for sid, ids in per_scan.items():
        truth = np.stack([masks[i] for i in ids])
        scans.append({
            "scan_id": sid,
            "dice_before": dice_score(coarse[ids], truth),
            "dice_after": dice_score(result.masks[ids], truth),
            "hd_before": hausdorff(coarse[ids], truth),
            "hd_after": hausdorff(result.masks[ids], truth),
        })
    report = {
        "backend": r["backend"],
        "label_fraction": cfg["finetune"]["label_fraction"],
        "mean_dice_before": float(np.mean([s["dice_before"] for s in scans])),
        "mean_dice_after": float(np.mean([s["dice_after"] for s in scans])),
        "per_scan": scans,
        "per_slice": rows,
    }
    _write_json(out_dir / "refine_report.json", report)
    before = [x["dice_before"] for x in rows if x["dice_before"] is not None]
    after = [x["dice_after"] for x in rows if x["dice_after"] is not None]
    if before:
        plot_refinement(before, after, out_dir / "refine_scatter")
    return report


def _propagation_backend(p: dict, seed: int):
    if p["backend"] == "oracle":
        return lambda v: OracleSegmenter.for_volume(v)
    if p["backend"] == "oracle_noisy":
        noise = NoiseModel(p["dilation_radius"], p["drift_prob"], seed)
        return lambda v: OracleSegmenter.for_volume(v, noise)
    if p["backend"] == "null":
        return lambda v: get_backend("null")
    backend = get_backend(p["backend"], weights=p.get("weights"))
    return lambda v: backend


def run_propagate_stage(model, cfg: dict, volumes: Sequence[Volume], test_ids: Sequence[str], out_dir: Path, seed: int) -> dict:
    p = cfg["propagate"]
    test_vols = [v for v in volumes if v.scan_id in set(test_ids) and v.label is not None and v.label.any()]
    seed_source = None
    if p["seed_source"] == "coarse":
        if model is None:
            raise ValueError("seed_source = 'coarse' needs a fine-tuned model")
        coarse = {v.scan_id: predict_volume(model, v, cfg) for v in test_vols}
        seed_source = lambda v, s: coarse[v.scan_id][:, :, s]  # noqa: E731
    cells = ablation_grid(test_vols, p["seeds"], p["positions"], _propagation_backend(p, seed), seed_source)
    report = {
        "backend": p["backend"],
        "seed_source": p["seed_source"],
        "note": "count>1: seeds evenly spaced within the positional third of the informative set",
        "cells": [c.to_json() for c in cells],
    }
    _write_json(out_dir / "propagation_report.json", report)
    plot_ablation(report["cells"], out_dir / "propagation_ablation")
    return report


@dataclass
class RunArtifacts:
    root: Path
    runs: list[Path] = field(default_factory=list)
    reports: dict[str, EvalReport] = field(default_factory=dict)
    significance: list[dict] = field(default_factory=list)


def run_single(cfg: dict, run_dir: Path, run: int, volumes: Sequence[Volume] | None = None) -> dict[str, EvalReport]:
    """Execute the configured stages once, seeded with ``experiment.seed + run``."""
    seed = cfg["experiment"]["seed"] + run
    stages = cfg["experiment"]["stages"]
    run_dir.mkdir(parents=True, exist_ok=True)
    volumes = load_volumes(cfg) if volumes is None else volumes
    index = prepare_index(cfg, volumes)
    index.split.save(run_dir / "split.json")
    enc = encoder_config(cfg)
    reports: dict[str, EvalReport] = {}
    ckpt = None
    strategy = cfg["pretrain"]["strategy"]

    if "pretrain" in stages:
        pr = run_pretraining(pretrain_config(cfg, seed), index.for_split("train"), run_dir / "pretrain", enc)
        ckpt = pr.final_checkpoint
        plot_training_curve(pr.metrics, run_dir / "pretrain" / "loss")

    model = None
    if "finetune" in stages:
        init = "from_checkpoint" if ckpt is not None else "random"
        name = f"PolyCL-{strategy}" if ckpt is not None else "random-init"
        ft = run_finetuning(finetune_config(cfg, seed, init), index, run_dir / "finetune", ckpt, enc, name=name, run=run)
        reports[name] = ft.report
        model = ft.model
        if cfg["experiment"]["baseline"] and ckpt is not None:
            base = run_finetuning(finetune_config(cfg, seed, "random"), index, run_dir / "finetune_baseline", None, enc, name="random-init", run=run)
            reports["random-init"] = base.report

    if "evaluate" in stages and reports:
        for name, rep in reports.items():
            slug = name.replace(" ", "_")
            rep.save(run_dir / f"eval_{slug}.json")
            rep.to_csv(run_dir / f"eval_{slug}.csv")
        plot_model_comparison(list(reports.values()), run_dir / "eval_comparison")

    if "refine" in stages:
        if model is None:
            raise ValueError("refine stage needs the finetune stage")
        run_refine_stage(model, cfg, index, run_dir)

    if "propagate" in stages:
        run_propagate_stage(model, cfg, volumes, index.split.test_ids, run_dir, seed)
    return reports


def run_experiment(config: str | Path | dict, repeat: int | None = None, output_root: str | Path | None = None) -> RunArtifacts:
    """Run a whole experiment, possibly repeated with consecutive seeds.

    A failing stage stops the experiment; everything written so far stays on disk.
    """
    cfg = load_config(config) if not isinstance(config, dict) else resolve_config(config)
    if repeat is not None:
        cfg["experiment"]["repeat"] = repeat
    root = Path(output_root or cfg["experiment"].get("output_root") or cache_root() / "runs")
    out = _timestamped_dir(root, cfg["experiment"]["name"])
    (out / "config.resolved.toml").write_text(tomli_w.dumps(cfg))
    _write_json(out / "provenance.json", {"git_commit": git_stamp(), "schema_version": SCHEMA_VERSION})

    artifacts = RunArtifacts(out)
    volumes = load_volumes(cfg)
    merged: dict[str, EvalReport] = {}
    for run in range(cfg["experiment"]["repeat"]):
        run_dir = out / f"run_{run:03d}"
        artifacts.runs.append(run_dir)
        log.info("run %d -> %s", run, run_dir)
        for name, rep in run_single(cfg, run_dir, run, volumes).items():
            merged.setdefault(name, EvalReport(name)).extend(rep, run)

    artifacts.reports = merged
    if merged:
        aggregate = {name: {**rep.aggregate, "runs": rep.runs} for name, rep in merged.items()}
        _write_json(out / "aggregate_report.json", aggregate)
        for name, rep in merged.items():
            rep.save(out / f"report_{name}.json")
        plot_model_comparison(list(merged.values()), out / "aggregate_comparison")
        if len(merged) > 1:
            artifacts.significance = compare_models(list(merged.values()))
            _write_json(out / "significance.json", artifacts.significance)
    return artifacts


DEFAULT_DIRECTIONS = {"dice": "greater", "hausdorff": "less"}


def _paired_values(a: EvalReport, b: EvalReport, metric: str) -> tuple[list[float], list[float]]:
    ka = {(s.run, s.scan_id): s for s in a.per_scan}
    kb = {(s.run, s.scan_id): s for s in b.per_scan}
    if set(ka) != set(kb):
        missing = sorted(set(ka) ^ set(kb))[:5]
        raise MismatchedScanSetError(f"{a.model} vs {b.model}: (run, scan) sets differ, e.g. {missing}")
    xs, ys = [], []
    for key in sorted(ka):
        va, vb = getattr(ka[key], metric), getattr(kb[key], metric)
        if va is None or vb is None:
            continue
        xs.append(va)
        ys.append(vb)
    return xs, ys


def compare_models(reports: Sequence[EvalReport], directions: dict[str, str] | None = None) -> list[dict]:
    """One-tailed paired t-tests for every ordered pair of models and metric.

    Entries are paired on ``(run, scan_id)`` rather than list order. The test
    asks whether the first model is better, with "better" set per metric by
    ``directions``.
    """
    directions = directions or DEFAULT_DIRECTIONS
    rows = []
    for a, b in itertools.permutations(reports, 2):
        for metric, direction in directions.items():
            xs, ys = _paired_values(a, b, metric)
            if len(xs) < 2:
                rows.append({"model": a.model, "baseline": b.model, "metric": metric, "direction": direction,
                             "n": len(xs), "t": None, "p": None, "degenerate": True, "marker": ""})
                continue
            res = paired_ttest_one_tailed(xs, ys, direction)
            rows.append({
                "model": a.model,
                "baseline": b.model,
                "metric": metric,
                "direction": direction,
                "n": len(xs),
                "t": None if res.degenerate else res.statistic,
                "p": None if res.degenerate else res.p_value,
                "degenerate": res.degenerate,
                "marker": "" if res.degenerate else significance_marker(res.p_value),
            })
    return rows


SWEEP_ALIASES = {
    "batch_pt": "pretrain.batch_size",
    "batch_ft": "finetune.batch_size",
    "proj_dim": "model.proj_dim",
    "tau_pt": "pretrain.tau",
    "lr_pt": "pretrain.lr",
    "lr_ft": "finetune.lr",
    "label_fraction": "finetune.label_fraction",
    "strategy": "pretrain.strategy",
}


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = SWEEP_ALIASES.get(dotted, dotted).split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def expand_sweep(base: dict, grid: dict[str, list], pairing: Iterable[dict] | None = None) -> list[dict]:
    """Child configs for the cartesian grid, or only for the rows of ``pairing``.

    Each pairing row maps grid keys to values and must be a point of the grid.
    The pre-training temperature keeps following ``1 / batch_size`` unless a
    ``tau_pt`` axis sets it.
    """
    keys = list(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    if pairing is not None:
        wanted = []
        for row in pairing:
            if set(row) != set(keys):
                raise ConfigError([f"pairing row {row} does not name exactly the grid keys {keys}"])
            if row not in points:
                raise ConfigError([f"pairing row {row} is not a point of the grid"])
            wanted.append(row)
        points = wanted
    children = []
    for k, point in enumerate(points):
        child = copy.deepcopy(base)
        for key, value in point.items():
            _set_dotted(child, key, value)
        child["experiment"]["name"] = f"{base['experiment']['name']}-sweep{k:02d}"
        validate_config(child)
        children.append({"point": point, "config": child})
    return children


def run_sweep(base: str | Path | dict, grid: dict[str, list], pairing: Iterable[dict] | None = None,
              output_root: str | Path | None = None) -> list[dict]:
    raw = base if isinstance(base, dict) else _read_raw(base)
    results = []
    for child in expand_sweep(raw, grid, pairing):
        art = run_experiment(child["config"], output_root=output_root)
        agg = {name: rep.aggregate for name, rep in art.reports.items()}
        results.append({"point": child["point"], "root": str(art.root), "aggregate": agg})
    return results


def _read_raw(path: str | Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(path.read_text())

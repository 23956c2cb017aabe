"""Command-line entry point: ``polycl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .experiments import (
    ConfigError,
    compare_models,
    encoder_config,
    finetune_config,
    load_config,
    load_volumes,
    prepare_index,
    pretrain_config,
    run_experiment,
    run_propagate_stage,
    run_refine_stage,
    run_sweep,
)
from .finetune import evaluate, load_segmentation_model, run_finetuning
from .metrics import EvalReport, json_safe
from .models import CheckpointMismatchError
from .plots import plot_model_comparison
from .pretrain import run_pretraining
from .volume_io import make_phantom, save_volume

log = logging.getLogger("polycl")


def _cmd_run(args) -> int:
    art = run_experiment(args.config, repeat=args.repeat, output_root=args.out)
    print(art.root)
    for name, rep in art.reports.items():
        agg = rep.aggregate
        print(f"{name}: dice {agg['mean_dice']:.4f} ± {agg['std_dice']:.4f}  hd {agg['mean_hd']:.2f} ± {agg['std_hd']:.2f}")
    for row in art.significance:
        if row["p"] is not None:
            print(f"{row['model']} > {row['baseline']} on {row['metric']}: p = {row['p']:.4g} {row['marker']}")
    return 0


def _stage_setup(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes = load_volumes(cfg)
    return cfg, out, volumes, prepare_index(cfg, volumes)


def _apply_overrides(cfg: dict, section: str, args, names: tuple[str, ...]) -> None:
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            cfg[section][name] = value
    if getattr(args, "seed", None) is not None:
        cfg["experiment"]["seed"] = args.seed


def _cmd_pretrain(args) -> int:
    cfg, out, _, index = _stage_setup(args)
    _apply_overrides(cfg, "pretrain", args, ("strategy", "epochs", "batch_size", "lr", "tau"))
    seed = cfg["experiment"]["seed"]
    res = run_pretraining(pretrain_config(cfg, seed), index.for_split("train"), out, encoder_config(cfg))
    print(res.final_checkpoint)
    return 0


def _cmd_finetune(args) -> int:
    cfg, out, _, index = _stage_setup(args)
    _apply_overrides(cfg, "finetune", args, ("epochs", "batch_size", "lr", "label_fraction"))
    seed = cfg["experiment"]["seed"]
    init = "from_checkpoint" if args.checkpoint else "random"
    res = run_finetuning(finetune_config(cfg, seed, init), index, out, args.checkpoint, encoder_config(cfg), name=args.name)
    agg = res.report.aggregate
    print(f"{res.best_checkpoint}\ndice {agg['mean_dice']:.4f}  hd {agg['mean_hd']:.2f}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg, out, _, index = _stage_setup(args)
    model = load_segmentation_model(args.checkpoint)
    rep = evaluate(model, index.for_split(args.split), name=args.name)
    rep.save(out / f"eval_{args.name}.json")
    rep.to_csv(out / f"eval_{args.name}.csv")
    plot_model_comparison([rep], out / f"eval_{args.name}")
    agg = rep.aggregate
    print(f"dice {agg['mean_dice']:.4f} ± {agg['std_dice']:.4f}  hd {agg['mean_hd']:.2f} ± {agg['std_hd']:.2f}")
    return 0


def _cmd_refine(args) -> int:
    cfg, out, _, index = _stage_setup(args)
    if args.backend:
        cfg["refine"]["backend"] = args.backend
    model = load_segmentation_model(args.checkpoint)
    rep = run_refine_stage(model, cfg, index, out)
    print(f"dice before {rep['mean_dice_before']:.4f}  after {rep['mean_dice_after']:.4f}")
    return 0


def _cmd_propagate(args) -> int:
    cfg, out, volumes, index = _stage_setup(args)
    if args.backend:
        cfg["propagate"]["backend"] = args.backend
    model = load_segmentation_model(args.checkpoint) if args.checkpoint else None
    rep = run_propagate_stage(model, cfg, volumes, index.split.test_ids, out, cfg["experiment"]["seed"])
    for cell in rep["cells"]:
        print(f"seeds={cell['count']} {cell['position']:<9} dice {cell['mean_dice']:.4f} ± {cell['std_dice']:.4f}")
    return 0


def _parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if not values:
            raise SystemExit(f"bad --grid entry {item!r}; expected key=v1,v2,...")
        grid[key] = [json.loads(v) if v[:1].isdigit() or v[:1] in "-." else v for v in values.split(",")]
    return grid


def _cmd_sweep(args) -> int:
    if args.grid_file:
        spec = json.loads(Path(args.grid_file).read_text())
        grid, pairing = spec["grid"], spec.get("pairing")
    else:
        grid, pairing = _parse_grid(args.grid), None
    if args.pairing:
        pairing = json.loads(Path(args.pairing).read_text())
    results = run_sweep(args.config, grid, pairing, output_root=args.out)
    print(json.dumps(json_safe(results), indent=2))
    return 0


def _cmd_compare(args) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    rows = compare_models(reports)
    print("model,baseline,metric,n,t,p,marker")
    for r in rows:
        t = "" if r["t"] is None else f"{r['t']:.6g}"
        p = "" if r["p"] is None else f"{r['p']:.6g}"
        print(f"{r['model']},{r['baseline']},{r['metric']},{r['n']},{t},{p},{r['marker']}")
    if args.plot:
        plot_model_comparison(reports, args.plot)
    return 0


def _cmd_phantom(args) -> int:
    root = Path(args.out)
    for i in range(args.count):
        v = make_phantom(args.seed + i, tuple(args.shape))
        save_volume(v, root)
    print(f"wrote {args.count} phantoms to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polycl", description="Contrastive pre-training and promptable refinement for CT organ segmentation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every configured stage of an experiment")
    r.add_argument("config")
    r.add_argument("--repeat", type=int)
    r.add_argument("--out", help="output root (default $POLYCL_CACHE/runs)")
    r.set_defaults(func=_cmd_run)

    def stage(name: str, func, help: str, checkpoint: bool | None = None):
        s = sub.add_parser(name, help=help)
        s.add_argument("config")
        s.add_argument("--out", required=True)
        if checkpoint is not None:
            s.add_argument("--checkpoint", required=checkpoint)
        s.set_defaults(func=func)
        return s

    pt = stage("pretrain", _cmd_pretrain, "contrastive pre-training of the encoder")
    pt.add_argument("--strategy", choices=["S", "O", "M"])
    pt.add_argument("--tau", type=float)
    ft = stage("finetune", _cmd_finetune, "fine-tune a segmentation model", checkpoint=False)
    ft.add_argument("--from-checkpoint", dest="checkpoint")
    ft.add_argument("--label-fraction", type=float)
    for s in (pt, ft):
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int)
    ft.add_argument("--name", default="model")
    ev = stage("evaluate", _cmd_evaluate, "score a fine-tuned model", checkpoint=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--name", default="model")
    rf = stage("refine", _cmd_refine, "box-prompt refinement of model predictions", checkpoint=True)
    rf.add_argument("--backend", choices=["oracle", "oracle_noisy", "null", "sam"])
    pg = stage("propagate", _cmd_propagate, "propagate seed masks through volumes", checkpoint=False)
    pg.add_argument("--backend", choices=["oracle", "oracle_noisy", "null", "sam2"])

    sw = sub.add_parser("sweep", help="grid sweep over config values")
    sw.add_argument("config")
    sw.add_argument("--grid", nargs="*", default=[], help="key=v1,v2 (aliases: batch_pt, batch_ft, proj_dim, tau_pt, ...)")
    sw.add_argument("--grid-file", help="JSON with 'grid' and optional 'pairing' rows")
    sw.add_argument("--pairing", help="JSON list of grid points to run instead of the full product")
    sw.add_argument("--out")
    sw.set_defaults(func=_cmd_sweep)

    cp = sub.add_parser("compare", help="paired one-tailed t-tests between saved eval reports")
    cp.add_argument("reports", nargs="+")
    cp.add_argument("--plot", help="figure path stem (writes .png and .svg)")
    cp.set_defaults(func=_cmd_compare)

    ph = sub.add_parser("phantom-gen", help="write synthetic NIfTI phantoms")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=20)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--shape", type=int, nargs=3, default=[64, 64, 48])
    ph.set_defaults(func=_cmd_phantom)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointMismatchError, FileNotFoundError) as e:
        print(e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``meshmorph <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .checkpoint import load_checkpoint
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .decimation import MeshHierarchy, build_hierarchy
from .mesh import load_mesh, save_mesh
from .model import (ConfigError, ModelConfig, build, deformation_transfer, latent_extrapolate,
                    latent_interpolate)
from .train import (SWEEP_DEFAULTS, TrainConfig, ablation_sweeps, compare_aggregators, evaluate,
                    load_experiment, train)

log = logging.getLogger("meshmorph")


def _hierarchy_for(data_root: Path, args) -> MeshHierarchy:
    """Use ``--hierarchy`` if given, else ``<data>/hierarchy`` if present, else build one."""
    if getattr(args, "hierarchy", None):
        return MeshHierarchy.load(args.hierarchy)
    cached = data_root / "hierarchy"
    if (cached / "hierarchy.json").exists():
        return MeshHierarchy.load(cached)
    raise ConfigError(f"no hierarchy at {cached}; run `meshmorph hierarchy` first or pass --hierarchy")


def _experiment(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config:
        model_cfg, train_cfg = load_experiment(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if getattr(args, "seed", None) is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    return model_cfg, train_cfg


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    ds = generate_synthetic_dataset(args.samples, args.subdiv, args.order, args.amplitude, args.seed,
                                    rotate=args.rotate)
    save_dataset(ds, args.out)
    print(f"wrote {args.samples} samples ({ds.template.n_vertices} vertices) to {args.out}")
    return 0


def cmd_hierarchy(args) -> int:
    mesh = load_mesh(args.mesh)
    targets = [int(t) for t in args.targets.split(",")] if args.targets else None
    h = build_hierarchy(mesh, args.levels, args.factor, targets)
    h.save(args.out)
    print("levels (coarsest first):", ",".join(str(n) for n in h.counts))
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    ds = load_dataset(data)
    model_cfg, train_cfg = _experiment(args)
    model = build(model_cfg, _hierarchy_for(data, args))
    result = train(model, ds, train_cfg, checkpoint_dir=args.out,
                   on_epoch=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    print(f"initial loss {result.initial_loss:.6f} final loss {result.final_loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    metrics = evaluate(model, ds, args.split, scale=args.scale)
    if args.report:
        metrics.write(args.report)
    sys.stdout.write(metrics.summary_csv())
    return 0


def cmd_export_maps(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for side, aggs in (("down", model.down), ("up", model.up)):
        for i, a in enumerate(aggs):
            m = agg.export_fixed(a)
            m.meta.update(side=side, level=i)
            m.save(out / f"{side}_{i}")
    print(f"wrote {len(model.down) + len(model.up)} mapping matrices to {out}")
    return 0


def cmd_rf(args) -> int:
    model = load_checkpoint(args.checkpoint)
    side = model.down if args.side == "down" else model.up
    if not 0 <= args.level < len(side):
        raise ConfigError(f"level must be in [0, {len(side)})")
    a = side[args.level]
    weights = agg.receptive_field(a.mapping(), args.vertex)
    L = model.hierarchy.depth
    prev_level = L - args.level if args.side == "down" else args.level
    save_mesh(model.hierarchy.meshes[prev_level], args.out, scalars=weights)
    print(f"receptive field of vertex {args.vertex}: {np.count_nonzero(weights)} nonzeros -> {args.out}")
    return 0


def cmd_latent(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    pick = lambda i: ds.normalize(ds.samples[i])  # noqa: E731
    if args.op in ("interp", "extrap"):
        z = model.encode(np.stack([pick(args.a), pick(args.b)]))
        fn = latent_interpolate if args.op == "interp" else latent_extrapolate
        out = model.decode(fn(z[0], z[1], args.alpha))
    else:
        if args.t0 is None:
            raise ConfigError("transfer needs --t0")
        out = deformation_transfer(model, pick(args.a), pick(args.b), pick(args.t0), args.mode)
    save_mesh(ds.template.with_positions(ds.denormalize(out)), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    data = Path(args.data)
    model_cfg, train_cfg = _experiment(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    kinds = args.kinds.split(",") if args.kinds else None
    kw = {"kinds": kinds} if kinds else {}
    rows = compare_aggregators(load_dataset(data), _hierarchy_for(data, args), model_cfg, train_cfg,
                               seeds=seeds, out_csv=args.out, **kw)
    _print_rows(rows)
    return 0


def cmd_sweep(args) -> int:
    data = Path(args.data)
    model_cfg, train_cfg = _experiment(args)
    values = None
    if args.values:
        cast = str if args.parameter == "init_scheme" else (float if args.parameter == "w_a_init" else int)
        values = [cast(v) for v in args.values.split(",")]
    rows = ablation_sweeps(load_dataset(data), _hierarchy_for(data, args), args.parameter, model_cfg,
                           train_cfg, values, out_csv=args.out)
    _print_rows(rows)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(seed=args.seed, tol=args.tol)
    ok = True
    for name, rep in reports:
        print(f"{name}: {rep}")
        ok &= rep.passed
    return 0 if ok else 1


def _print_rows(rows: list[dict]) -> None:
    if rows:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshmorph", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic spherical-harmonic dataset")
    s.add_argument("--samples", type=int, default=80)
    s.add_argument("--subdiv", type=int, default=3)
    s.add_argument("--order", type=int, default=3)
    s.add_argument("--amplitude", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rotate", action="store_true", help="apply a seeded random rotation to the template")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("hierarchy", help="build a QEM mesh hierarchy")
    s.add_argument("--mesh", required=True)
    s.add_argument("--levels", type=int, default=4)
    s.add_argument("--factor", type=int, default=4)
    s.add_argument("--targets", help="comma-separated vertex counts, finest first (overrides --factor)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_hierarchy)

    def experiment_args(s):
        s.add_argument("--data", required=True)
        s.add_argument("--hierarchy")
        s.add_argument("--config", help="experiment JSON with 'model' and 'train' objects")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)

    s = sub.add_parser("train", help="train an autoencoder")
    experiment_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="reconstruction errors on a split")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--scale", type=float, default=1.0, help="multiply errors (e.g. to mm)")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-maps", help="freeze every aggregator into CSV + JSON")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_maps)

    s = sub.add_parser("rf", help="receptive field of one vertex as a colored PLY")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--side", choices=("down", "up"), default="down")
    s.add_argument("--level", type=int, default=0)
    s.add_argument("--vertex", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_rf)

    s = sub.add_parser("latent", help="latent interpolation, extrapolation, deformation transfer")
    s.add_argument("op", choices=("interp", "extrap", "transfer"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--a", type=int, default=0, help="first sample (S0 for transfer)")
    s.add_argument("--b", type=int, default=1, help="second sample (S1 for transfer)")
    s.add_argument("--t0", type=int)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--mode", choices=("vertex", "latent"), default="vertex")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_latent)

    s = sub.add_parser("compare", help="train every aggregation kind under one budget")
    experiment_args(s)
    s.add_argument("--seeds", default="0")
    s.add_argument("--kinds")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep", help="attention-parameter sensitivity sweep")
    experiment_args(s)
    s.add_argument("--parameter", required=True, choices=sorted(SWEEP_DEFAULTS))
    s.add_argument("--values")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"meshmorph {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

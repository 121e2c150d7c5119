"""Command line entry point.

    mmpoint gen-data --classes 8 --per-class 100 --points 1024 --views 24 --res 64 --out DIR
    mmpoint ingest --hdf5 FILE_OR_URL --points 1024 --out DIR
    mmpoint pretrain --config run-config.json --data DIR --out CKPT [--resume CKPT]
    mmpoint eval probe --ckpt CKPT --data DIR [--baseline]
    mmpoint eval fewshot --ckpt CKPT --data DIR --n-way 5 --k-shot 10 --runs 10
    mmpoint eval fewshot --ckpt CKPT --data DIR --grid --ways 5,10 --shots 10,20
    mmpoint ablate --axis views --values 1,3,4,5,6 --config run-config.json --data DIR --out DIR
    mmpoint export --ckpt CKPT --data DIR --out emb.csv

Exit status is 0 on success, 1 when mmpoint reports an error and 2 on usage errors.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from mmpoint.config import RunConfig
from mmpoint.core import N_VIEWS, SeedTree
from mmpoint.dataset import DatasetHandle, build_dataset, ingest_external
from mmpoint.errors import MMPointError
from mmpoint.evalsuite import (
    AXES,
    EpisodeSpec,
    ablate,
    evaluate_checkpoint,
    export_embeddings,
    few_shot_checkpoint,
    few_shot_grid_checkpoint,
    format_table,
    load_model,
    probe_untrained,
)
from mmpoint.shapegen import CameraRig
from mmpoint.sources import resolve_source
from mmpoint.trainer import pretrain

logger = logging.getLogger("mmpoint")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="root seed of every random stream")
    p.add_argument("--verbose", "-v", action="store_true", help="log at DEBUG level")


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "data", None):
        overrides["data"] = str(args.data)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg


def _int_list(raw: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"{flag} takes comma separated integers, got {raw!r}"
        ) from None
    if not values:
        raise argparse.ArgumentTypeError(f"{flag} is empty")
    return values


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate the procedural dataset."""
    rig = CameraRig(n_views=args.views, azimuth_step_deg=360.0 / args.views)
    build_dataset(
        args.out,
        classes=args.classes,
        per_class=args.per_class,
        n_points=args.points,
        resolution=args.res,
        tree=SeedTree(args.seed or 0),
        rig=rig,
        workers=args.workers,
    )
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    """Fetch an HDF5 archive if remote and convert it into a dataset directory."""
    source = resolve_source(args.hdf5)
    cache = Path(args.cache) if args.cache else Path(args.out) / ".archive-cache"
    archive = asyncio.run(source.fetch(cache))
    ingest_external(
        archive, args.out, n_points=args.points, resolution=args.res, tree=SeedTree(args.seed or 0)
    )
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Pretrain and print the final checkpoint path."""
    cfg = _run_config(args)
    if cfg.data is None:
        raise argparse.ArgumentTypeError("pretrain needs --data or a config with a data path")
    final = pretrain(cfg, out=args.out, resume=args.resume)
    print(final)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Run the linear probe or few-shot episodes on a checkpoint."""
    dataset = DatasetHandle(args.data)
    if args.protocol == "probe":
        print(evaluate_checkpoint(args.ckpt, dataset).summary())
        if args.baseline:
            _, cfg, _ = load_model(args.ckpt)
            print(probe_untrained(cfg, dataset).summary())
        return 0

    tree = SeedTree(args.seed or 0).child("few-shot")
    if args.grid:
        ways = _int_list(args.ways, "--ways")
        shots = _int_list(args.shots, "--shots")
        reports = few_shot_grid_checkpoint(
            args.ckpt, dataset, tree, ways=ways, shots=shots, n_query=args.n_query, runs=args.runs
        )
        for report in reports:
            print(report.summary())
        return 0

    spec = EpisodeSpec(n_way=args.n_way, k_shot=args.k_shot, n_query=args.n_query, runs=args.runs)
    print(few_shot_checkpoint(args.ckpt, dataset, spec, tree).summary())
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    """Run one ablation axis and print its table."""
    base = _run_config(args)
    if base.data is None:
        raise argparse.ArgumentTypeError("ablate needs --data or a config with a data path")
    values = None
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        if args.axis == "views":
            values = [int(v) for v in raw]
        elif args.axis == "multi_mlp":
            values = [tuple(bit == "1" for bit in v.split(":")) for v in raw]
        else:
            values = raw
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    rows = ablate(args.axis, values, base, DatasetHandle(base.data), out=args.out, seeds=seeds)
    print(format_table(rows))
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    """Export frozen features with labels as CSV."""
    export_embeddings(args.ckpt, DatasetHandle(args.data), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser for every subcommand."""
    parser = argparse.ArgumentParser(prog="mmpoint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument(
        "--views", type=int, default=N_VIEWS, choices=range(1, N_VIEWS + 1), metavar="V"
    )
    p.add_argument("--res", type=int, default=64, choices=(32, 64, 128))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="convert a ModelNet-style HDF5 archive")
    p.add_argument("--hdf5", required=True, help="an .h5 file, a shard directory or a URL")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--res", type=int, default=64, choices=(32, 64, 128))
    p.add_argument("--cache", default=None, help="download cache for remote archives")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint's frozen features")
    evals = p.add_subparsers(dest="protocol", required=True)
    e = evals.add_parser("probe", help="linear SVM on the train/test split")
    e.add_argument("--baseline", action="store_true", help="also probe an untrained encoder")
    for e in (e, evals.add_parser("fewshot", help="N-way K-shot episodes")):
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        _common(e)
        e.set_defaults(func=cmd_eval)
    e.add_argument("--n-way", type=int, default=5)
    e.add_argument("--k-shot", type=int, default=10)
    e.add_argument("--n-query", type=int, default=20)
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--grid", action="store_true", help="run every --ways x --shots layout")
    e.add_argument("--ways", default="5,10", help="comma separated N values for --grid")
    e.add_argument("--shots", default="10,20", help="comma separated K values for --grid")

    p = sub.add_parser("ablate", help="pretrain and probe every value of an ablation axis")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument(
        "--values",
        default=None,
        help="comma separated; for multi_mlp use intra:inter bits, e.g. 0:0,1:1",
    )
    p.add_argument("--seeds", default=None, help="comma separated seeds, default the config seed")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default="ablations")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write frozen features as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    """Run the command line and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as e:
        parser.error(str(e))
    except (MMPointError, ValueError) as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

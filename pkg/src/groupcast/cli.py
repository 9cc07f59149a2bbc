"""Command-line front end.

Subcommands: ingest, stats, train, build-index, recommend, simulate,
evaluate. Engine configuration comes from a flat key=value file (--config)
with per-key overrides via --set and the common shortcuts --seed, --k,
--no-ges, --no-dyic, --no-index.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import cascade, index as index_mod, pipeline
from .ingest import (Dataset, dataset_stats, load_interactions,
                     load_memberships, load_tags)

__all__ = ["main", "build_parser"]


def _add_dataset_args(sub, require_interactions=True):
    sub.add_argument("--interactions", required=require_interactions,
                     help="interactions CSV: group_id,item_id,timestamp[,weight]")
    sub.add_argument("--memberships", help="memberships CSV: group_id,user_id")
    sub.add_argument("--item-tags", help="item tag CSV: item_id,tag")
    sub.add_argument("--group-tags", help="group tag CSV: group_id,tag")


def _add_config_args(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="override config seed")
    sub.add_argument("--no-ges", action="store_true",
                     help="train on the full graph instead of sampled edges")
    sub.add_argument("--no-dyic", action="store_true",
                     help="skip influence cascades (scores become zero)")
    sub.add_argument("--no-index", action="store_true",
                     help="serve group lookups by brute force")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupcast",
        description="Streaming group recommendation engine",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p_ingest = commands.add_parser("ingest", help="validate input files and "
                                   "write dataset statistics")
    _add_dataset_args(p_ingest)
    p_ingest.add_argument("--out", help="write statistics JSON here")

    p_stats = commands.add_parser("stats", help="print dataset statistics")
    _add_dataset_args(p_stats)

    p_train = commands.add_parser("train", help="train the engine end to end")
    _add_dataset_args(p_train)
    _add_config_args(p_train)
    p_train.add_argument("--out", required=True, help="engine output directory")

    p_index = commands.add_parser("build-index", help="rebuild the serving "
                                  "index of a trained engine")
    p_index.add_argument("--engine", required=True, help="engine directory")
    p_index.add_argument("--out", help="directory to save into "
                         "(default: the engine directory)")

    p_rec = commands.add_parser("recommend", help="top-K for a group or item")
    p_rec.add_argument("--engine", required=True)
    target = p_rec.add_mutually_exclusive_group(required=True)
    target.add_argument("--group", help="recommend items to this group")
    target.add_argument("--item", help="recommend groups for this item")
    p_rec.add_argument("--k", type=int, help="result count "
                       "(default: config top_k)")

    p_sim = commands.add_parser("simulate", help="run an influence cascade "
                                "for one item")
    p_sim.add_argument("--engine", required=True)
    p_sim.add_argument("--item", required=True)
    p_sim.add_argument("--seeds", help="comma-separated seed groups "
                       "(default: the item's training groups)")
    p_sim.add_argument("--reps", type=int, help="Monte Carlo replications")
    p_sim.add_argument("--deterministic", action="store_true",
                       help="threshold activation instead of Monte Carlo")

    p_eval = commands.add_parser("evaluate", help="ranking metrics on a "
                                 "held-out interactions file")
    p_eval.add_argument("--engine", required=True)
    p_eval.add_argument("--interactions", required=True,
                        help="held-out interactions CSV")
    p_eval.add_argument("--k", default="5,10",
                        help="comma-separated cutoffs (default 5,10)")
    p_eval.add_argument("--out", help="metric report CSV path")
    p_eval.add_argument("--manifest", help="run manifest JSON path")
    return parser


def _load_dataset(args) -> Dataset:
    dataset = load_interactions(args.interactions)
    if args.memberships:
        dataset = load_memberships(args.memberships, dataset)
    if args.item_tags:
        dataset = load_tags(args.item_tags, "item", dataset)
    if args.group_tags:
        dataset = load_tags(args.group_tags, "group", dataset)
    return dataset


def _load_config(args) -> pipeline.EngineConfig:
    overrides: dict[str, object] = {}
    for pair in args.set:
        if "=" not in pair:
            raise SystemExit(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_ges:
        overrides["use_ges"] = False
    if args.no_dyic:
        overrides["use_dyic"] = False
    if args.no_index:
        overrides["use_index"] = False
    return pipeline.parse_config(args.config, overrides)


def _cmd_ingest(args) -> int:
    dataset = _load_dataset(args)
    stats = dataset_stats(dataset)
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_stats(args) -> int:
    dataset = _load_dataset(args)
    for key, value in sorted(dataset_stats(dataset).items()):
        print(f"{key}: {value}")
    return 0


def _cmd_train(args) -> int:
    dataset = _load_dataset(args)
    config = _load_config(args)
    engine, split = pipeline.run_training(dataset, config)
    pipeline.save_engine(engine, args.out)
    pipeline.write_manifest(
        os.path.join(args.out, "manifest.json"), config, engine.timings,
        extra={"snapshot_sizes": engine.snapshot_sizes,
               "num_test_events": len(split.test_set)})
    print(f"trained engine saved to {args.out}")
    print(f"snapshots: {engine.snapshot_sizes}, "
          f"held-out events: {len(split.test_set)}")
    return 0


def _cmd_build_index(args) -> int:
    engine = pipeline.load_engine(args.engine)
    engine.config.use_index = True
    engine.index = pipeline.build_serving_index(engine)
    out = args.out or args.engine
    os.makedirs(out, exist_ok=True)
    index_mod.save_index(engine.index, os.path.join(out, "index.bin"))
    print(f"index over {engine.index.size} groups saved to "
          f"{os.path.join(out, 'index.bin')}")
    return 0


def _cmd_recommend(args) -> int:
    engine = pipeline.load_engine(args.engine)
    k = args.k if args.k is not None else engine.config.top_k
    if args.group is not None:
        results = pipeline.recommend_items(engine, args.group, k)
    else:
        results = pipeline.recommend_groups(engine, args.item, k)
    print(json.dumps([{"id": rid, "score": score} for rid, score in results],
                     indent=2))
    return 0


def _cmd_simulate(args) -> int:
    engine = pipeline.load_engine(args.engine)
    state = engine.state
    if args.item not in state.item_index:
        raise SystemExit(f"unknown item {args.item!r}")
    params = engine.config.propagation()
    if args.reps is not None:
        params.num_reps = args.reps
    if args.seeds:
        seeds = [s.strip() for s in args.seeds.split(",") if s.strip()]
    else:
        v = state.item_index[args.item]
        seeds = [state.group_ids[g] for g in range(state.num_groups)
                 if v in state.history[g] and state.group_ids[g] in engine.graph.nodes]
    if not seeds:
        raise SystemExit("no seed groups: pass --seeds")
    pgraph = cascade.build_propagation_graph(state, engine.graph, args.item,
                                             engine.activity, params)
    result = cascade.simulate(pgraph, seeds, params,
                              deterministic=args.deterministic)
    print(json.dumps({
        "item": args.item,
        "num_seeds": len(set(seeds)),
        "num_groups": len(pgraph.nodes),
        "replications": result.num_reps,
        "mean_spread": result.mean_spread,
        "spread_fraction": cascade.expected_spread_fraction(
            result, len(pgraph.nodes)),
    }, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    engine = pipeline.load_engine(args.engine)
    test = load_interactions(args.interactions).interactions
    ks = tuple(int(x) for x in args.k.split(",") if x.strip())
    metrics = pipeline.evaluate(engine, test, ks=ks)
    for name in sorted(metrics):
        print(f"{name}: {metrics[name]}")
    if args.out:
        pipeline.write_metrics_csv(metrics, args.out)
    if args.manifest:
        pipeline.write_manifest(args.manifest, engine.config, engine.timings,
                                extra={"evaluated_file": args.interactions})
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "stats": _cmd_stats,
    "train": _cmd_train,
    "build-index": _cmd_build_index,
    "recommend": _cmd_recommend,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

import argparse
import json
import os
import sys
import traceback

from analysis import (
    SwapSpec,
    cluster_blocks,
    importance_heatmap,
    prototype_report,
    read_importance_csv,
    suggest_factor_blocks,
    swap_factors,
    swap_trials,
)
from config import (
    DATASET_DEFAULTS,
    EXPERIMENT_PRESETS,
    KMEANS_CLUSTERS,
    PROTOTYPE_REPORT_SAMPLES,
    SWAP_TRIALS,
    load_experiment_config,
)
from dataset import DatasetSpec, generate_dataset, load_palettes
from errors import AnalysisError, BinderError
from evaluation import evaluate
from training import fit, load_checkpoint
from utils import create_error_response, create_success_response, get_logger, setup_logging

logger = get_logger("binder.cli")


# -----------------------------
# Argument parsing
# -----------------------------
def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise BinderError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip().upper()] = value.strip()
    return overrides


def _common(parser):
    parser.add_argument("--out", default="runs/latest")
    parser.add_argument("--data", default="data/sprites", help="dataset root")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quiet", action="store_true", help="only log warnings")


def _experiment_options(parser):
    parser.add_argument("--config", help="experiment file (KEY=VALUE lines)")
    parser.add_argument("--preset", choices=sorted(EXPERIMENT_PRESETS))
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one experiment key")


def _checkpoint_options(parser, limit=True):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--split", default="test")
    if limit:
        parser.add_argument("--limit", type=int, help="use at most this many scenes")


def build_parser():
    parser = argparse.ArgumentParser(prog="binder", description="Block-slot binding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the sprite dataset")
    _common(p)
    p.add_argument("--num-scenes", type=int,
                   default=DATASET_DEFAULTS["num_train"] + DATASET_DEFAULTS["num_val"] + DATASET_DEFAULTS["num_test"])
    p.add_argument("--min-objects", type=int, default=DATASET_DEFAULTS["min_objects"])
    p.add_argument("--max-objects", type=int, default=DATASET_DEFAULTS["max_objects"])
    p.add_argument("--vary-size", action="store_true", help="sample object size as a fourth factor")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _experiment_options(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="DCI / FG-ARI evaluation of a checkpoint")
    _common(p)
    _checkpoint_options(p)

    p = sub.add_parser("cluster-blocks", help="k-means over one block index")
    _common(p)
    _checkpoint_options(p)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--k", type=int, default=KMEANS_CLUSTERS)

    p = sub.add_parser("swap", help="swap blocks between two slots (one scene, or hue trials over many)")
    _common(p)
    _checkpoint_options(p, limit=False)
    p.add_argument("--scene", help="scene id; without it, run hue-exchange trials")
    p.add_argument("--slots", type=int, nargs=2, metavar=("I", "J"))
    p.add_argument("--blocks", type=int, nargs="+", required=True)
    p.add_argument("--trials", type=int, default=SWAP_TRIALS, help="scenes to try without --scene")

    p = sub.add_parser("prototypes", help="concept-memory attention diagnostics")
    _common(p)
    _checkpoint_options(p, limit=False)
    p.add_argument("--samples", type=int, default=PROTOTYPE_REPORT_SAMPLES)

    p = sub.add_parser("importance", help="heatmap of a block importance table")
    _common(p)
    p.add_argument("--table", help="importance_block.csv written by eval (default: <out>/importance_block.csv)")

    return parser


# -----------------------------
# Commands
# -----------------------------
def cmd_generate_data(args):
    palettes = load_palettes()
    spec = DatasetSpec(
        num_scenes=args.num_scenes,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        seed=args.seed,
        sizes=dict(palettes["sizes"]) if args.vary_size else {"medium": palettes["sizes"]["medium"]},
    )
    manifest = generate_dataset(spec, args.data)
    return {"data_dir": args.data, "counts": manifest["counts"]}


def cmd_train(args):
    experiment = load_experiment_config(args.config, args.preset, _parse_overrides(args.set))
    state, path = fit(experiment, args.data, args.out, resume=args.resume, steps=args.steps,
                      progress=not args.quiet)
    return {"step": state.step, "checkpoint": path}


def cmd_eval(args):
    report = evaluate(args.checkpoint, args.data, args.out, split=args.split, limit=args.limit,
                      seed=args.seed)
    keys = ("D", "C", "I", "FG-ARI", "probe_accuracy", "excluded_factors", "num_matched", "matched_percentage")
    return {k: report[k] for k in keys}


def cmd_cluster_blocks(args):
    model = load_checkpoint(args.checkpoint).model
    report = cluster_blocks(model, args.data, args.split, args.block, k=args.k, seed=args.seed,
                            out_dir=args.out, limit=args.limit)
    return report.summary()


def cmd_swap(args):
    model = load_checkpoint(args.checkpoint).model
    if args.scene is None:
        trials = swap_trials(model, args.data, args.split, args.blocks, scenes=args.trials, rng_seed=args.seed)
        return {k: trials[k] for k in ("attempted", "exchanged", "exchanged_percentage")}
    if args.slots is None:
        raise AnalysisError("--scene needs --slots I J")
    spec = SwapSpec(scene_id=args.scene, slots=tuple(args.slots), blocks=tuple(args.blocks))
    _, _, hues = swap_factors(model, args.data, args.split, spec, out_dir=args.out, rng_seed=args.seed)
    return {"scene": spec.scene_id, "slots": list(spec.slots), "blocks": list(spec.blocks),
            "hues": hues, "out": args.out}


def cmd_prototypes(args):
    model = load_checkpoint(args.checkpoint).model
    report = prototype_report(model, args.data, args.split, args.out, samples=args.samples,
                              rng_seed=args.seed)
    return {k: v for k, v in report.items() if k != "coverage"}


def cmd_importance(args):
    table = args.table or os.path.join(args.out, "importance_block.csv")
    R_block, factors, _ = read_importance_csv(table)
    path = importance_heatmap(R_block, factors, os.path.join(args.out, "importance_block.png"))
    return {"heatmap": path, "suggested_blocks": suggest_factor_blocks(R_block, factors)}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cluster-blocks": cmd_cluster_blocks,
    "swap": cmd_swap,
    "prototypes": cmd_prototypes,
    "importance": cmd_importance,
}


# -----------------------------
# Entry point
# -----------------------------
def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging("WARNING" if args.quiet else None)

    try:
        result = COMMANDS[args.command](args)
    except BinderError as e:
        payload = create_error_response(str(e), type(e).__name__)
        print(json.dumps(payload), file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(traceback.format_exc())
        payload = create_error_response("Internal error", type(e).__name__, {"details": str(e)})
        print(json.dumps(payload), file=sys.stderr)
        return 2

    print(json.dumps(create_success_response(result, f"{args.command} finished"), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

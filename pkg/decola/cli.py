"""
Command-line entry point: data generation, both training phases, pseudo-labeling,
evaluation, reporting and the inference server.
"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from decola.config import RunConfig, configure_logging, settings
from decola.errors import DecolaError
from decola.utils.diagnostics import diagnostics

logger = logging.getLogger(__name__)


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _override(value: str):
    if "=" not in value:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{value}'")
    key, raw = value.split("=", 1)
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError:
        parsed = raw
    return key.strip(), parsed


def _emit_config(config: Dict, run_dir: Optional[str] = None) -> None:
    """Print the resolved configuration and keep a copy in the run directory"""
    text = json.dumps(config, indent=2, sort_keys=True) + "\n"
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.resolved.json"), "w") as f:
            f.write(text)
    print(text, end="")


def _run_config(args, phase: int) -> RunConfig:
    overrides = dict(args.set or [])
    overrides.update({
        "phase": phase,
        "seed": args.seed,
        "run_dir": args.run_dir,
        "steps": args.steps,
        "data.data_dir": args.data_dir,
        "resume_from": args.resume,
    })
    return RunConfig.load(args.config, **overrides)


def cmd_gen_data(args) -> None:
    from decola.utils.shapes import generate_shapes_dataset

    _emit_config(
        {
            "command": "gen-data",
            "seed": args.seed,
            "out": args.out,
            "n_train": args.n_train,
            "n_val": args.n_val,
            "n_weak": args.n_weak,
            "image_size": args.image_size,
            "embed_dim": args.embed_dim,
        },
        args.out,
    )
    manifests = generate_shapes_dataset(
        args.seed, args.out, args.n_train, args.n_val, args.n_weak, args.image_size, dim=args.embed_dim
    )
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest.images)} images, {len(manifest.annotations)} boxes")


def cmd_train_phase1(args) -> None:
    from decola.services.trainer import train_phase1

    cfg = _run_config(args, phase=1)
    print(cfg.resolved_json(), end="")
    print(train_phase1(cfg))


def cmd_train_phase2(args) -> None:
    from decola.services.trainer import train_phase2

    cfg = _run_config(args, phase=2)
    if args.phase1_checkpoint:
        cfg.phase1_checkpoint = args.phase1_checkpoint
    if args.pseudo_manifest:
        cfg.data.pseudo_manifest = os.path.abspath(args.pseudo_manifest)
    print(cfg.resolved_json(), end="")
    print(train_phase2(cfg))


def cmd_pseudo_label(args) -> None:
    from decola.ml.model import labeler_hash, load_checkpoint, seed_everything
    from decola.services.pseudo_labeler import expand_dataset

    _emit_config(
        {
            "command": "pseudo-label",
            "checkpoint": args.checkpoint,
            "weak_manifest": args.weak_manifest,
            "resolutions": args.resolutions,
            "out": args.out,
            "topj": args.topj,
            "min_score": args.min_score,
            "threads": settings.DECOLA_THREADS,
        },
        run_dir=os.path.dirname(os.path.abspath(args.out)),
    )
    seed_everything(0, settings.DECOLA_THREADS)
    model = load_checkpoint(args.checkpoint)
    manifest = expand_dataset(
        model,
        args.weak_manifest,
        args.resolutions,
        args.out,
        labeler=labeler_hash(args.checkpoint),
        topj=args.topj,
        min_score=args.min_score,
    )
    print(f"{len(manifest.images)} images, {len(manifest.annotations)} pseudo boxes -> {args.out}")


def cmd_evaluate(args) -> None:
    from decola.ml.model import load_checkpoint, seed_everything
    from decola.services.evaluator import (
        LVIS_IOU_RANGE,
        Stage,
        build_report,
        conditioned_map,
        conditioned_recall,
        open_vocab_map,
        pseudo_label_quality,
    )
    from decola.utils.export_utils import report_table, write_curves, write_report
    from decola.utils.manifest import load_hidden_gt, load_manifest
    from decola.utils.samples import SampleLoader

    iou_thresholds = LVIS_IOU_RANGE if args.iou_range else [args.iou]
    _emit_config(
        {
            "command": "evaluate",
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "mode": args.mode,
            "k": args.k,
            "n": args.n,
            "n_sweep": args.n_sweep,
            "conditioning": args.conditioning,
            "iou_thresholds": iou_thresholds,
            "max_images": args.max_images,
            "pseudo_manifest": args.pseudo_manifest,
            "hidden_gt": args.hidden_gt,
            "seed": args.seed,
            "threads": settings.DECOLA_THREADS,
        },
        args.run_dir,
    )
    seed_everything(args.seed, settings.DECOLA_THREADS)
    model = load_checkpoint(args.checkpoint)
    loader = SampleLoader(args.manifest)
    image_ids = loader.image_ids[: args.max_images] if args.max_images else loader.image_ids
    samples = [loader.sample(i) for i in image_ids]
    n = args.n or model.config.queries_per_class
    headline_k = 20 if 20 in args.k else max(args.k)

    quality = None
    if args.pseudo_manifest:
        quality = pseudo_label_quality(
            load_manifest(args.pseudo_manifest),
            load_hidden_gt(args.hidden_gt or args.pseudo_manifest),
            args.iou,
        )

    if args.mode == "conditioned":
        by_k = conditioned_map(model, samples, args.k, n, iou_thresholds, args.conditioning)
        by_n = {
            budget: conditioned_map(model, samples, [headline_k], budget, iou_thresholds, args.conditioning)[headline_k]
            for budget in args.n_sweep or []
        }
        report = build_report(
            "conditioned",
            by_k[headline_k],
            model.vocabulary,
            n,
            headline_k,
            c_map_at_k=by_k,
            c_map_at_n=by_n,
            c_ar_first=conditioned_recall(model, samples, Stage.FIRST, args.iou, n, args.conditioning),
            c_ar_second=conditioned_recall(model, samples, Stage.SECOND, args.iou, n, args.conditioning),
            pseudo_quality=quality,
        )
    else:
        limit = max(args.k)
        result = open_vocab_map(model, samples, limit, iou_thresholds, list(model.vocabulary.classes))
        report = build_report("standard", result, model.vocabulary, n, limit, pseudo_quality=quality)

    write_report(report, args.run_dir)
    write_curves(report, args.run_dir)
    print(report_table(report), end="")


def cmd_report(args) -> None:
    from decola.utils.export_utils import curve_frames, load_report, report_table, write_curves

    _emit_config({"command": "report", "run_dir": args.run_dir, "plot": args.plot})
    report = load_report(args.run_dir)
    for path in write_curves(report, args.run_dir):
        print(path)
    if args.plot:
        from decola.utils.plotting import plot_curves

        for path in plot_curves(curve_frames(report), os.path.join(args.run_dir, "curves")):
            print(path)
    print(report_table(report), end="")


def cmd_serve(args) -> None:
    import uvicorn

    _emit_config({"command": "serve", "host": args.host, "port": args.port, "checkpoint": settings.CHECKPOINT_PATH})
    uvicorn.run("decola.main:app", host=args.host, port=args.port, reload=settings.API_RELOAD)


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--run-dir", help="default: <RUNS_DIR>/phase<N>")
    parser.add_argument("--data-dir")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--resume", help="checkpoint to resume from")
    parser.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. model.embed_dim=32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decola", description=__doc__)
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=os.path.join(settings.RUNS_DIR, "data"))
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-weak", type=int, default=300)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-phase1", help="conditioned training on base classes")
    _add_run_args(p)
    p.set_defaults(func=cmd_train_phase1)

    p = sub.add_parser("pseudo-label", help="box the tags of weak images with a Phase 1 model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weak-manifest", required=True)
    p.add_argument("--resolutions", type=_int_list, default=[32, 48, 64])
    p.add_argument("--out", required=True)
    p.add_argument("--topj", type=int, default=1)
    p.add_argument("--min-score", type=float, default=0.0)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-phase2", help="open-vocabulary finetuning with pseudo-labels")
    _add_run_args(p)
    p.add_argument("--phase1-checkpoint")
    p.add_argument("--pseudo-manifest")
    p.set_defaults(func=cmd_train_phase2)

    p = sub.add_parser("evaluate", help="c-mAP / mAP / c-AR on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=os.path.join(settings.RUNS_DIR, "data", "val.json"))
    p.add_argument("--mode", choices=["conditioned", "standard"], default="conditioned")
    p.add_argument("--k", type=_int_list, default=[10, 20, 50, 100, 300])
    p.add_argument("--n", type=int, help="queries per class (default: model config)")
    p.add_argument("--n-sweep", type=_int_list, help="per-class budgets for the c-AP vs n curve")
    p.add_argument("--conditioning", choices=["gt", "full"], default="gt")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--iou-range", action="store_true", help="average AP over IoU 0.5:0.95")
    p.add_argument("--max-images", type=int)
    p.add_argument("--pseudo-manifest")
    p.add_argument("--hidden-gt")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--run-dir", default=os.path.join(settings.RUNS_DIR, "eval"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="CSV curves (and plots) from an evaluation run")
    p.add_argument("--run-dir", default=os.path.join(settings.RUNS_DIR, "eval"))
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the inference API")
    p.add_argument("--host", default=settings.API_HOST)
    p.add_argument("--port", type=int, default=settings.API_PORT)
    p.set_defaults(func=cmd_serve)
    return parser


def _error_json(e: Exception) -> str:
    if isinstance(e, DecolaError):
        payload = e.to_dict()
    else:
        payload = {"error": type(e).__name__, "message": str(e), "details": {}}
    return json.dumps(payload, sort_keys=True, default=str)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    diagnostics.reset()
    try:
        args.func(args)
    except (DecolaError, ValidationError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(_error_json(e), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {str(e)}")
        print(_error_json(e), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Long-running acceptance experiments on the shapes world:

  overfit        Phase 1 on a 20-image base-class set reaches train c-AP@20 >= 0.95
  conditioning   conditioned inference beats full-vocabulary inference on novel classes
                 (c-AP@20 and second-stage c-AR at the same query budget)
  pseudo         Phase 2 with pseudo-labels beats the converted Phase 1 model and the
                 base-only control on novel AP without losing more than 10% base AP;
                 pseudo-label quality >= 70% at IoU 0.5
  determinism    the full pipeline run twice yields identical report and pseudo manifest bytes

Usage: python scripts/run_experiments.py [overfit|conditioning|pseudo|determinism|all] --seeds 7,8,9
"""
import argparse
import filecmp
import json
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from decola.cli import main as cli
from decola.ml.model import load_checkpoint
from decola.services.evaluator import Stage, conditioned_map, conditioned_recall, open_vocab_map
from decola.utils.samples import SampleLoader


def run(*argv) -> None:
    status = cli([str(a) for a in argv])
    if status != 0:
        raise SystemExit(f"decola {' '.join(str(a) for a in argv)} failed with status {status}")


def gen_data(root: str, seed: int, **sizes) -> str:
    data_dir = os.path.join(root, "data")
    argv = ["gen-data", "--seed", seed, "--out", data_dir]
    for key, value in sizes.items():
        argv += [f"--{key.replace('_', '-')}", value]
    run(*argv)
    return data_dir


def phase1(root: str, data_dir: str, seed: int, steps: int, *extra) -> str:
    run_dir = os.path.join(root, "phase1")
    run("train-phase1", "--seed", seed, "--data-dir", data_dir, "--run-dir", run_dir, "--steps", steps, *extra)
    return os.path.join(run_dir, "ckpt-final.bin")


def phase2(root: str, name: str, data_dir: str, seed: int, steps: int, *extra) -> str:
    run_dir = os.path.join(root, name)
    run("train-phase2", "--seed", seed, "--data-dir", data_dir, "--run-dir", run_dir, "--steps", steps, *extra)
    return os.path.join(run_dir, "ckpt-final.bin")


def overfit(out: str, seeds, steps: int) -> bool:
    scores = []
    for seed in seeds:
        root = os.path.join(out, f"overfit-{seed}")
        data_dir = gen_data(root, seed, n_train=20, n_val=5, n_weak=5)
        checkpoint = phase1(root, data_dir, seed, steps, "--set", "data.val_manifest=train.json",
                            "--set", "eval_every=500")
        model = load_checkpoint(checkpoint)
        samples = SampleLoader(os.path.join(data_dir, "train.json")).samples()
        scores.append(conditioned_map(model, samples, k=[20])[20].map)
        print(f"seed {seed}: train c-AP@20 = {scores[-1]:.3f}")
    return all(s >= 0.95 for s in scores)


def conditioning(out: str, seeds, steps: int) -> bool:
    rows = []
    for seed in seeds:
        root = os.path.join(out, f"pipeline-{seed}")
        data_dir = gen_data(root, seed)
        model = load_checkpoint(phase1(root, data_dir, seed, steps))
        samples = SampleLoader(os.path.join(data_dir, "val.json")).samples()
        novel = model.vocabulary.novel_classes
        row = {}
        for mode in ("gt", "full"):
            row[f"c_ap_{mode}"] = conditioned_map(model, samples, k=[20], conditioning=mode, classes=novel)[20].map
            row[f"c_ar_{mode}"] = conditioned_recall(model, samples, Stage.SECOND, conditioning=mode)
        rows.append(row)
        print(f"seed {seed}: {json.dumps(row, sort_keys=True)}")
    mean = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    return mean["c_ap_gt"] > mean["c_ap_full"] and mean["c_ar_gt"] > mean["c_ar_full"]


def pseudo(out: str, seeds, steps: int) -> bool:
    rows, quality = [], []
    for seed in seeds:
        root = os.path.join(out, f"pipeline-{seed}")
        data_dir = gen_data(root, seed)
        phase1_checkpoint = phase1(root, data_dir, seed, steps)
        pseudo_manifest = os.path.join(data_dir, "pseudo.json")
        run("pseudo-label", "--checkpoint", phase1_checkpoint, "--weak-manifest", os.path.join(data_dir, "weak.json"),
            "--out", pseudo_manifest)
        run("evaluate", "--checkpoint", phase1_checkpoint, "--manifest", os.path.join(data_dir, "val.json"),
            "--pseudo-manifest", pseudo_manifest, "--hidden-gt", os.path.join(data_dir, "weak.hidden-gt.json"),
            "--run-dir", os.path.join(root, "eval-pseudo"), "--k", "20", "--max-images", 10)
        with open(os.path.join(root, "eval-pseudo", "report.json")) as f:
            quality.append(json.load(f)["pseudo_label_quality"]["fraction_matched"])

        checkpoints = {
            "converted": phase2(root, "phase2-converted", data_dir, seed, 0, "--phase1-checkpoint", phase1_checkpoint),
            "base_only": phase2(root, "phase2-base-only", data_dir, seed, steps, "--phase1-checkpoint", phase1_checkpoint,
                                "--set", "data.mix_ratio=[1,0]"),
            "pseudo": phase2(root, "phase2-pseudo", data_dir, seed, steps, "--phase1-checkpoint", phase1_checkpoint,
                             "--pseudo-manifest", pseudo_manifest),
        }
        samples = SampleLoader(os.path.join(data_dir, "val.json")).samples()
        row = {}
        for name, checkpoint in checkpoints.items():
            model = load_checkpoint(checkpoint)
            result = open_vocab_map(model, samples, k=100)
            row[f"{name}_novel"] = result.group_map(model.vocabulary.novel_classes) or 0.0
            row[f"{name}_base"] = result.group_map(model.vocabulary.base_classes) or 0.0
        rows.append(row)
        print(f"seed {seed}: pseudo quality {quality[-1]:.3f} {json.dumps(row, sort_keys=True)}")
    mean = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    improves = mean["pseudo_novel"] > mean["converted_novel"] and mean["pseudo_novel"] > mean["base_only_novel"]
    keeps_base = mean["pseudo_base"] >= 0.9 * mean["base_only_base"]
    return improves and keeps_base and float(np.mean(quality)) >= 0.70


def determinism(out: str, seeds, steps: int) -> bool:
    seed = seeds[0]
    roots = [os.path.join(out, f"determinism-{seed}-{attempt}") for attempt in (0, 1)]
    for root in roots:
        data_dir = gen_data(root, seed, n_train=40, n_val=10, n_weak=20)
        checkpoint = phase1(root, data_dir, seed, steps)
        pseudo_manifest = os.path.join(data_dir, "pseudo.json")
        run("pseudo-label", "--checkpoint", checkpoint, "--weak-manifest", os.path.join(data_dir, "weak.json"),
            "--out", pseudo_manifest)
        final = phase2(root, "phase2", data_dir, seed, steps, "--phase1-checkpoint", checkpoint,
                       "--pseudo-manifest", pseudo_manifest)
        run("evaluate", "--checkpoint", final, "--manifest", os.path.join(data_dir, "val.json"),
            "--mode", "standard", "--run-dir", os.path.join(root, "eval"))
    same = [
        filecmp.cmp(os.path.join(roots[0], rel), os.path.join(roots[1], rel), shallow=False)
        for rel in (os.path.join("eval", "report.json"), os.path.join("data", "pseudo.json"))
    ]
    return all(same)


EXPERIMENTS = {"overfit": overfit, "conditioning": conditioning, "pseudo": pseudo, "determinism": determinism}

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("experiment", choices=[*EXPERIMENTS, "all"], default="all", nargs="?")
    parser.add_argument("--seeds", default="7,8,9")
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out", default="./runs/experiments")
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    selected = EXPERIMENTS if args.experiment == "all" else {args.experiment: EXPERIMENTS[args.experiment]}
    results = {name: fn(args.out, seeds, args.steps) for name, fn in selected.items()}
    for name, passed in results.items():
        print(f"{name}: {'PASS' if passed else 'FAIL'}")
    sys.exit(0 if all(results.values()) else 1)

#!/usr/bin/env python3
"""End-to-end synthetic experiment: generate the planted dataset, train the
supervised and unsupervised models, evaluate keyshot summaries on the test
split, and print the refinement-vs-baseline comparison.

Usage:
    python3 scripts/run_synthetic_experiment.py --workdir /tmp/videograph-exp

Everything is deterministic for a fixed --seed; the workdir is safe to
delete afterwards.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from videograph import cli  # noqa: E402
from videograph import data as data_mod  # noqa: E402
from videograph import model as model_mod  # noqa: E402
from videograph import training as train_mod  # noqa: E402

CONFIG = REPO / "configs" / "synthetic.cfg"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--ablation-seeds", type=int, default=3,
                    help="training seeds per arm of the K=5 vs K=0 comparison")
    args = ap.parse_args()

    work = Path(args.workdir)
    data_dir = work / "data"
    rc = cli.main([
        "synth", "--out", str(data_dir), "--videos", "8", "--frames", "64",
        "--objects", "6", "--events", "4", "--seed", str(args.seed),
    ])
    if rc != 0:
        return rc

    rc = cli.main([
        "train", "--data", str(data_dir), "--out", str(work / "supervised"),
        "--config", str(CONFIG), "--mode", "sup-bin", "--epochs", str(args.epochs),
        "--seed", str(args.seed),
    ])
    if rc != 0:
        return rc

    split = data_mod.read_split(data_dir / "split.txt")
    preds = work / "predictions"
    for vid in split.test:
        rc = cli.main([
            "summarize", "--checkpoint", str(work / "supervised" / "checkpoint.vgck"),
            "--container", str(data_dir / f"{vid}.vgf"), "--out", str(preds),
            "--config", str(CONFIG), "--plot-data",
        ])
        if rc != 0:
            return rc
    print("\n== supervised test-split evaluation ==")
    rc = cli.main(["eval", "--pred", str(preds), "--gt", str(data_dir)])
    if rc != 0:
        return rc

    print("\n== refinement ablation (mean test F) ==")
    videos = {v.stem: data_mod.read_features(v) for v in sorted(data_dir.glob("*.vgf"))}
    train_v = [videos[v] for v in split.train]
    val_v = [videos[v] for v in split.val]
    test_v = [videos[v] for v in split.test]
    model_cfg, train_cfg, weights = cli.build_configs(
        argparse.Namespace(
            config=str(CONFIG), mode="sup-bin", seed=None, iterations=None,
            objects=None, words=None, query_mode=None, budget=None,
            aggregation=None, epochs=args.epochs,
        )
    )
    for k in (0, 5):
        cfg_k = dataclasses.replace(model_cfg, refine_iters=k)
        scores = []
        for seed in range(args.ablation_seeds):
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            result = train_mod.train(train_v, val_v, cfg_k, tcfg, weights)
            params = model_mod.ModelParams(cfg_k, seed=seed)
            result.checkpoint.load_into(params)
            per_video = []
            for fs in test_v:
                clip = train_mod.prepare_clip(fs, tcfg.clip_frames)
                pred = train_mod.predict_scores(params, clip)
                per_video.append(
                    train_mod.evaluate_against_groundtruth(pred, fs, clip, tcfg).f_score
                )
            scores.append(float(np.mean(per_video)))
        print(f"  K={k}: per-seed {[round(s, 3) for s in scores]} mean={np.mean(scores):.3f}")

    print("\n== unsupervised training ==")
    rc = cli.main([
        "train", "--data", str(data_dir), "--out", str(work / "unsupervised"),
        "--config", str(CONFIG), "--mode", "unsup", "--epochs", str(args.epochs),
        "--seed", str(args.seed),
    ])
    return rc


if __name__ == "__main__":
    sys.exit(main())

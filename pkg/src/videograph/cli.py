"""Command-line entry point: synthetic data generation, training, summary
generation, batch evaluation, and gradient checking.

Every command writes a JSON run manifest (command, resolved config, seed,
git describe, timestamps, output paths) next to its outputs; primary
outputs are byte-identical across reruns with the same flags and seed.
Config files are plain ``key = value`` text with dotted namespaces
(``model.frames``, ``train.epochs``, ``loss.alpha``); flags override file
values.  Exit codes: 0 success, 1 runtime/validation failure, 2 usage.

The VIDEOGRAPH_THREADS environment variable caps the evaluation worker
pool (default 1; results are reduced in fixed video order either way).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from videograph import data as data_mod
from videograph import evaluation as eval_mod
from videograph import losses as losses_mod
from videograph import model as model_mod
from videograph import training as train_mod
from videograph.engine import gradient_check
from videograph.errors import ConfigError, ParseError, StateError

MODE_FLAGS = {"sup-bin": "supervised_binary", "sup-score": "supervised_score", "unsup": "unsupervised"}


class UsageError(ValueError):
    """Invalid flag values; maps to exit code 2."""


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("VIDEOGRAPH_THREADS", "1")))
    except ValueError:
        return 1


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir: Path, command: str, args_ns, config: dict, outputs: list, started: float):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": getattr(args_ns, "seed", None),
        "config": config,
        "git_describe": git_describe(),
        "started_at": started,
        "finished_at": time.time(),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _apply_namespace(instance, values: dict, namespace: str):
    for fld in dataclasses.fields(instance):
        key = f"{namespace}.{fld.name}"
        if key not in values:
            continue
        raw = values[key]
        if fld.type in ("int", int):
            parsed = int(raw)
        elif fld.type in ("float", float):
            parsed = float(raw)
        elif fld.type in ("bool", bool):
            parsed = raw.lower() in ("1", "true", "yes", "on")
        else:
            parsed = raw
        setattr(instance, fld.name, parsed)
    return instance


def build_configs(args) -> tuple[model_mod.ModelConfig, train_mod.TrainConfig, losses_mod.LossWeights]:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    model_cfg = _apply_namespace(model_mod.ModelConfig(), values, "model")
    train_cfg = _apply_namespace(train_mod.TrainConfig(), values, "train")
    mode = MODE_FLAGS[getattr(args, "mode", None) or "sup-bin"]
    if "loss.mode" in values and getattr(args, "mode", None) is None:
        mode = values["loss.mode"]
    if mode == "unsupervised":
        weights = losses_mod.LossWeights.unsupervised()
    else:
        weights = losses_mod.LossWeights.supervised(mode)
    weights = _apply_namespace(weights, values, "loss")
    weights.mode = mode

    if getattr(args, "seed", None) is not None:
        train_cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        model_cfg.refine_iters = args.iterations
    if getattr(args, "objects", None) is not None:
        model_cfg.objects = args.objects
    if getattr(args, "words", None) is not None:
        model_cfg.words = args.words
    if getattr(args, "query_mode", None) is not None:
        model_cfg.query_mode = args.query_mode
    if getattr(args, "budget", None) is not None:
        train_cfg.budget_ratio = args.budget
    if getattr(args, "aggregation", None) is not None:
        train_cfg.aggregation = args.aggregation
    if getattr(args, "epochs", None) is not None:
        train_cfg.epochs = args.epochs
    model_cfg.validate()
    train_cfg.validate()
    weights.validate()
    return model_cfg, train_cfg, weights


def config_snapshot(model_cfg, train_cfg, weights) -> dict:
    return {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "loss": dataclasses.asdict(weights),
    }


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        base = data_mod.SyntheticSpec(
            frames=args.frames, objects=args.objects, d_obj=args.d_obj,
            n_events=args.events, keyframe_ratio=args.ratio,
            noise_sigma=args.noise, seed=args.seed, users=args.users,
            query_mode=args.query_mode, d_word=args.d_word,
        ).validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.videos < 3:
        raise UsageError("need at least 3 videos for train/val/test splits")

    outputs = []
    ids = []
    for i in range(args.videos):
        spec = dataclasses.replace(base, video_index=i)
        fs = data_mod.generate_synthetic(spec)
        path = out_dir / f"{fs.video_id}.vgf"
        data_mod.write_features(fs, path)
        outputs.append(path)
        ids.append(fs.video_id)

    n_test = max(1, round(0.25 * args.videos))
    n_val = max(1, round(0.125 * args.videos))
    split = data_mod.SplitConfig(
        train=ids[: args.videos - n_val - n_test],
        val=ids[args.videos - n_val - n_test: args.videos - n_test],
        test=ids[args.videos - n_test:],
    )
    split_path = out_dir / "split.txt"
    data_mod.write_split(split, split_path)
    outputs.append(split_path)
    write_manifest(out_dir, "synth", args, dataclasses.asdict(base), outputs, started)
    print(f"wrote {args.videos} containers to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def load_dataset(data_dir: Path):
    split = data_mod.read_split(data_dir / "split.txt")
    videos = {}
    for path in sorted(data_dir.glob("*.vgf")):
        fs = data_mod.read_features(path)
        videos[fs.video_id] = fs
    missing = [vid for vid in split.train + split.val + split.test if vid not in videos]
    if missing:
        raise ConfigError(f"split references missing containers: {missing}")
    return split, videos


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg, weights = build_configs(args)
    split, videos = load_dataset(data_dir)
    train_videos = [videos[v] for v in split.train]
    val_videos = [videos[v] for v in split.val]

    def log(epoch, components, val_metric):
        parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(components.items()))
        metric_name = "val_loss" if weights.mode == "unsupervised" else "val_f"
        print(f"epoch {epoch:3d} {parts} {metric_name}={val_metric:.4f}")

    result = train_mod.train(train_videos, val_videos, model_cfg, train_cfg, weights, log=log)

    ck_path = out_dir / "checkpoint.vgck"
    final_path = out_dir / "final.vgck"
    train_mod.save_checkpoint(result.checkpoint, ck_path)
    train_mod.save_checkpoint(result.final, final_path)
    history_path = out_dir / "history.json"
    history_path.write_text(json.dumps(
        {"loss": result.history, "validation": result.val_history, "best_epoch": result.best_epoch},
        indent=2, sort_keys=True,
    ) + "\n")
    outputs = [ck_path, final_path, history_path]
    write_manifest(out_dir, "train", args, config_snapshot(model_cfg, train_cfg, weights), outputs, started)
    print(f"best epoch {result.best_epoch}; checkpoint at {ck_path}")
    return 0


# ---------------------------------------------------------------------------
# summarize


def resolve_word_query(fs: data_mod.FeatureSet, tokens: list[str], n_words: int):
    """Map override words onto stored query rows (frequency-ranked order).

    Unknown words are dropped with a warning; when none remain the null
    query (all-zero word vectors) is used.
    """
    ranked, _, _ = data_mod.select_word_queries(fs, max(n_words, len(tokens)))
    rows = []
    for token in tokens:
        if token in ranked and ranked.index(token) < (fs.query_vectors.shape[0] if fs.query_vectors is not None else 0):
            rows.append(fs.query_vectors[ranked.index(token)])
        else:
            warnings.warn(f"unknown query word {token!r}; ignored")
    if not rows:
        warnings.warn("no usable query words; falling back to the null query")
        dim = fs.query_vectors.shape[1] if fs.query_vectors is not None else 1
        return np.zeros((1, dim), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def cmd_summarize(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg, weights = build_configs(args)
    fs = data_mod.read_features(args.container)
    ck = train_mod.load_checkpoint(args.checkpoint)
    params = model_mod.ModelParams(model_cfg, seed=train_cfg.seed)
    ck.load_into(params)

    clip = train_mod.prepare_clip(fs, train_cfg.clip_frames)
    query = clip.query_vectors
    if args.query:
        tokens = [t for t in args.query.split(",") if t]
        if model_cfg.query_mode == "word":
            query = resolve_word_query(fs, tokens, model_cfg.words)
        else:
            warnings.warn("--query override only applies to word mode; ignored")
    result = model_mod.forward(clip.objects, params, query_vectors=query, n_valid=clip.n_valid)
    pred = result.scores.probs[: clip.n_valid, 1]

    budget = args.budget if args.budget is not None else train_cfg.budget_ratio
    feat_clip = fs.frame_features()[clip.sample_idx]
    summary = eval_mod.scores_to_keyshots(
        pred, features=feat_clip, budget_ratio=budget,
        picks=clip.picks, n_frames_original=fs.n_frames_original,
    )
    final_spatial = result.diag.spatial_op.data
    dom, dom_degenerate = eval_mod.dominance(final_spatial)

    stem = fs.video_id
    summary_json = out_dir / f"{stem}.summary.json"
    summary_json.write_text(json.dumps({
        "video_id": stem,
        "budget_ratio": budget,
        "scores": [float(s) for s in pred],
        "picks": [int(p) for p in clip.picks],
        "n_frames_original": fs.n_frames_original,
        "keyshot": [int(v) for v in summary.vector],
        "selected_segments": summary.selected_segments,
        "keyframes": result.scores.keyframe_set,
    }, indent=2, sort_keys=True) + "\n")

    scores_txt = out_dir / f"{stem}.scores.txt"
    with scores_txt.open("w") as fh:
        for t, s in enumerate(pred):
            fh.write(f"{t}\t{s:.10f}\n")

    dom_txt = out_dir / f"{stem}.dominance.txt"
    with dom_txt.open("w") as fh:
        fh.write(f"# degenerate={int(dom_degenerate)}\n")
        for t in range(dom.shape[0]):
            row = "\t".join(f"{v:.6f}" for v in dom[t])
            fh.write(f"{t}\t{row}\n")

    outputs = [summary_json, scores_txt, dom_txt]
    if args.plot_data:
        plot_path = out_dir / f"{stem}.plot.txt"
        with plot_path.open("w") as fh:
            fh.write("# frame score\n")
            for t, s in enumerate(pred):
                fh.write(f"{t} {s:.10f}\n")
            fh.write("# shot start end\n")
            in_shot = False
            for t, v in enumerate(list(summary.vector) + [0]):
                if v and not in_shot:
                    shot_start, in_shot = t, True
                elif not v and in_shot:
                    fh.write(f"shot {shot_start} {t}\n")
                    in_shot = False
        outputs.append(plot_path)

    write_manifest(out_dir, "summarize", args, config_snapshot(model_cfg, train_cfg, weights), outputs, started)
    print(f"summary for {stem}: {int(summary.vector.sum())}/{len(summary.vector)} frames selected")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    started = time.time()
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_files = sorted(pred_dir.glob("*.summary.json"))
    if not pred_files:
        print("no predictions found", file=sys.stderr)
        return 1

    jobs = []
    missing = []
    for pf in pred_files:
        payload = json.loads(pf.read_text())
        gt_path = gt_dir / f"{payload['video_id']}.vgf"
        if not gt_path.exists():
            missing.append(payload["video_id"])
            continue
        jobs.append((payload, gt_path))
    for vid in missing:
        print(f"missing groundtruth for {vid}; excluded", file=sys.stderr)
    if not jobs:
        return 1

    def evaluate(job):
        payload, gt_path = job
        fs = data_mod.read_features(gt_path)
        pred_vec = np.asarray(payload["keyshot"], dtype=np.uint8)
        pred_summary = eval_mod.KeyshotSummary(
            vector=pred_vec, selected_segments=payload.get("selected_segments", []),
            budget_ratio=payload.get("budget_ratio", 0.15),
        )
        picks = np.asarray(payload["picks"], dtype=np.int64)
        idx = np.searchsorted(fs.picks.astype(np.int64), picks)
        feat = fs.frame_features()[idx]
        rows = fs.gt_scores if fs.gt_scores is not None else np.atleast_2d(fs.gt_binary)
        gts = [
            eval_mod.scores_to_keyshots(
                np.asarray(row, dtype=np.float64)[idx], features=feat,
                budget_ratio=pred_summary.budget_ratio,
                picks=picks, n_frames_original=fs.n_frames_original,
            )
            for row in np.atleast_2d(rows)
        ]
        report = eval_mod.prf(pred_summary, gts, aggregation=args.aggregation)
        scores = np.asarray(payload["scores"], dtype=np.float64)
        if fs.gt_scores is not None:
            tau, rho, degenerate = eval_mod.rank_correlations(
                scores, fs.gt_scores.astype(np.float64)[:, idx]
            )
            report.kendall_tau, report.spearman_rho = tau, rho
            report.degenerate_rank = degenerate
        return payload["video_id"], report

    workers = thread_cap()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, jobs))
    else:
        results = [evaluate(j) for j in jobs]

    lines = []
    table = {}
    for vid, report in results:
        table[vid] = report.as_dict()
        lines.append(
            f"{vid}: P={report.precision:.4f} R={report.recall:.4f} F={report.f_score:.4f} "
            f"tau={report.kendall_tau:.4f} rho={report.spearman_rho:.4f}"
        )
    mean = {
        key: float(np.mean([row[key] for row in table.values()]))
        for key in ("precision", "recall", "f_score", "kendall_tau", "spearman_rho")
    }
    lines.append(
        f"mean: P={mean['precision']:.4f} R={mean['recall']:.4f} F={mean['f_score']:.4f} "
        f"tau={mean['kendall_tau']:.4f} rho={mean['spearman_rho']:.4f}"
    )
    print("\n".join(lines))

    report_txt = out_dir / "report.txt"
    with report_txt.open("w") as fh:
        for vid in sorted(table):
            for key, value in sorted(table[vid].items()):
                if isinstance(value, float):
                    fh.write(f"{vid}.{key}={value:.6f}\n")
                else:
                    fh.write(f"{vid}.{key}={value}\n")
        for key, value in sorted(mean.items()):
            fh.write(f"mean.{key}={value:.6f}\n")
    report_json = out_dir / "report.json"
    report_json.write_text(json.dumps({"videos": table, "mean": mean}, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, "eval", args, {"aggregation": args.aggregation}, [report_txt, report_json], started)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from videograph.engine import Parameter, Tensor
    from videograph import engine

    started = time.time()
    failures = []
    rng = np.random.default_rng(args.seed or 0)

    def check(name, fn, params, eps):
        err = gradient_check(fn, params, eps=eps)
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:30s} max_rel_err={err:.3e} {status}")
        if err > args.tolerance:
            failures.append(name)

    x = Tensor(rng.normal(size=(4, 3)))
    w = Parameter(rng.normal(size=(3, 3)), "w")
    battery = {
        "matmul": lambda: engine.sum_all(engine.square(engine.matmul(x, w.value))),
        "row_softmax": lambda: engine.sum_all(engine.square(engine.row_softmax(engine.matmul(x, w.value), 1.6))),
        "graph_conv": lambda: engine.sum_all(engine.square(engine.graph_conv(
            x, engine.row_softmax(engine.matmul(engine.matmul(x, w.value), engine.transpose(x)), 1.0),
            w.value, activation="elu"))),
        "cosine_affinity": lambda: engine.sum_all(engine.square(engine.cosine_affinity(x, w.value, w.value))),
        "node_norm": lambda: engine.sum_all(engine.square(engine.node_norm(
            engine.matmul(x, w.value), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3)))))),
        "sigmoid": lambda: engine.sum_all(engine.sigmoid(engine.matmul(x, w.value))),
        "elu": lambda: engine.sum_all(engine.elu(engine.matmul(x, w.value))),
    }
    for name, fn in battery.items():
        check(f"op.{name}", fn, [w], args.eps)

    cfg = model_mod.ModelConfig(
        frames=args.frames, objects=args.objects, d_obj=5, d_embed=5, d_model=4,
        heads=2, d_head=3, gcn_layers=2, refine_iters=args.iterations,
        lambda_frame=2.0, query_mode=args.query_mode or "none",
        words=2, d_word=3, captions=2, d_caption=4,
    )
    params = model_mod.ModelParams(cfg, seed=args.seed or 0)
    objects = rng.normal(size=(args.frames, args.objects, 5))
    qvecs = None
    if cfg.query_mode == "word":
        qvecs = rng.normal(size=(2, 3))
    elif cfg.query_mode == "sentence":
        qvecs = rng.normal(size=(2, 4))
    gt = (rng.uniform(size=args.frames) > 0.6).astype(np.float64)
    gt[0], gt[1] = 1.0, 0.0
    mode = MODE_FLAGS[args.mode or "sup-bin"]
    weights = (losses_mod.LossWeights.unsupervised() if mode == "unsupervised"
               else losses_mod.LossWeights.supervised(mode))
    base = model_mod.forward(objects, params, query_vectors=qvecs)
    selection = losses_mod.select_training_keyframes(base.scores.probs, weights.mode)

    def full():
        res = model_mod.forward(objects, params, query_vectors=qvecs)
        total, _, _ = losses_mod.compute_loss(
            res.diag, objects, params, weights,
            gt_binary=gt, gt_scores=np.atleast_2d(gt), selection=selection,
        )
        return total

    check("full_model", full, params.parameters(), min(args.eps, 1e-6))

    print(f"gradcheck finished in {time.time() - started:.1f}s; {len(failures)} failure(s)")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videograph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate planted synthetic containers")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--events", type=int, default=4)
    p.add_argument("--d-obj", type=int, default=64)
    p.add_argument("--ratio", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--users", type=int, default=1)
    p.add_argument("--query-mode", choices=["none", "word", "sentence"], default="word")
    p.add_argument("--d-word", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a container directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--words", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--aggregation", choices=["max", "mean"])
    p.add_argument("--query-mode", choices=["none", "word", "sentence"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("summarize", help="summarize one container with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--container", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--query", help="comma-separated word-query override")
    p.add_argument("--plot-data", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--words", type=int)
    p.add_argument("--aggregation", choices=["max", "mean"])
    p.add_argument("--query-mode", choices=["none", "word", "sentence"])
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("eval", help="batch-evaluate predictions against groundtruth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--aggregation", choices=["max", "mean"], default="mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run per-op and full-model gradient checks")
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--query-mode", choices=["none", "word", "sentence"])
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, StateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

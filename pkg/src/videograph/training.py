"""Optimization loop, learning-rate schedule, batching, checkpoint I/O.

Training is bitwise reproducible for a fixed seed: shuffling uses one
seeded generator, per-batch gradients accumulate in fixed video order and
are averaged, and all math is float64 numpy.  Videos longer than the clip
length are uniformly subsampled; shorter ones are zero-padded with a
validity count so padded frames never touch a softmax or a loss.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from videograph import losses as losses_mod
from videograph import model as model_mod
from videograph.data import FeatureSet
from videograph.errors import ConfigError, ParseError
from videograph.evaluation import prf, scores_to_keyshots
from videograph.losses import LossWeights
from videograph.model import ModelConfig, ModelParams
from videograph.engine import Tape

CHECKPOINT_MAGIC = b"VGCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 5
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_frames: int = 320
    grad_clip_norm: float = 5.0
    budget_ratio: float = 0.15
    aggregation: str = "mean"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.clip_frames < 1:
            raise ConfigError("batch_size and clip_frames must be >= 1")
        return self

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.value.data) for p in params.parameters()],
            v=[np.zeros_like(p.value.data) for p in params.parameters()],
        )


def adam_step(params: ModelParams, state: AdamState, lr: float, cfg: TrainConfig):
    """One bias-corrected adaptive-moment update over every parameter.

    A non-finite gradient anywhere rejects the whole step (moments and
    parameters untouched) with a warning.
    """
    plist = params.parameters()
    for p in plist:
        if not np.isfinite(p.grad).all():
            warnings.warn(f"non-finite gradient in {p.name}; step rejected")
            return False
    state.t += 1
    t = state.t
    for i, p in enumerate(plist):
        g = p.grad
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g
        m_hat = state.m[i] / (1 - cfg.beta1**t)
        v_hat = state.v[i] / (1 - cfg.beta2**t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return True


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    total = 0.0
    for p in params.parameters():
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.parameters():
            p.value.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# clips


@dataclass
class Clip:
    objects: np.ndarray          # (clip_frames, N, d_obj) float64, zero-padded
    n_valid: int
    sample_idx: np.ndarray       # valid clip frame -> index into the FeatureSet grid
    picks: np.ndarray            # valid clip frame -> original video frame
    gt_binary: np.ndarray | None
    gt_scores: np.ndarray | None
    query_vectors: np.ndarray | None
    video_id: str = ""


def prepare_clip(fs: FeatureSet, clip_frames: int) -> Clip:
    """Uniformly subsample long videos; zero-pad short ones with a mask."""
    t = fs.n_frames
    if t > clip_frames:
        idx = (np.arange(clip_frames, dtype=np.int64) * t) // clip_frames
        objects = fs.objects[idx].astype(np.float64)
        n_valid = clip_frames
    else:
        idx = np.arange(t, dtype=np.int64)
        objects = fs.objects.astype(np.float64)
        if t < clip_frames:
            pad = np.zeros((clip_frames - t,) + objects.shape[1:])
            objects = np.concatenate([objects, pad], axis=0)
        n_valid = t
    gt_binary = None if fs.gt_binary is None else fs.gt_binary.astype(np.float64)[idx]
    gt_scores = None if fs.gt_scores is None else fs.gt_scores.astype(np.float64)[:, idx]
    query = None if fs.query_vectors is None else fs.query_vectors.astype(np.float64)
    return Clip(
        objects=objects,
        n_valid=n_valid,
        sample_idx=idx,
        picks=fs.picks.astype(np.int64)[idx],
        gt_binary=gt_binary,
        gt_scores=gt_scores,
        query_vectors=query,
        video_id=fs.video_id,
    )


def check_dataset(videos: list[FeatureSet], model_cfg: ModelConfig, weights: LossWeights):
    """Reject dimension/groundtruth mismatches before any epoch runs."""
    if not videos:
        raise ConfigError("dataset is empty")
    for fs in videos:
        if fs.d_obj != model_cfg.d_obj:
            raise ConfigError(
                f"{fs.video_id}: object feature width {fs.d_obj} != model d_obj {model_cfg.d_obj}"
            )
        if model_cfg.query_mode != "none":
            if fs.query_vectors is None:
                raise ConfigError(f"{fs.video_id}: query mode {model_cfg.query_mode} but no vectors")
            width = model_cfg.d_word if model_cfg.query_mode == "word" else model_cfg.d_caption
            if fs.query_vectors.shape[1] != width:
                raise ConfigError(
                    f"{fs.video_id}: query width {fs.query_vectors.shape[1]} != configured {width}"
                )
        if weights.mode == "supervised_binary" and fs.gt_binary is None:
            raise ConfigError(f"{fs.video_id}: supervised_binary needs binary labels")
        if weights.mode == "supervised_score" and fs.gt_scores is None:
            raise ConfigError(f"{fs.video_id}: supervised_score needs importance scores")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    names: list[str]
    values: list
    m: list
    v: list
    step: int
    epoch: int
    rng_state: dict
    config_hash: str

    def load_into(self, params: ModelParams):
        if self.names != params.names():
            raise ConfigError("checkpoint parameter names do not match the model")
        for p, value in zip(params.parameters(), self.values):
            if p.value.data.shape != value.shape:
                raise ConfigError(f"checkpoint shape mismatch for {p.name}")
            p.value.data[...] = value


def snapshot(params: ModelParams, state: AdamState, epoch: int, rng, config_hash: str) -> Checkpoint:
    return Checkpoint(
        names=params.names(),
        values=[p.value.data.copy() for p in params.parameters()],
        m=[m.copy() for m in state.m],
        v=[v.copy() for v in state.v],
        step=state.t,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        config_hash=config_hash,
    )


def save_checkpoint(ck: Checkpoint, path):
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HIQ", CHECKPOINT_VERSION, ck.epoch, ck.step)
    out += bytes.fromhex(ck.config_hash)
    rng_blob = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(rng_blob)) + rng_blob
    out += struct.pack("<I", len(ck.names))
    for name, value, m, v in zip(ck.names, ck.values, ck.m, ck.v):
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += value.astype("<f8").tobytes()
        out += m.astype("<f8").tobytes()
        out += v.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"truncated checkpoint while reading {what}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic (expected VGCK)", 0)
    version, epoch, step = struct.unpack("<HIQ", take(14, "header"))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    config_hash = take(32, "config hash").hex()
    (rng_len,) = struct.unpack("<I", take(4, "rng length"))
    rng_state = json.loads(take(rng_len, "rng state").decode("utf-8"))
    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    names, values, ms, vs = [], [], [], []
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        names.append(take(name_len, "name").decode("utf-8"))
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        count = int(np.prod(shape))
        values.append(np.frombuffer(take(8 * count, "values"), "<f8").reshape(shape).copy())
        ms.append(np.frombuffer(take(8 * count, "m"), "<f8").reshape(shape).copy())
        vs.append(np.frombuffer(take(8 * count, "v"), "<f8").reshape(shape).copy())
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes", pos)
    return Checkpoint(names, values, ms, vs, step, epoch, rng_state, config_hash)


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights) -> str:
    text = json.dumps(
        {"model": vars(model_cfg), "train": vars(train_cfg), "loss": vars(weights)},
        sort_keys=True,
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# evaluation helpers used during training


def predict_scores(params: ModelParams, clip: Clip) -> np.ndarray:
    """Keyframe probability per valid frame (no tape)."""
    result = model_mod.forward(
        clip.objects, params, query_vectors=clip.query_vectors, n_valid=clip.n_valid
    )
    return result.scores.probs[: clip.n_valid, 1]


def validation_f_score(params: ModelParams, videos, train_cfg: TrainConfig) -> float:
    scores = []
    for fs in videos:
        clip = prepare_clip(fs, train_cfg.clip_frames)
        pred = predict_scores(params, clip)
        report = evaluate_against_groundtruth(pred, fs, clip, train_cfg)
        scores.append(report.f_score)
    return float(np.mean(scores)) if scores else 0.0


def evaluate_against_groundtruth(pred_scores: np.ndarray, fs: FeatureSet, clip: Clip, train_cfg: TrainConfig):
    """Keyshot F-score of predictions vs per-user groundtruth summaries."""
    feat_clip = fs.frame_features()[clip.sample_idx]
    pred_summary = scores_to_keyshots(
        pred_scores,
        features=feat_clip,
        budget_ratio=train_cfg.budget_ratio,
        picks=clip.picks,
        n_frames_original=fs.n_frames_original,
    )
    gts = groundtruth_keyshots(fs, clip, train_cfg)
    return prf(pred_summary, gts, aggregation=train_cfg.aggregation)


def groundtruth_keyshots(fs: FeatureSet, clip: Clip, train_cfg: TrainConfig):
    """Per-user keyshot groundtruth on the same segmentation as predictions."""
    feat_clip = fs.frame_features()[clip.sample_idx]
    rows = None
    if clip.gt_scores is not None:
        rows = np.atleast_2d(clip.gt_scores)
    elif clip.gt_binary is not None:
        rows = np.atleast_2d(clip.gt_binary)
    if rows is None:
        raise ConfigError(f"{fs.video_id}: no groundtruth for evaluation")
    return [
        scores_to_keyshots(
            row,
            features=feat_clip,
            budget_ratio=train_cfg.budget_ratio,
            picks=clip.picks,
            n_frames_original=fs.n_frames_original,
        )
        for row in rows
    ]


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final: Checkpoint
    history: list            # one dict of loss components per epoch
    val_history: list        # one float per epoch (F-score or unsup loss)
    best_epoch: int


def train(
    train_videos: list[FeatureSet],
    val_videos: list[FeatureSet],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: LossWeights,
    log=None,
) -> TrainResult:
    """Deterministic training run returning the best-validation checkpoint.

    Model selection uses validation F-score for supervised modes and total
    validation loss for unsupervised mode; ``checkpoint`` is the selected
    snapshot while ``final`` is the last epoch's state.
    """
    train_cfg.validate()
    weights.validate()
    check_dataset(train_videos + val_videos, model_cfg, weights)
    fingerprint = config_fingerprint(model_cfg, train_cfg, weights)

    params = ModelParams(model_cfg, seed=train_cfg.seed)
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.seed)
    clips = [prepare_clip(fs, train_cfg.clip_frames) for fs in train_videos]

    history = []
    val_history = []
    best_metric = None
    best = snapshot(params, adam, 0, rng, fingerprint)
    best_epoch = 0

    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = rng.permutation(len(clips))
        epoch_components: dict[str, list] = {}
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            params.zero_grads()
            for idx in batch:
                clip = clips[idx]
                with Tape() as tape:
                    result = model_mod.forward(
                        clip.objects, params,
                        query_vectors=clip.query_vectors, n_valid=clip.n_valid,
                    )
                    total, report, _ = losses_mod.compute_loss(
                        result.diag, clip.objects, params, weights,
                        gt_binary=clip.gt_binary, gt_scores=clip.gt_scores,
                    )
                    tape.backward(total)
                epoch_components.setdefault("total", []).append(report.total)
                for name, value in report.components.items():
                    epoch_components.setdefault(name, []).append(value)
            scale = 1.0 / len(batch)
            for p in params.parameters():
                p.value.grad *= scale
            clip_gradients(params, train_cfg.grad_clip_norm)
            adam_step(params, adam, lr, train_cfg)

        history.append({name: float(np.mean(vals)) for name, vals in epoch_components.items()})
        if weights.mode == "unsupervised":
            val_loss = validation_loss(params, val_videos or train_videos, train_cfg, weights)
            metric = (-val_loss,)
            val_history.append(val_loss)
        else:
            # F-score selects; the classification term alone breaks ties
            # (total loss would bury it under sparsity/reconstruction)
            val_f = validation_f_score(params, val_videos or train_videos, train_cfg)
            val_cls = validation_loss(
                params, val_videos or train_videos, train_cfg, weights, component="classification"
            )
            metric = (val_f, -val_cls)
            val_history.append(val_f)
        # >= so equal validation scores prefer the later (more trained) epoch
        if best_metric is None or metric >= best_metric:
            best_metric = metric
            best = snapshot(params, adam, epoch + 1, rng, fingerprint)
            best_epoch = epoch
        if log:
            log(epoch, history[-1], val_history[-1])

    final = snapshot(params, adam, train_cfg.epochs, rng, fingerprint)
    return TrainResult(
        checkpoint=best, final=final, history=history,
        val_history=val_history, best_epoch=best_epoch,
    )


def validation_loss(
    params: ModelParams, videos, train_cfg: TrainConfig, weights: LossWeights,
    component: str | None = None,
) -> float:
    totals = []
    for fs in videos:
        clip = prepare_clip(fs, train_cfg.clip_frames)
        result = model_mod.forward(
            clip.objects, params, query_vectors=clip.query_vectors, n_valid=clip.n_valid
        )
        _, report, _ = losses_mod.compute_loss(
            result.diag, clip.objects, params, weights,
            gt_binary=clip.gt_binary, gt_scores=clip.gt_scores,
        )
        totals.append(report.total if component is None else report.components[component])
    return float(np.mean(totals)) if totals else 0.0

"""Training objectives: classification, adjacency sparsity, reconstruction,
diversity, and their weighted combinations for supervised and unsupervised
modes.  Every loss is built from engine ops, so gradients flow back through
the forward pass; the keyframe selection feeding reconstruction/diversity
is a stop-gradient index set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from videograph import engine
from videograph.engine import DomainError, Tensor
from videograph.errors import ConfigError
from videograph.model import ForwardDiagnostics, ModelParams

MODES = ("supervised_binary", "supervised_score", "unsupervised")
SELECTION_RATIO = 0.15
PROB_CLAMP = 1e-7

_KEYFRAME_COLUMN = np.array([[0.0], [1.0]])


@dataclass
class LossWeights:
    """Trade-off weights; defaults are the published per-mode settings."""

    mode: str = "supervised_binary"
    alpha: float = 0.0001   # sparsity
    beta: float = 0.1       # diversity
    gamma: float = 0.1      # reconstruction
    rho: float = 5.0        # temporal-vs-spatial entropy balance
    diversity_norm: str = "squared"   # squared (as printed) or plain

    @classmethod
    def supervised(cls, mode: str = "supervised_binary") -> "LossWeights":
        return cls(mode=mode, alpha=0.0001, beta=0.1, gamma=0.1, rho=5.0)

    @classmethod
    def unsupervised(cls) -> "LossWeights":
        return cls(mode="unsupervised", alpha=0.001, beta=10.0, gamma=10.0, rho=5.0)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"loss mode {self.mode!r} not in {MODES}")
        for name in ("alpha", "beta", "gamma", "rho"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.diversity_norm not in ("squared", "plain"):
            raise ConfigError(f"diversity_norm {self.diversity_norm!r} invalid")
        return self


@dataclass
class LossReport:
    total: float
    components: dict = field(default_factory=dict)


def keyframe_probs(probs: Tensor) -> Tensor:
    """Column 1 of the (T, 2) probability matrix as a (T, 1) tensor."""
    return engine.matmul(probs, Tensor(_KEYFRAME_COLUMN))


def weighted_bce(probs: Tensor, labels) -> Tensor:
    """Class-frequency-weighted binary cross entropy on keyframe probability.

    Frame weights are median-frequency / class-frequency with the median
    frequency fixed at 0.5; a label vector with only one class present
    falls back to unit weights with a warning.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    t = labels.shape[0]
    if probs.shape[0] != t:
        raise engine.DimensionError(f"{probs.shape[0]} probability rows vs {t} labels")
    n_key = labels.sum()
    if n_key == 0 or n_key == t:
        warnings.warn("labels are single-class; weighted BCE using unit weights")
        w = np.ones(t)
    else:
        freq_key = n_key / t
        w = np.where(labels > 0, 0.5 / freq_key, 0.5 / (1.0 - freq_key))
    y = keyframe_probs(probs)
    y_true = Tensor(labels.reshape(-1, 1))
    pos = engine.mul(y_true, engine.log(engine.maximum(y, PROB_CLAMP)))
    neg = engine.mul(
        engine.sub(1.0, y_true),
        engine.log(engine.maximum(engine.sub(1.0, y), PROB_CLAMP)),
    )
    weighted = engine.mul(Tensor(w.reshape(-1, 1)), engine.add(pos, neg))
    return engine.mul(engine.sum_all(weighted), -1.0 / t)


def score_mse(pred: Tensor, target) -> Tensor:
    """Mean squared error between predicted and annotated importance scores."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    if pred.shape[0] != target.shape[0]:
        raise engine.DimensionError(f"{pred.shape[0]} predictions vs {target.shape[0]} targets")
    diff = engine.sub(pred, Tensor(target))
    return engine.mul(engine.sum_all(engine.square(diff)), 1.0 / target.shape[0])


def sparsity_entropy(spatial_op: Tensor, temporal_op: Tensor, rho: float) -> Tensor:
    """Off-diagonal entropy of the operational adjacencies.

    Returns entropy(spatial graphs) + rho * entropy(temporal graph); the
    diagonal (self-edge) terms are excluded from both sums.
    """
    if (spatial_op.data <= 0).any() or (temporal_op.data <= 0).any():
        raise DomainError("sparsity entropy needs strictly positive adjacency entries")
    n = spatial_op.shape[-1]
    t = temporal_op.shape[-1]
    off_s = Tensor(1.0 - np.eye(n))
    off_t = Tensor(1.0 - np.eye(t))
    ent_s = engine.mul(
        engine.sum_all(engine.mul(off_s, engine.mul(spatial_op, engine.log(spatial_op)))), -1.0
    )
    ent_t = engine.mul(
        engine.sum_all(engine.mul(off_t, engine.mul(temporal_op, engine.log(temporal_op)))), -1.0
    )
    return engine.add(ent_s, engine.mul(ent_t, rho))


def reconstruct(selected: Tensor, originals, params: ModelParams):
    """Decode selected frame representations back to detector-feature space.

    The decoder expands to d_obj, is concatenated with the original frame
    features (mean over that frame's object features), and projected once
    more.  Returns (reconstruction, mean squared error).
    """
    originals = np.asarray(originals, dtype=np.float64)
    k = selected.shape[0]
    if k < 1:
        raise ConfigError("reconstruct needs at least one selected frame")
    if originals.shape != (k, params.cfg.d_obj):
        raise engine.DimensionError(
            f"originals shape {originals.shape} != ({k}, {params.cfg.d_obj})"
        )
    dec = engine.linear(selected, params.recon_dec.w)
    dec = engine.node_norm(dec, params.recon_dec.gain.value, params.recon_dec.bias.value, axis=0)
    dec = engine.elu(dec)
    orig_t = Tensor(originals)
    joined = engine.concat([dec, orig_t], axis=1)
    recon = engine.linear(joined, params.recon_out_w, params.recon_out_b)
    loss = engine.mul(engine.sum_all(engine.square(engine.sub(orig_t, recon))), 1.0 / k)
    return recon, loss


def diversity(recon: Tensor, norm: str = "squared") -> Tensor:
    """Repelling regularizer: mean pairwise similarity of reconstructions.

    ``squared`` divides each inner product by the product of squared norms
    (as printed in the source formulation); ``plain`` uses cosine
    similarity.  Zero rows fall back to a 1e-8 denominator.
    """
    k = recon.shape[0]
    if k < 2:
        raise ConfigError("diversity needs at least two selected frames")
    gram = engine.matmul(recon, engine.transpose(recon))
    sq = engine.sum_axis(engine.square(recon), -1)
    if norm == "squared":
        denom_vec = engine.maximum(sq, engine.NORM_EPS)
    elif norm == "plain":
        denom_vec = engine.maximum(engine.sqrt(sq), engine.NORM_EPS)
    else:
        raise ConfigError(f"diversity_norm {norm!r} invalid")
    denom = engine.mul(denom_vec, engine.transpose(denom_vec))
    ratios = engine.div(gram, denom)
    off = Tensor(1.0 - np.eye(k))
    return engine.mul(engine.sum_all(engine.mul(off, ratios)), 1.0 / (k * (k - 1)))


def total_loss(parts: dict, weights: LossWeights):
    """Weighted sum of loss components per the configured mode."""
    weights.validate()
    required = {"sparsity", "diversity", "reconstruction"}
    if weights.mode != "unsupervised":
        required.add("classification")
    missing = required - set(parts)
    if missing:
        raise ConfigError(f"loss parts missing {sorted(missing)} for mode {weights.mode}")
    total = engine.mul(parts["sparsity"], weights.alpha)
    total = engine.add(total, engine.mul(parts["diversity"], weights.beta))
    total = engine.add(total, engine.mul(parts["reconstruction"], weights.gamma))
    if weights.mode != "unsupervised":
        total = engine.add(total, parts["classification"])
    report = LossReport(
        total=total.item(),
        components={name: part.item() for name, part in parts.items()},
    )
    return total, report


def select_training_keyframes(probs: np.ndarray, mode: str, ratio: float = SELECTION_RATIO):
    """Stop-gradient keyframe index set used by reconstruction/diversity.

    Supervised modes use the predicted argmax set, falling back to the
    top-``ratio`` frames when it is empty; unsupervised mode always takes
    the top-``ratio`` frames by keyframe probability.  Ties break toward
    lower frame indices.
    """
    p1 = probs[:, 1]
    t = p1.shape[0]
    k = max(1, math.ceil(ratio * t))
    if mode.startswith("supervised"):
        chosen = np.nonzero(p1 > probs[:, 0])[0]
        if chosen.size:
            return [int(i) for i in chosen]
    order = np.argsort(-p1, kind="stable")[:k]
    return sorted(int(i) for i in order)


def compute_loss(
    diag: ForwardDiagnostics,
    objects: np.ndarray,
    params: ModelParams,
    weights: LossWeights,
    gt_binary=None,
    gt_scores=None,
    selection=None,
):
    """Assemble every loss term for one clip.

    ``objects`` is the raw (T, N, d_obj) input (only the valid prefix is
    read); ``selection`` overrides the stop-gradient keyframe set, which
    keeps finite-difference checks off the discrete selection boundary.
    Returns (total tensor, report, selection used).
    """
    tv = diag.n_valid
    parts = {}
    if weights.mode == "supervised_binary":
        if gt_binary is None:
            raise ConfigError("supervised_binary needs binary labels")
        parts["classification"] = weighted_bce(diag.probs, np.asarray(gt_binary)[:tv])
    elif weights.mode == "supervised_score":
        if gt_scores is None:
            raise ConfigError("supervised_score needs importance scores")
        target = np.asarray(gt_scores, dtype=np.float64)
        if target.ndim == 2:
            target = target.mean(axis=0)
        parts["classification"] = score_mse(keyframe_probs(diag.probs), target[:tv])

    parts["sparsity"] = sparsity_entropy(diag.spatial_op, diag.temporal_op, weights.rho)

    if selection is None:
        selection = select_training_keyframes(diag.probs.data, weights.mode)
    selection = [int(i) for i in selection if 0 <= int(i) < tv]
    if not selection:
        warnings.warn("empty keyframe selection; reconstruction/diversity = 0")
        parts["reconstruction"] = Tensor([0.0])
        parts["diversity"] = Tensor([0.0])
    else:
        selector = np.zeros((len(selection), tv))
        selector[np.arange(len(selection)), selection] = 1.0
        selected = engine.matmul(Tensor(selector), diag.frame_reps)
        originals = np.asarray(objects, dtype=np.float64)[selection].mean(axis=1)
        recon, recon_loss = reconstruct(selected, originals, params)
        parts["reconstruction"] = recon_loss
        if len(selection) >= 2:
            parts["diversity"] = diversity(recon, weights.diversity_norm)
        else:
            warnings.warn("single-frame selection; diversity = 0")
            parts["diversity"] = Tensor([0.0])

    total, report = total_loss(parts, weights)
    return total, report, selection

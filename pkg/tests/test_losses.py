"""Loss identities against hand values and closed forms, plus gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videograph import engine, losses
from videograph.engine import Parameter, Tape, Tensor, gradient_check
from videograph.errors import ConfigError
from videograph.model import ModelConfig, ModelParams


def test_weighted_bce_perfect_predictions_near_zero():
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    probs = np.stack([1.0 - labels, labels], axis=1)
    probs = np.clip(probs, 1e-9, 1 - 1e-9)
    loss = losses.weighted_bce(Tensor(probs), labels)
    assert loss.item() <= 1e-6


def test_weighted_bce_hand_value():
    # T=4, one keyframe, uniform 0.5 predictions:
    # (1/4) [2 ln2 + 3 (2/3) ln2] = ln 2
    labels = np.array([1.0, 0.0, 0.0, 0.0])
    probs = np.full((4, 2), 0.5)
    loss = losses.weighted_bce(Tensor(probs), labels)
    assert loss.item() == pytest.approx(0.6931, abs=1e-4)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)


def test_weighted_bce_label_flip_symmetry():
    rng = np.random.default_rng(0)
    labels = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
    p1 = rng.uniform(0.05, 0.95, size=5)
    probs = np.stack([1 - p1, p1], axis=1)
    a = losses.weighted_bce(Tensor(probs), labels).item()
    b = losses.weighted_bce(Tensor(probs[:, ::-1].copy()), 1.0 - labels).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_weighted_bce_single_class_fallback():
    probs = np.full((3, 2), 0.5)
    with pytest.warns(UserWarning, match="single-class"):
        loss = losses.weighted_bce(Tensor(probs), np.ones(3))
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)


def test_weighted_bce_minimized_at_labels():
    # gradient of the keyframe probability should point toward the label
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    for delta in (-0.2, 0.2):
        p1 = np.clip(labels * (1 - 0.3) + 0.15 + delta * (0.5 - labels) * 2, 0.02, 0.98)
        probs = Parameter(np.stack([1 - p1, p1], axis=1), "probs")
        with Tape() as tape:
            loss = losses.weighted_bce(probs.value, labels)
            probs.zero_grad()
            tape.backward(loss)
        grad_p1 = probs.grad[:, 1] - probs.grad[:, 0]
        # moving keyframe probability toward the label must reduce the loss
        assert ((labels - p1) * grad_p1 < 0).all()


def test_score_mse_examples():
    gt = np.array([0.2, 0.4, 0.9])
    assert losses.score_mse(Tensor(gt.reshape(-1, 1)), gt).item() == 0.0
    pred = gt + 1.0
    assert losses.score_mse(Tensor(pred.reshape(-1, 1)), gt).item() == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=7), rng.uniform(size=7)
    naive = sum((x - y) ** 2 for x, y in zip(a, b)) / 7
    assert losses.score_mse(Tensor(a.reshape(-1, 1)), b).item() == pytest.approx(naive, abs=1e-12)
    with pytest.raises(engine.DimensionError):
        losses.score_mse(Tensor(a.reshape(-1, 1)), b[:3])


def test_sparsity_entropy_uniform_closed_form():
    # uniform 4x4 temporal adjacency: off-diagonal entropy = 3 ln 4
    t = 4
    uniform_t = np.full((t, t), 1.0 / t)
    spatial = np.full((1, 2, 2), 0.5)
    loss = losses.sparsity_entropy(Tensor(spatial), Tensor(uniform_t), rho=1.0)
    spatial_term = -2 * 0.5 * math.log(0.5)
    temporal_term = 3 * math.log(4.0)
    assert loss.item() == pytest.approx(spatial_term + temporal_term, abs=1e-9)


def test_sparsity_entropy_near_one_hot_vanishes():
    eps = 1e-9
    row = np.array([1.0 - 2 * eps, eps, eps])
    adj = np.tile(row, (3, 1))
    loss = losses.sparsity_entropy(Tensor(adj[None]), Tensor(adj), rho=0.0)
    assert 0 < loss.item() < 1e-6


def test_sparsity_entropy_decreases_when_mass_concentrates():
    uniform = np.full((4, 4), 0.25)
    peaked = np.tile([0.7, 0.1, 0.1, 0.1], (4, 1))
    ent_u = losses.sparsity_entropy(Tensor(uniform[None]), Tensor(uniform), 1.0).item()
    ent_p = losses.sparsity_entropy(Tensor(peaked[None]), Tensor(peaked), 1.0).item()
    assert ent_p < ent_u


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sparsity_entropy_maximal_at_uniform(seed):
    rng = np.random.default_rng(seed)
    t = 5
    raw = rng.uniform(0.01, 1.0, size=(t, t))
    stochastic = raw / raw.sum(axis=1, keepdims=True)
    uniform = np.full((t, t), 1.0 / t)
    spatial = np.full((1, 2, 2), 0.5)
    ent_s = losses.sparsity_entropy(Tensor(spatial), Tensor(stochastic), 1.0).item()
    ent_u = losses.sparsity_entropy(Tensor(spatial), Tensor(uniform), 1.0).item()
    assert ent_s <= ent_u + 1e-9


def _params(d_model=4, d_obj=5):
    cfg = ModelConfig(
        frames=4, objects=3, d_obj=d_obj, d_embed=5, d_model=d_model, heads=2,
        d_head=3, gcn_layers=1, refine_iters=0, lambda_frame=2.0,
    )
    return ModelParams(cfg, seed=0), cfg


def test_reconstruct_oracle_weights_give_zero_loss():
    params, cfg = _params()
    # final projection copies the concatenated originals through
    params.recon_out_w.value.data[...] = np.vstack(
        [np.zeros((cfg.d_obj, cfg.d_obj)), np.eye(cfg.d_obj)]
    )
    params.recon_out_b.value.data[...] = 0.0
    rng = np.random.default_rng(2)
    selected = Tensor(rng.normal(size=(3, cfg.d_model)))
    originals = rng.normal(size=(3, cfg.d_obj))
    recon, loss = losses.reconstruct(selected, originals, params)
    assert loss.item() <= 1e-18
    assert np.allclose(recon.data, originals, atol=1e-12)


def test_reconstruct_zero_decoder_gives_mean_squared_norm():
    params, cfg = _params()
    params.recon_out_w.value.data[...] = 0.0
    params.recon_out_b.value.data[...] = 0.0
    rng = np.random.default_rng(3)
    selected = Tensor(rng.normal(size=(2, cfg.d_model)))
    originals = rng.normal(size=(2, cfg.d_obj))
    _, loss = losses.reconstruct(selected, originals, params)
    assert loss.item() == pytest.approx((originals**2).sum() / 2, abs=1e-12)


def test_reconstruct_matches_layer_oracle():
    params, cfg = _params()
    rng = np.random.default_rng(4)
    selected = rng.normal(size=(3, cfg.d_model))
    originals = rng.normal(size=(3, cfg.d_obj))
    dec = selected @ params.recon_dec.w.value.data
    mu, var = dec.mean(0, keepdims=True), dec.var(0, keepdims=True)
    dec = (dec - mu) / np.sqrt(var + 1e-8)
    dec = dec * params.recon_dec.gain.value.data + params.recon_dec.bias.value.data
    dec = np.where(dec > 0, dec, np.exp(dec) - 1)
    joined = np.concatenate([dec, originals], axis=1)
    expect = joined @ params.recon_out_w.value.data + params.recon_out_b.value.data
    recon, loss = losses.reconstruct(Tensor(selected), originals, params)
    assert np.max(np.abs(recon.data - expect)) <= 1e-9
    assert loss.item() == pytest.approx(((originals - expect) ** 2).sum() / 3, abs=1e-9)


def test_diversity_identical_unit_vectors():
    x = np.tile([0.6, 0.8], (3, 1))
    assert losses.diversity(Tensor(x)).item() == pytest.approx(1.0, abs=1e-9)


def test_diversity_orthogonal_rows():
    assert losses.diversity(Tensor(np.eye(3))).item() == pytest.approx(0.0, abs=1e-9)


def test_diversity_matches_pair_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    for norm in ("squared", "plain"):
        total = 0.0
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                denom_i = (x[i] @ x[i]) if norm == "squared" else np.linalg.norm(x[i])
                denom_j = (x[j] @ x[j]) if norm == "squared" else np.linalg.norm(x[j])
                total += x[i] @ x[j] / (denom_i * denom_j)
        expect = total / 6
        assert losses.diversity(Tensor(x), norm).item() == pytest.approx(expect, abs=1e-12)


def test_diversity_bounded_for_unit_inputs():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    val = losses.diversity(Tensor(x), "plain").item()
    assert -1 - 1e-6 <= val <= 1 + 1e-6


def test_total_loss_weighted_sums():
    parts = {name: Tensor([1.0]) for name in
             ("classification", "sparsity", "diversity", "reconstruction")}
    total, report = losses.total_loss(parts, losses.LossWeights.supervised())
    assert total.item() == pytest.approx(1.2001, abs=1e-12)
    unsup_parts = {name: Tensor([1.0]) for name in ("sparsity", "diversity", "reconstruction")}
    total_u, _ = losses.total_loss(unsup_parts, losses.LossWeights.unsupervised())
    assert total_u.item() == pytest.approx(20.001, abs=1e-12)
    zero = losses.LossWeights(mode="supervised_binary", alpha=0, beta=0, gamma=0)
    total_z, _ = losses.total_loss(parts, zero)
    assert total_z.item() == pytest.approx(1.0, abs=1e-12)


def test_total_loss_report_consistency():
    rng = np.random.default_rng(7)
    parts = {name: Tensor([float(rng.uniform(0.1, 2.0))]) for name in
             ("classification", "sparsity", "diversity", "reconstruction")}
    w = losses.LossWeights.supervised()
    total, report = losses.total_loss(parts, w)
    recomputed = (report.components["classification"]
                  + w.alpha * report.components["sparsity"]
                  + w.beta * report.components["diversity"]
                  + w.gamma * report.components["reconstruction"])
    assert abs(report.total - recomputed) <= 1e-9
    assert abs(report.total - total.item()) <= 1e-12


def test_total_loss_missing_part_raises():
    with pytest.raises(ConfigError):
        losses.total_loss({"sparsity": Tensor([1.0])}, losses.LossWeights.supervised())


def test_selection_rules():
    probs = np.array([[0.4, 0.6], [0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
    assert losses.select_training_keyframes(probs, "supervised_binary") == [0, 2]
    # unsupervised: ceil(0.15 * 4) = 1 top frame
    assert losses.select_training_keyframes(probs, "unsupervised") == [2]
    flat = np.tile([0.6, 0.4], (4, 1))
    # empty argmax set falls back to the top-15% frames
    assert losses.select_training_keyframes(flat, "supervised_binary") == [0]


def test_loss_gradients_pass_fd_checks():
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    gt = np.array([0.9, 0.1, 0.2, 0.8])
    for mode in ("weighted_bce", "score_mse", "entropy", "recon_div"):
        w = Parameter(np.random.default_rng(8).normal(size=(4, 4)) * 0.5, "w")
        x = Tensor(np.random.default_rng(9).normal(size=(4, 4)))

        def f():
            h = engine.matmul(x, w.value)
            if mode == "weighted_bce":
                probs = engine.row_softmax(h[:, :2] if False else engine.matmul(h, Tensor(np.eye(4)[:, :2])), 1.0)
                return losses.weighted_bce(probs, labels)
            if mode == "score_mse":
                pred = engine.sigmoid(engine.matmul(h, Tensor(np.ones((4, 1)))))
                return losses.score_mse(pred, gt)
            if mode == "entropy":
                adj = engine.clamp_row_normalize(engine.sigmoid(h))
                return losses.sparsity_entropy(
                    engine.reshape(adj, (1, 4, 4)), adj, rho=5.0
                )
            params, _ = _params(d_model=4, d_obj=5)
            recon, loss = losses.reconstruct(h, np.random.default_rng(10).normal(size=(4, 5)), params)
            return engine.add(loss, losses.diversity(recon, "squared"))

        err = gradient_check(f, [w], eps=1e-6)
        assert err <= 1e-4, f"{mode}: {err}"

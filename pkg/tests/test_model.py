import math

import numpy as np
import pytest

from causalgate import tensor as tc
from causalgate.encoder import EncoderConfig
from causalgate.model import (
    ConfigError,
    ModelConfig,
    forward_batch,
    gate,
    info_nce_mix_loss,
    init_model_params,
    mix,
    pool,
    predict_scores,
    sample_partners,
    total_loss,
)
from causalgate.tensor import Tensor

from _oracles import fd_gradient, info_nce_loop, rel_err


def small_config(**overrides):
    enc = EncoderConfig(vocab_size=24, seq_len=12, d_model=8, n_blocks=1, n_heads=2)
    return ModelConfig(encoder=enc, gate_hidden=4, **overrides)


def _batch_ids(cfg, rng, b=4):
    t = cfg.encoder.seq_len
    ids = rng.integers(2, cfg.encoder.vocab_size, size=(b, t))
    ids[:, 0] = 1
    for i in range(b):
        ids[i, t - int(rng.integers(1, 4)):] = 0
    return ids, (ids != 0).astype(float)


# ---------------------------------------------------------------------- gate


def test_gate_zero_weights_uniform():
    cfg = small_config()
    params = init_model_params(0, cfg)
    for name in ("gate.w1", "gate.w2", "gate.b1", "gate.b2"):
        params[name] = Tensor(np.zeros_like(params[name].data), requires_grad=True)
    h = Tensor(np.random.default_rng(0).normal(size=(3, 5, 8)))
    a = gate(h, params).data
    assert np.array_equal(a, np.full((3, 5, 2), 0.5))


def test_gate_bias_analytic_softmax():
    cfg = small_config()
    params = init_model_params(0, cfg)
    for name in ("gate.w1", "gate.w2", "gate.b1"):
        params[name] = Tensor(np.zeros_like(params[name].data), requires_grad=True)
    params["gate.b2"] = Tensor(np.array([-2.0, 2.0]), requires_grad=True)
    h = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8)))
    a = gate(h, params).data
    expect = np.exp([-2.0, 2.0]) / np.exp([-2.0, 2.0]).sum()
    assert np.allclose(a, expect, atol=5e-6)
    assert abs(a[0, 0, 0] - 0.01799) < 1e-5


def test_gate_rows_sum_to_one():
    cfg = small_config()
    params = init_model_params(3, cfg)
    h = Tensor(np.random.default_rng(3).uniform(-4, 4, size=(64, 12, 8)))
    a = gate(h, params).data
    assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-12
    assert (a >= 0).all()


# ---------------------------------------------------------------------- pool


def test_pool_uniform_gates_is_masked_mean():
    rng = np.random.default_rng(5)
    h = Tensor(rng.normal(size=(2, 6, 4)))
    gates = Tensor(np.full((2, 6, 2), 0.5))
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    x_o, x_c = pool(h, gates, mask)
    assert np.allclose(x_o.data[0], h.data[0].mean(axis=0), atol=1e-12)
    assert np.allclose(x_o.data[1], h.data[1, :4].mean(axis=0), atol=1e-12)
    assert np.allclose(x_o.data, x_c.data, atol=1e-12)


def test_pool_one_hot_gate_selects_token():
    rng = np.random.default_rng(6)
    h = Tensor(rng.normal(size=(1, 5, 4)))
    g = np.zeros((1, 5, 2))
    g[:, :, 0] = 1.0
    g[0, 3, 0], g[0, 3, 1] = 0.0, 1.0
    x_o, _ = pool(h, Tensor(g), np.ones((1, 5)))
    assert np.array_equal(x_o.data[0], h.data[0, 3])


def test_pool_hand_computed_three_tokens():
    h = Tensor(np.array([[[1.0, 0.0], [0.0, 2.0], [4.0, 4.0]]]))
    g = Tensor(np.array([[[0.8, 0.2], [0.5, 0.5], [0.1, 0.9]]]))
    x_o, x_c = pool(h, g, np.ones((1, 3)))
    # causal weights (0.2, 0.5, 0.9) / 1.6 ; confounder (0.8, 0.5, 0.1) / 1.4
    expect_o = (0.2 * np.array([1, 0.0]) + 0.5 * np.array([0, 2.0]) + 0.9 * np.array([4, 4.0])) / 1.6
    expect_c = (0.8 * np.array([1, 0.0]) + 0.5 * np.array([0, 2.0]) + 0.1 * np.array([4, 4.0])) / 1.4
    assert np.abs(x_o.data[0] - expect_o).max() <= 1e-12
    assert np.abs(x_c.data[0] - expect_c).max() <= 1e-12


# ---------------------------------------------------------------------- mix


def test_mix_add_and_concat():
    a, b = Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]]))
    assert np.array_equal(mix(a, b, "add").data, [[4.0, 6.0]])
    assert np.array_equal(mix(a, b, "concat").data, [[1.0, 2.0, 3.0, 4.0]])
    assert np.array_equal(mix(a, Tensor(np.zeros((1, 2))), "add").data, a.data)
    with pytest.raises(ConfigError):
        mix(a, b, "stack")


# ------------------------------------------------------------------ partners


def test_partner_pair_batch_of_two():
    rng = np.random.default_rng(0)
    p = sample_partners(2, 1, rng)
    assert p[0, 0] == 1 and p[1, 0] == 0


def test_no_self_partnering():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = sample_partners(8, 3, rng)
        assert not (p == np.arange(8)[:, None]).any()


def test_partner_distribution_uniform():
    # chi-square against the uniform over the 7 legal partners per anchor
    rng = np.random.default_rng(2)
    b, k, reps = 8, 2, 6250
    counts = np.zeros((b, b))
    for _ in range(reps):
        p = sample_partners(b, k, rng)
        for i in range(b):
            for j in p[i]:
                counts[i, j] += 1
    n_draws = reps * k
    expect = n_draws / (b - 1)
    for i in range(b):
        assert counts[i, i] == 0
        others = np.delete(counts[i], i)
        chi2 = ((others - expect) ** 2 / expect).sum()
        assert chi2 < 16.81, f"anchor {i}: chi2 {chi2:.1f}"  # p=0.01, df=6
        assert np.abs(others / n_draws - 1 / (b - 1)).max() <= 0.03 * 1 / (b - 1) * (b - 1) + 0.03


def test_partners_deterministic_given_seed():
    a = sample_partners(6, 2, np.random.default_rng(42))
    b = sample_partners(6, 2, np.random.default_rng(42))
    assert np.array_equal(a, b)


# ------------------------------------------------------------------- InfoNCE


def test_info_nce_identical_vectors_ln2():
    h = Tensor(np.ones((2, 3)))
    h_mix = Tensor(np.ones((2, 1, 3)))
    loss = info_nce_mix_loss(h_mix, h, tau=1.0)
    assert abs(loss.item() - math.log(2.0)) <= 1e-9


def test_info_nce_two_term_analytic():
    h = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    h_mix = Tensor(np.array([[[1.0, 0.0]], [[-1.0, 0.0]]]))
    loss = info_nce_mix_loss(h_mix, h, tau=1.0)
    assert abs(loss.item() - math.log(1.0 + math.exp(-2.0))) <= 1e-12


@pytest.mark.parametrize("b,k", [(2, 1), (4, 2), (8, 2), (8, 1), (4, 1)])
def test_info_nce_matches_double_loop(b, k):
    rng = np.random.default_rng(b * 10 + k)
    h_mix = rng.normal(size=(b, k, 6))
    h = rng.normal(size=(b, 6))
    for tau in (1.0, 0.5):
        got = info_nce_mix_loss(Tensor(h_mix), Tensor(h), tau=tau).item()
        want = info_nce_loop(h_mix, h, tau=tau)
        assert abs(got - want) <= 1e-10


def test_info_nce_zero_norm_vector_defined():
    h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    h_mix_arr = np.ones((2, 1, 2))
    h_mix_arr[0, 0] = 0.0
    mixed = Tensor(h_mix_arr, requires_grad=True)
    loss = info_nce_mix_loss(mixed, h, tau=1.0)
    assert abs(loss.item() - info_nce_loop(h_mix_arr, np.array([[1.0, 0.0], [0.0, 1.0]]))) <= 1e-10
    loss.backward()
    assert np.allclose(mixed.grad[0, 0], 0.0)


# ----------------------------------------------------------------- total loss


def test_total_loss_erm_reduction():
    cfg = small_config(lambda_confounder=0.0, lambda_joint=0.0, lambda_mix=0.0)
    params = init_model_params(1, cfg)
    rng = np.random.default_rng(1)
    ids, mask = _batch_ids(cfg, rng)
    y = rng.normal(size=4)
    batch = forward_batch(ids, mask, params, cfg, partners=None)
    loss, parts = total_loss(batch, y, params, cfg)
    direct = np.mean((batch.y_causal.data - y) ** 2)
    assert abs(loss.item() - direct) <= 1e-12
    assert parts["loss_joint"] == 0.0 and parts["loss_mix"] == 0.0


def test_total_loss_matches_hand_sum():
    cfg = small_config()
    params = init_model_params(2, cfg)
    rng = np.random.default_rng(2)
    ids, mask = _batch_ids(cfg, rng)
    y = rng.uniform(0, 20, size=4)
    partners = sample_partners(4, cfg.n_partners, np.random.default_rng(3))
    batch = forward_batch(ids, mask, params, cfg, partners=partners)
    loss, parts = total_loss(batch, y, params, cfg)

    manual = (
        cfg.lambda_causal * np.mean((batch.y_causal.data - y) ** 2)
        + cfg.lambda_confounder * np.mean((batch.y_confounder.data - y) ** 2)
        + cfg.lambda_joint * np.mean((batch.y_joint.data - np.repeat(y, cfg.n_partners)) ** 2)
        + cfg.lambda_mix * parts["loss_mix"]
    )
    assert abs(loss.item() - manual) <= 1e-10
    # mix component against the double-loop oracle
    x_mix = batch.x_mix.data.reshape(4, cfg.n_partners, -1)
    anchors = batch.x_causal.data + batch.x_confounder.data
    assert abs(parts["loss_mix"] - info_nce_loop(x_mix, anchors, cfg.tau)) <= 1e-10


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        small_config(lambda_mix=-0.1).validate()


def test_confounder_objective_mean():
    cfg = small_config(confounder_objective="mean", lambda_joint=0.0, lambda_mix=0.0)
    params = init_model_params(4, cfg)
    rng = np.random.default_rng(4)
    ids, mask = _batch_ids(cfg, rng)
    y = rng.uniform(0, 20, size=4)
    batch = forward_batch(ids, mask, params, cfg)
    loss, _ = total_loss(batch, y, params, cfg)
    manual = cfg.lambda_causal * np.mean((batch.y_causal.data - y) ** 2) + \
        cfg.lambda_confounder * np.mean((batch.y_confounder.data - y.mean()) ** 2)
    assert abs(loss.item() - manual) <= 1e-12


# -------------------------------------------------------------- invariances


def test_causal_head_independent_of_partner_choice():
    cfg = small_config()
    params = init_model_params(5, cfg)
    rng = np.random.default_rng(5)
    ids, mask = _batch_ids(cfg, rng)
    p1 = sample_partners(4, 2, np.random.default_rng(100))
    p2 = sample_partners(4, 2, np.random.default_rng(200))
    assert not np.array_equal(p1, p2)
    out1 = forward_batch(ids, mask, params, cfg, partners=p1)
    out2 = forward_batch(ids, mask, params, cfg, partners=p2)
    assert np.array_equal(out1.y_causal.data, out2.y_causal.data)
    assert np.array_equal(out1.x_causal.data, out2.x_causal.data)


def test_inference_deterministic():
    cfg = small_config()
    params = init_model_params(6, cfg)
    rng = np.random.default_rng(6)
    ids, mask = _batch_ids(cfg, rng)
    a = predict_scores(ids, mask, params, cfg)
    b = predict_scores(ids, mask, params, cfg)
    assert np.array_equal(a, b)


def test_pooled_features_use_only_unmasked_positions():
    cfg = small_config()
    params = init_model_params(7, cfg)
    rng = np.random.default_rng(7)
    ids, mask = _batch_ids(cfg, rng)
    scores = predict_scores(ids, mask, params, cfg)
    # changing a PAD position's id must not leak into predictions
    ids2 = ids.copy()
    pad_pos = np.where(mask[0] == 0)[0][0]
    ids2[0, pad_pos] = 5
    scores2 = predict_scores(ids2, mask, params, cfg)
    assert np.array_equal(scores[1:], scores2[1:])
    assert abs(scores[0] - scores2[0]) <= 1e-9  # PAD row enters attention values? no: masked keys


# ------------------------------------------------------------- full gradient


@pytest.mark.parametrize("combine", ["add", "concat"])
def test_full_model_gradients_match_finite_differences(combine):
    cfg = small_config(combine=combine)
    params = init_model_params(8, cfg)
    rng = np.random.default_rng(8)
    ids, mask = _batch_ids(cfg, rng)
    y = rng.uniform(0, 20, size=4)
    partners = sample_partners(4, cfg.n_partners, np.random.default_rng(9))

    names = sorted(params)
    batch = forward_batch(ids, mask, params, cfg, partners=partners)
    loss, _ = total_loss(batch, y, params, cfg)
    loss.backward()

    def f(arrays):
        trial = {n: Tensor(a) for n, a in zip(names, arrays)}
        with tc.no_grad():
            trial_batch = forward_batch(ids, mask, trial, cfg, partners=partners)
            val, _ = total_loss(trial_batch, y, trial, cfg)
            return val.item()

    fd = fd_gradient(f, [params[n].data.copy() for n in names])
    for name, g_fd in zip(names, fd):
        err = rel_err(params[name].grad if params[name].grad is not None else np.zeros_like(g_fd), g_fd)
        assert err <= 1e-4, f"{name}: rel err {err:.2e}"

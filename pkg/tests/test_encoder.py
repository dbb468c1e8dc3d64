import numpy as np
import pytest

from causalgate import tensor as tc
from causalgate.encoder import (
    EncoderConfig,
    encode_batch,
    encode_hidden,
    init_params,
    sequence_mask,
)
from causalgate.tensor import ShapeError, Tensor

from _oracles import fd_gradient, rel_err


class _Seq:
    def __init__(self, ids):
        self.ids = ids


@pytest.fixture
def small_cfg():
    return EncoderConfig(vocab_size=20, seq_len=12, d_model=8, n_blocks=1, n_heads=2)


def _ids(small_cfg, rng, n_pad=3):
    ids = rng.integers(2, small_cfg.vocab_size, size=small_cfg.seq_len)
    ids[0] = 1
    ids[small_cfg.seq_len - n_pad :] = 0
    return ids


def test_output_shape(small_cfg):
    params = init_params(0, small_cfg)
    rng = np.random.default_rng(1)
    out = encode_hidden(_Seq(list(_ids(small_cfg, rng))), params, small_cfg)
    assert out.shape == (12, 8)


def test_init_deterministic(small_cfg):
    a = init_params(7, small_cfg)
    b = init_params(7, small_cfg)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data), name
    c = init_params(8, small_cfg)
    assert not np.array_equal(a["tok_emb"].data, c["tok_emb"].data)


def test_layer_norm_init_convention(small_cfg):
    params = init_params(3, small_cfg)
    assert np.array_equal(params["blocks.0.ln1_gain"].data, np.ones(8))
    assert np.array_equal(params["blocks.0.ln1_bias"].data, np.zeros(8))


def test_embedding_init_scale():
    cfg = EncoderConfig(vocab_size=1250, seq_len=8, d_model=8, n_blocks=1, n_heads=1)
    params = init_params(11, cfg)
    sd = params["tok_emb"].data.std()
    assert abs(sd - 1 / np.sqrt(8)) <= 0.1 / np.sqrt(8)


def test_dims_must_divide():
    with pytest.raises(ShapeError, match="divisible"):
        EncoderConfig(vocab_size=10, seq_len=4, d_model=10, n_heads=4).validate()


def test_id_range_checked(small_cfg):
    params = init_params(0, small_cfg)
    bad = np.full((1, small_cfg.seq_len), small_cfg.vocab_size, dtype=np.int64)
    with pytest.raises(ShapeError, match="ids"):
        encode_batch(bad, np.ones_like(bad, dtype=float), params, small_cfg)


def test_attention_rows_normalized_pad_zero(small_cfg):
    params = init_params(5, small_cfg)
    rng = np.random.default_rng(5)
    ids = np.stack([_ids(small_cfg, rng), _ids(small_cfg, rng, n_pad=5)])
    mask = (ids != 0).astype(float)
    trace = {}
    encode_batch(ids, mask, params, small_cfg, trace=trace)
    for att in trace["attention"]:
        b, h, t, _ = att.shape
        for i in range(b):
            pad_cols = mask[i] == 0
            assert np.all(att[i][:, :, pad_cols] == 0.0)
            sums = att[i].sum(axis=-1)
            assert np.abs(sums - 1.0).max() <= 1e-10


def test_permutation_equivariance_without_positions(small_cfg):
    params = init_params(9, small_cfg)
    params["pos_emb"] = Tensor(np.zeros_like(params["pos_emb"].data), requires_grad=True)
    rng = np.random.default_rng(2)
    ids = _ids(small_cfg, rng)[None, :]
    mask = (ids != 0).astype(float)
    out = encode_batch(ids, mask, params, small_cfg).data[0]

    swapped = ids.copy()
    swapped[0, 2], swapped[0, 5] = ids[0, 5], ids[0, 2]
    out_swapped = encode_batch(swapped, mask, params, small_cfg).data[0]

    expect = out.copy()
    expect[[2, 5]] = out[[5, 2]]
    assert np.allclose(out_swapped, expect, atol=1e-12)


def test_single_token_block_matches_hand_computation():
    # independent numpy recomputation: with one token, attention is a no-op
    # through identity projections, so the block is residual + LN + FFN
    cfg = EncoderConfig(vocab_size=4, seq_len=1, d_model=2, n_blocks=1, n_heads=1)
    params = init_params(0, cfg)
    eye = np.eye(2)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"blocks.0.{name}"] = Tensor(eye, requires_grad=True)

    ids = np.array([[2]])
    mask = np.ones((1, 1))
    got = encode_batch(ids, mask, params, cfg).data[0, 0]

    def ln(v, gain, bias, eps=1e-5):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + eps) * gain + bias

    x = params["tok_emb"].data[2] + params["pos_emb"].data[0]
    a = ln(x, params["blocks.0.ln1_gain"].data, params["blocks.0.ln1_bias"].data)
    x1 = x + a  # att weight over the single key is exactly 1
    n = ln(x1, params["blocks.0.ln2_gain"].data, params["blocks.0.ln2_bias"].data)
    expect = x1 + np.tanh(n @ params["blocks.0.ff_in"].data) @ params["blocks.0.ff_out"].data
    assert np.allclose(got, expect, atol=1e-12)


def test_encoder_gradients_match_finite_differences(small_cfg):
    params = init_params(13, small_cfg)
    rng = np.random.default_rng(13)
    ids = np.stack([_ids(small_cfg, rng), _ids(small_cfg, rng, n_pad=4)])
    mask = (ids != 0).astype(float)
    target = rng.normal(size=(2, small_cfg.seq_len, small_cfg.d_model))

    names = sorted(params)
    loss = tc.mse(encode_batch(ids, mask, params, small_cfg), Tensor(target))
    loss.backward()

    def f(arrays):
        trial = {n: Tensor(a) for n, a in zip(names, arrays)}
        with tc.no_grad():
            return tc.mse(encode_batch(ids, mask, trial, small_cfg), Tensor(target)).item()

    arrays = [params[n].data.copy() for n in names]
    fd = fd_gradient(f, arrays)
    for name, g_fd in zip(names, fd):
        err = rel_err(params[name].grad, g_fd)
        assert err <= 1e-5, f"{name}: rel err {err:.2e}"


def test_sequence_mask_helper(small_cfg):
    rng = np.random.default_rng(3)
    seqs = [_Seq(list(_ids(small_cfg, rng))), _Seq(list(_ids(small_cfg, rng, n_pad=6)))]
    ids, mask = sequence_mask(seqs)
    assert ids.shape == (2, 12)
    assert mask[1].sum() == 6

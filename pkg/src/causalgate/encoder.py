"""Small trainable token encoder: embeddings plus pre-norm attention blocks.

Maps a token sequence to per-token hidden states.  PAD positions are masked
out of attention as keys (they receive exactly zero weight); their output
rows exist but are never read downstream, where pooling applies the same
mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    seq_len: int
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ff_mult: int = 4

    def validate(self) -> "EncoderConfig":
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        return self


def init_params(seed: int, cfg: EncoderConfig) -> dict:
    """Scaled-uniform initialization, deterministic per seed.

    Embeddings use limit sqrt(3/d) so the sample sd is 1/sqrt(d); projections
    use the fan-balanced limit; layer-norm gains start at one, biases at zero.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, ff = cfg.d_model, cfg.ff_mult * cfg.d_model

    def uniform(shape, limit):
        return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

    emb_limit = math.sqrt(3.0 / d)
    params: dict[str, Tensor] = {
        "tok_emb": uniform((cfg.vocab_size, d), emb_limit),
        "pos_emb": uniform((cfg.seq_len, d), emb_limit),
    }
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        proj_limit = math.sqrt(6.0 / (d + d))
        ff_limit = math.sqrt(6.0 / (d + ff))
        params[p + "ln1_gain"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln1_bias"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "wq"] = uniform((d, d), proj_limit)
        params[p + "wk"] = uniform((d, d), proj_limit)
        params[p + "wv"] = uniform((d, d), proj_limit)
        params[p + "wo"] = uniform((d, d), proj_limit)
        params[p + "ln2_gain"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln2_bias"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ff_in"] = uniform((d, ff), ff_limit)
        params[p + "ff_out"] = uniform((ff, d), ff_limit)
    return params


def _heads_split(x: Tensor, n_heads: int) -> Tensor:
    """(B, T, d) -> (B*h, T, d/h)."""
    b, t, d = x.shape
    dh = d // n_heads
    x = tc.reshape(x, (b, t, n_heads, dh))
    x = tc.transpose(x, (0, 2, 1, 3))
    return tc.reshape(x, (b * n_heads, t, dh))


def _heads_join(x: Tensor, n_heads: int) -> Tensor:
    """(B*h, T, d/h) -> (B, T, d)."""
    bh, t, dh = x.shape
    b = bh // n_heads
    x = tc.reshape(x, (b, n_heads, t, dh))
    x = tc.transpose(x, (0, 2, 1, 3))
    return tc.reshape(x, (b, t, n_heads * dh))


def encode_batch(ids: np.ndarray, mask: np.ndarray, params: dict, cfg: EncoderConfig,
                 trace: dict | None = None) -> Tensor:
    """Hidden states (B, T, d) for a batch of id arrays with a non-PAD mask."""
    cfg.validate()
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=float)
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ShapeError(f"ids must be (B, {cfg.seq_len}), got {ids.shape}")
    if mask.shape != ids.shape:
        raise ShapeError(f"mask {mask.shape} must match ids {ids.shape}")
    if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
        raise ShapeError(f"token ids outside [0, {cfg.vocab_size})")

    b, t = ids.shape
    h, d = cfg.n_heads, cfg.d_model
    dh = d // h

    x = tc.add(tc.embedding(params["tok_emb"], ids), params["pos_emb"])
    key_mask = np.ascontiguousarray(
        np.broadcast_to(mask[:, None, :], (b, h, t))
    ).reshape(b * h, 1, t)

    for blk in range(cfg.n_blocks):
        p = f"blocks.{blk}."
        a = tc.layer_norm(x, params[p + "ln1_gain"], params[p + "ln1_bias"])
        q = _heads_split(tc.matmul(a, params[p + "wq"]), h)
        k = _heads_split(tc.matmul(a, params[p + "wk"]), h)
        v = _heads_split(tc.matmul(a, params[p + "wv"]), h)
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        att = tc.masked_softmax_rows(scores, key_mask)
        if trace is not None:
            trace.setdefault("attention", []).append(att.data.reshape(b, h, t, t))
        ctx = _heads_join(tc.matmul(att, v), h)
        x = tc.add(x, tc.matmul(ctx, params[p + "wo"]))

        n = tc.layer_norm(x, params[p + "ln2_gain"], params[p + "ln2_bias"])
        x = tc.add(x, tc.matmul(tc.tanh(tc.matmul(n, params[p + "ff_in"])), params[p + "ff_out"]))
    return x


def encode_hidden(seq, params: dict, cfg: EncoderConfig) -> Tensor:
    """Per-token hidden states (T, d) for a single TokenSequence."""
    ids = np.asarray(seq.ids)[None, :]
    mask = (ids != 0).astype(float)
    out = encode_batch(ids, mask, params, cfg)
    return tc.reshape(out, (cfg.seq_len, cfg.d_model))


def sequence_mask(sequences) -> tuple:
    """Stack TokenSequences into (ids, mask) arrays."""
    ids = np.array([s.ids for s in sequences], dtype=np.int64)
    return ids, (ids != 0).astype(float)

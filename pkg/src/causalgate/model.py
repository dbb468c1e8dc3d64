"""Two-channel token gating with environment mixing and contrastive alignment.

Every token's hidden state is routed through a softmax gate with two
channels (0 = confounder, 1 = causal).  Gate-weighted pooling yields a
causal vector ``x_o`` and a confounder vector ``x_c`` per patient.  During
training, each patient's causal vector is combined with the confounder
vector of randomly sampled batch partners; a joint head must still predict
the causal donor's score from the combination, and an InfoNCE term aligns
the combined representation with the donor's own pooled representation
against in-batch negatives.  Inference uses the causal head alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .encoder import EncoderConfig, encode_batch, init_params as init_encoder_params
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

COMBINE_MODES = ("add", "concat")
CONFOUNDER_OBJECTIVES = ("label", "mean")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    gate_hidden: int = 32
    combine: str = "add"
    tau: float = 1.0
    n_partners: int = 2
    lambda_causal: float = 1.0
    lambda_confounder: float = 0.5
    lambda_joint: float = 1.0
    lambda_mix: float = 0.1
    confounder_objective: str = "label"

    def validate(self) -> "ModelConfig":
        self.encoder.validate()
        if self.combine not in COMBINE_MODES:
            raise ConfigError(f"combine must be one of {COMBINE_MODES}, got {self.combine!r}")
        if self.confounder_objective not in CONFOUNDER_OBJECTIVES:
            raise ConfigError(
                f"confounder_objective must be one of {CONFOUNDER_OBJECTIVES}"
            )
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.n_partners < 1:
            raise ConfigError(f"n_partners must be >= 1, got {self.n_partners}")
        for name in ("lambda_causal", "lambda_confounder", "lambda_joint", "lambda_mix"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    @property
    def joint_input_dim(self) -> int:
        d = self.encoder.d_model
        return d if self.combine == "add" else 2 * d


@dataclass
class DisentangledBatch:
    """Forward results: hidden states, gates, pooled features, head outputs."""

    hidden: Tensor            # (B, T, d)
    gates: Tensor             # (B, T, 2); channel 0 confounder, channel 1 causal
    x_causal: Tensor          # (B, d)
    x_confounder: Tensor      # (B, d)
    x_mix: Tensor | None      # (B*K, d or 2d) during training, self-mix at inference
    y_causal: Tensor          # (B,)
    y_confounder: Tensor      # (B,)
    y_joint: Tensor | None    # (B*K,) against causal-donor labels
    partners: np.ndarray | None = None  # (B, K) partner indices


def init_model_params(seed: int, cfg: ModelConfig) -> dict:
    """Encoder weights plus gate, projection, and head parameters."""
    cfg.validate()
    d = cfg.encoder.d_model
    g = cfg.gate_hidden
    params = {f"enc.{k}": v for k, v in init_encoder_params(seed, cfg.encoder).items()}
    rng = np.random.default_rng([seed, 1])

    def uniform(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

    params["gate.w1"] = uniform((d, g), d, g)
    params["gate.b1"] = Tensor(np.zeros(g), requires_grad=True)
    params["gate.w2"] = uniform((g, 2), g, 2)
    params["gate.b2"] = Tensor(np.zeros(2), requires_grad=True)

    def head(name, d_in):
        params[f"{name}.w1"] = uniform((d_in, d), d_in, d)
        params[f"{name}.b1"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{name}.w2"] = uniform((d, 1), d, 1)
        params[f"{name}.b2"] = Tensor(np.zeros(1), requires_grad=True)

    head("head_o", d)
    head("head_c", d)
    head("head_co", cfg.joint_input_dim)
    if cfg.combine == "concat":
        params["proj"] = uniform((2 * d, d), 2 * d, d)
    return params


def gate(hidden: Tensor, params: dict) -> Tensor:
    """Per-token two-channel softmax gate over hidden states (..., d) -> (..., 2)."""
    z = tc.tanh(tc.add(tc.matmul(hidden, params["gate.w1"]), params["gate.b1"]))
    logits = tc.add(tc.matmul(z, params["gate.w2"]), params["gate.b2"])
    return tc.softmax_rows(logits)


def pool(hidden: Tensor, gates: Tensor, mask: np.ndarray) -> tuple:
    """Gate-weighted mean over non-PAD tokens: returns (x_causal, x_confounder)."""
    if gates.shape[-1] != 2:
        raise ShapeError(f"gates must have 2 channels, got {gates.shape}")
    mask_t = Tensor(np.asarray(mask, dtype=float))
    w_causal = tc.mul(tc.index_last(gates, 1), mask_t)
    w_conf = tc.mul(tc.index_last(gates, 0), mask_t)
    return tc.gated_pool(hidden, w_causal), tc.gated_pool(hidden, w_conf)


def mix(x_causal: Tensor, x_confounder: Tensor, mode: str) -> Tensor:
    """Counterfactual combination of causal and confounder features."""
    if mode == "add":
        return tc.add(x_causal, x_confounder)
    if mode == "concat":
        return tc.concat([x_causal, x_confounder], axis=-1)
    raise ConfigError(f"combine must be one of {COMBINE_MODES}, got {mode!r}")


def sample_partners(batch_size: int, n_partners: int, rng: np.random.Generator) -> np.ndarray:
    """(B, K) partner indices drawn uniformly from the batch excluding self."""
    if batch_size < 2:
        raise ValueError("partner sampling needs a batch of at least 2")
    draws = rng.integers(0, batch_size - 1, size=(batch_size, n_partners))
    rows = np.arange(batch_size)[:, None]
    return draws + (draws >= rows)


def info_nce_mix_loss(h_mix: Tensor, h: Tensor, tau: float = 1.0) -> Tensor:
    """Contrastive alignment of mixed views with their causal donor.

    h_mix: (B, K, d) mixed representations; h: (B, d) pooled anchors.  Each
    view's positive is its donor's anchor; every anchor in the batch is a
    candidate, scored by cosine similarity scaled by 1/tau.
    """
    if h_mix.ndim != 3 or h.ndim != 2 or h_mix.shape[2] != h.shape[1] or h_mix.shape[0] != h.shape[0]:
        raise ShapeError(f"info_nce_mix_loss: h_mix {h_mix.shape} vs h {h.shape}")
    b, k, d = h_mix.shape
    flat = tc.reshape(h_mix, (b * k, d))
    sims = tc.scale(
        tc.matmul(tc.l2_normalize_rows(flat), tc.transpose(tc.l2_normalize_rows(h), (1, 0))),
        1.0 / tau,
    )  # (B*K, B)
    log_denom = tc.log(tc.sum_(tc.exp(sims), axis=1))
    positives = tc.take_per_row(sims, np.repeat(np.arange(b), k))
    return tc.mean_(tc.sub(log_denom, positives))


def _head_forward(x: Tensor, params: dict, name: str) -> Tensor:
    z = tc.tanh(tc.add(tc.matmul(x, params[f"{name}.w1"]), params[f"{name}.b1"]))
    out = tc.add(tc.matmul(z, params[f"{name}.w2"]), params[f"{name}.b2"])
    return tc.reshape(out, (x.shape[0],))


def forward_batch(ids: np.ndarray, mask: np.ndarray, params: dict, cfg: ModelConfig,
                  partners: np.ndarray | None = None) -> DisentangledBatch:
    """Full forward pass.

    With ``partners`` given (training), the joint head sees K mixed vectors
    per patient; without (inference), it sees the patient's own combination.
    The causal head's output never depends on partners.
    """
    cfg.validate()
    hidden = encode_batch(ids, mask, params_sub(params, "enc."), cfg.encoder)
    gates = gate(hidden, params)
    x_causal, x_conf = pool(hidden, gates, mask)

    y_causal = _head_forward(x_causal, params, "head_o")
    y_conf = _head_forward(x_conf, params, "head_c")

    b = ids.shape[0]
    if partners is None:
        x_mixed = mix(x_causal, x_conf, cfg.combine)
    else:
        k = partners.shape[1]
        donors = np.repeat(np.arange(b), k)
        x_o_rep = tc.gather_rows(x_causal, donors)
        x_c_part = tc.gather_rows(x_conf, partners.reshape(-1))
        x_mixed = mix(x_o_rep, x_c_part, cfg.combine)
    y_joint = _head_forward(x_mixed, params, "head_co")

    return DisentangledBatch(
        hidden=hidden,
        gates=gates,
        x_causal=x_causal,
        x_confounder=x_conf,
        x_mix=x_mixed,
        y_causal=y_causal,
        y_confounder=y_conf,
        y_joint=y_joint,
        partners=partners,
    )


def params_sub(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _as_anchor_space(x_mixed: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    """Map a combined vector into the anchor space (projection under concat)."""
    if cfg.combine == "concat":
        return tc.matmul(x_mixed, params["proj"])
    return x_mixed


def total_loss(batch: DisentangledBatch, y: np.ndarray, params: dict, cfg: ModelConfig) -> tuple:
    """Weighted objective; returns (loss tensor, named component values)."""
    cfg.validate()
    y = np.asarray(y, dtype=float)
    y_t = Tensor(y)

    loss_causal = tc.mse(batch.y_causal, y_t)
    if cfg.confounder_objective == "mean":
        conf_target = Tensor(np.full_like(y, y.mean()))
    else:
        conf_target = y_t
    loss_conf = tc.mse(batch.y_confounder, conf_target)

    parts = {
        "loss_causal": loss_causal.item(),
        "loss_confounder": loss_conf.item(),
        "loss_joint": 0.0,
        "loss_mix": 0.0,
    }
    total = tc.add(
        tc.scale(loss_causal, cfg.lambda_causal),
        tc.scale(loss_conf, cfg.lambda_confounder),
    )

    mixing_active = (cfg.lambda_joint > 0 or cfg.lambda_mix > 0) and batch.partners is not None
    if mixing_active:
        b = len(y)
        k = batch.partners.shape[1]
        donor_targets = Tensor(np.repeat(y, k))
        loss_joint = tc.mse(batch.y_joint, donor_targets)
        parts["loss_joint"] = loss_joint.item()
        total = tc.add(total, tc.scale(loss_joint, cfg.lambda_joint))

        if cfg.lambda_mix > 0:
            d_anchor = cfg.encoder.d_model
            h_mix = tc.reshape(_as_anchor_space(batch.x_mix, params, cfg), (b, k, d_anchor))
            anchors = _as_anchor_space(
                mix(batch.x_causal, batch.x_confounder, cfg.combine), params, cfg
            )
            loss_mix = info_nce_mix_loss(h_mix, anchors, cfg.tau)
            parts["loss_mix"] = loss_mix.item()
            total = tc.add(total, tc.scale(loss_mix, cfg.lambda_mix))

    parts["total"] = total.item()
    return total, parts


def predict_scores(ids: np.ndarray, mask: np.ndarray, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Inference: causal-head outputs, no partner sampling anywhere."""
    with tc.no_grad():
        batch = forward_batch(ids, mask, params, cfg, partners=None)
        return batch.y_causal.data.copy()


def gate_values(ids: np.ndarray, mask: np.ndarray, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Causal-channel gate weight per token position: (B, T)."""
    with tc.no_grad():
        hidden = encode_batch(ids, mask, params_sub(params, "enc."), cfg.encoder)
        gates = gate(hidden, params)
        return gates.data[..., 1].copy()

"""Training loop, multi-seed protocol, and flat-binary checkpoints.

Optimization is plain gradient descent with momentum at a fixed epoch count;
every source of randomness (splits, shuffles, partner draws, init) derives
from the run seed, so a retrained seed reproduces its checkpoint bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .cohort import PRNG_NAME, split_stratified
from .encoder import EncoderConfig, sequence_mask
from .metrics import MetricsReport, SeedMetrics, seed_metrics
from .model import (
    ModelConfig,
    forward_batch,
    init_model_params,
    predict_scores,
    sample_partners,
    total_loss,
)
from .schema import SEQ_LEN, build_vocabulary, encode_cohort
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 100, 2024, 555, 777)


class TrainingDiverged(RuntimeError):
    def __init__(self, seed: int, epoch: int, step: int):
        super().__init__(f"non-finite loss at seed {seed}, epoch {epoch}, step {step}")
        self.seed = seed
        self.epoch = epoch
        self.step = step


@dataclass
class RunConfig:
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-3
    momentum: float = 0.9
    split_fraction: float = 0.8
    severity_threshold: float = 12.0
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    gate_hidden: int = 32
    combine: str = "add"
    tau: float = 1.0
    n_partners: int = 2
    lambda_causal: float = 1.0
    lambda_confounder: float = 0.5
    lambda_joint: float = 1.0
    lambda_mix: float = 0.1
    confounder_objective: str = "label"

    def validate(self) -> "RunConfig":
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.lambda_mix > 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when lambda_mix > 0")
        self.model_config().validate()
        return self

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        if vocab_size is None:
            vocab_size = len(build_vocabulary())
        return ModelConfig(
            encoder=EncoderConfig(
                vocab_size=vocab_size,
                seq_len=SEQ_LEN,
                d_model=self.d_model,
                n_blocks=self.n_blocks,
                n_heads=self.n_heads,
            ),
            gate_hidden=self.gate_hidden,
            combine=self.combine,
            tau=self.tau,
            n_partners=self.n_partners,
            lambda_causal=self.lambda_causal,
            lambda_confounder=self.lambda_confounder,
            lambda_joint=self.lambda_joint,
            lambda_mix=self.lambda_mix,
            confounder_objective=self.confounder_objective,
        )

    def erm_variant(self) -> "RunConfig":
        """Same encoder and causal head, no disentanglement terms."""
        return replace(self, lambda_confounder=0.0, lambda_joint=0.0, lambda_mix=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(
                f"unknown config keys {sorted(unknown)}; valid keys: {sorted(valid)}"
            )
        return cls(**d).validate()


@dataclass
class TrainResult:
    seed: int
    params: dict
    trace: list
    train_records: list
    test_records: list
    model_config: ModelConfig


def _sgd_step(params: dict, velocity: dict, lr: float, momentum: float) -> None:
    for name, p in params.items():
        if p.grad is None:
            continue
        v = velocity[name]
        v *= momentum
        v -= lr * p.grad
        p.data += v
        p.zero_grad()


def train_one_seed(records: list, config: RunConfig, seed: int) -> TrainResult:
    """Train on a stratified split of the cohort; deterministic per seed."""
    config.validate()
    vocab = build_vocabulary()
    cfg = config.model_config(len(vocab))
    train_records, test_records = split_stratified(records, config.split_fraction, seed)
    sequences = encode_cohort(train_records, vocab)
    ids_all, mask_all = sequence_mask(sequences)
    y_all = np.array([r.pasc_score_future for r in train_records])

    params = init_model_params(seed, cfg)
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    shuffle_rng = np.random.default_rng([seed, 11])
    partner_rng = np.random.default_rng([seed, 23])
    mixing = cfg.lambda_joint > 0 or cfg.lambda_mix > 0
    warned_small = False

    trace = []
    n = len(train_records)
    with tc.checked(False):
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n)
            sums = {"loss_causal": 0.0, "loss_confounder": 0.0, "loss_joint": 0.0,
                    "loss_mix": 0.0, "total": 0.0}
            n_steps = 0
            for start in range(0, n, config.batch_size):
                batch_idx = order[start : start + config.batch_size]
                b = len(batch_idx)
                partners = None
                if mixing and b >= 2:
                    partners = sample_partners(b, cfg.n_partners, partner_rng)
                elif mixing and not warned_small:
                    log.warning("batch of %d: mixing skipped for this step", b)
                    warned_small = True
                batch = forward_batch(
                    ids_all[batch_idx], mask_all[batch_idx], params, cfg, partners=partners
                )
                loss, parts = total_loss(batch, y_all[batch_idx], params, cfg)
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(seed, epoch, n_steps)
                loss.backward()
                _sgd_step(params, velocity, config.learning_rate, config.momentum)
                for key in sums:
                    sums[key] += parts[key]
                n_steps += 1
            row = {"epoch": epoch}
            row.update({k: sums[k] / n_steps for k in sums})
            trace.append(row)
    return TrainResult(seed, params, trace, train_records, test_records, cfg)


def evaluate_params(params: dict, cfg: ModelConfig, records: list, threshold: float,
                    seed: int, batch_size: int = 128) -> SeedMetrics:
    """Causal-head metrics over a record list."""
    vocab = build_vocabulary()
    sequences = encode_cohort(records, vocab)
    y = np.array([r.pasc_score_future for r in records])
    preds = []
    for start in range(0, len(sequences), batch_size):
        ids, mask = sequence_mask(sequences[start : start + batch_size])
        preds.append(predict_scores(ids, mask, params, cfg))
    return seed_metrics(seed, np.concatenate(preds), y, threshold)


def write_trace(trace: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_causal", "loss_confounder", "loss_joint", "loss_mix", "total"])
        for row in trace:
            writer.writerow([
                row["epoch"], repr(row["loss_causal"]), repr(row["loss_confounder"]),
                repr(row["loss_joint"]), repr(row["loss_mix"]), repr(row["total"]),
            ])


def run_protocol(records: list, config: RunConfig, out_dir=None) -> tuple:
    """Train and evaluate every seed; returns (MetricsReport, results).

    Per-seed checkpoints and loss traces land in out_dir when given.
    Failures carry the responsible seed.
    """
    config.validate()
    report = MetricsReport(model_tag="causal_network", threshold=config.severity_threshold)
    results = []
    for seed in config.seeds:
        try:
            result = train_one_seed(records, config, seed)
        except TrainingDiverged:
            raise
        except Exception as exc:  # noqa: BLE001 - annotate with the failing seed
            raise RuntimeError(f"seed {seed} failed: {exc}") from exc
        row = evaluate_params(
            result.params, result.model_config, result.test_records,
            config.severity_threshold, seed,
        )
        report.rows.append(row)
        results.append(result)
        if out_dir is not None:
            out = Path(out_dir)
            save_checkpoint(result.params, out / f"checkpoint_seed{seed}", config, seed)
            write_trace(result.trace, out / f"trace_seed{seed}.csv")
        log.info("seed %d: mse=%.3f accuracy=%.3f", seed, row.mse, row.accuracy)
    return report.validate(), results


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(params: dict, prefix, config: RunConfig | None, seed: int,
                    epoch: int | None = None) -> tuple:
    """Manifest JSON plus little-endian float64 payload; bit-exact round trip."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = prefix.with_suffix(".manifest.json")
    payload_path = prefix.with_suffix(".bin")

    arrays = []
    offset = 0
    blobs = []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        arrays.append({
            "name": name,
            "shape": list(p.data.shape),
            "dtype": "<f8",
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "arrays": arrays,
        "payload_file": payload_path.name,
        "payload_nbytes": offset,
        "seed": seed,
        "epoch": epoch,
        "prng": PRNG_NAME,
        "config": None if config is None else config.to_dict(),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    payload_path.write_bytes(b"".join(blobs))
    return manifest_path, payload_path


def load_checkpoint(prefix) -> tuple:
    """Returns (params dict, manifest dict)."""
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".manifest.json").read_text())
    payload = prefix.with_suffix(".bin").read_bytes()
    if len(payload) != manifest["payload_nbytes"]:
        raise ValueError(
            f"payload is {len(payload)} bytes, manifest says {manifest['payload_nbytes']}"
        )
    params = {}
    for spec in manifest["arrays"]:
        start = spec["offset"]
        raw = payload[start : start + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()
        params[spec["name"]] = Tensor(arr, requires_grad=True)
    return params, manifest

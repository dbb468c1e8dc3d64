"""Regression/severity metrics, token saliency aggregation, report emission.

Reports mirror two fixed layouts: a per-model metric table with mean and
sample standard deviation over seeds, and a per-token saliency table grouped
by category.  Emission is deterministic: identical inputs give identical
bytes, so re-running a pipeline stage cannot dirty its artifacts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import SCORE_MAX, SCORE_MIN
from .encoder import sequence_mask
from .model import gate_values
from .schema import PAD_ID, encode_cohort

log = logging.getLogger(__name__)

MODEL_TAGS = ("causal_network", "gbt_baseline", "mean_predictor")

METRIC_NAMES = ("mse", "rmse", "mae", "accuracy", "precision")


class MetricsError(ValueError):
    pass


def clip_scores(y_hat) -> np.ndarray:
    """Severity-decision view of raw scores, clamped to the score range."""
    return np.clip(np.asarray(y_hat, dtype=float), SCORE_MIN, SCORE_MAX)


def regression_metrics(y_hat, y) -> tuple:
    """(MSE, RMSE, MAE) with RMSE = sqrt(MSE) by construction."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape or y.size == 0:
        raise MetricsError(f"need equal non-empty inputs, got {y_hat.shape} vs {y.shape}")
    mse = float(np.mean((y_hat - y) ** 2))
    return mse, math.sqrt(mse), float(np.mean(np.abs(y_hat - y)))


def severity_metrics(y_hat, y, threshold: float) -> tuple:
    """(accuracy, precision) after binarizing both sides at >= threshold.

    Precision is None when nothing is predicted positive; callers must treat
    that as flagged-undefined, not zero.
    """
    if not math.isfinite(threshold):
        raise MetricsError(f"threshold must be finite, got {threshold}")
    y_hat = clip_scores(y_hat)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape or y.size == 0:
        raise MetricsError(f"need equal non-empty inputs, got {y_hat.shape} vs {y.shape}")
    pred = y_hat >= threshold
    true = y >= threshold
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    tn = int(np.sum(~pred & ~true))
    fn = int(np.sum(~pred & true))
    accuracy = (tp + tn) / y.size
    precision = None if tp + fp == 0 else tp / (tp + fp)
    return accuracy, precision


@dataclass
class SeedMetrics:
    seed: int
    mse: float
    rmse: float
    mae: float
    accuracy: float
    precision: float | None

    def validate(self) -> "SeedMetrics":
        if abs(self.rmse - math.sqrt(self.mse)) > 1e-9:
            raise MetricsError(f"rmse {self.rmse} is not sqrt(mse {self.mse})")
        if not 0.0 <= self.accuracy <= 1.0:
            raise MetricsError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.precision is not None and not 0.0 <= self.precision <= 1.0:
            raise MetricsError(f"precision {self.precision} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mse": self.mse,
            "rmse": self.rmse,
            "mae": self.mae,
            "accuracy": self.accuracy,
            "precision": self.precision,
        }


def seed_metrics(seed: int, y_hat_raw, y, threshold: float) -> SeedMetrics:
    """Regression metrics on raw scores, severity metrics on clipped scores."""
    mse, rmse, mae = regression_metrics(y_hat_raw, y)
    accuracy, precision = severity_metrics(y_hat_raw, y, threshold)
    return SeedMetrics(seed, mse, rmse, mae, accuracy, precision).validate()


@dataclass
class MetricsReport:
    model_tag: str
    threshold: float
    rows: list = field(default_factory=list)

    def validate(self) -> "MetricsReport":
        if self.model_tag not in MODEL_TAGS:
            raise MetricsError(f"model_tag must be one of {MODEL_TAGS}")
        for row in self.rows:
            row.validate()
        return self

    def aggregate(self) -> dict:
        """Mean and sample sd per metric; undefined precisions are excluded."""
        if not self.rows:
            raise MetricsError("no seed rows to aggregate")
        out = {}
        single = len(self.rows) == 1
        for name in METRIC_NAMES:
            values = [getattr(r, name) for r in self.rows]
            if name == "precision":
                excluded = [r.seed for r in self.rows if r.precision is None]
                values = [v for v in values if v is not None]
                if excluded:
                    log.warning(
                        "%s: precision undefined for seeds %s; excluded from aggregation",
                        self.model_tag, excluded,
                    )
                if not values:
                    out[name] = {"mean": None, "sd": None, "excluded_seeds": excluded}
                    continue
            mean = float(np.mean(values))
            sd = 0.0 if len(values) == 1 else float(np.std(values, ddof=1))
            entry = {"mean": mean, "sd": sd}
            if name == "precision":
                entry["excluded_seeds"] = [r.seed for r in self.rows if r.precision is None]
            if single:
                entry["single_seed"] = True
            out[name] = entry
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model_tag,
            "severity_threshold": self.threshold,
            "per_seed": [r.to_dict() for r in self.rows],
            "aggregate": self.aggregate(),
        }


# ------------------------------------------------------------------- saliency


@dataclass
class SaliencyRow:
    token: str
    category: str
    max_saliency: float
    mean_saliency: float
    count: int

    def validate(self) -> "SaliencyRow":
        if not 0.0 <= self.mean_saliency <= self.max_saliency <= 1.0:
            raise MetricsError(
                f"saliency for {self.token!r} outside [0,1] or mean above max"
            )
        return self


@dataclass
class SaliencyTable:
    rows: list = field(default_factory=list)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (-r.max_saliency, r.token))

    def category_mean(self, category: str) -> float:
        """Occurrence-weighted mean saliency over a token category."""
        num = sum(r.mean_saliency * r.count for r in self.rows if r.category == category)
        den = sum(r.count for r in self.rows if r.category == category)
        if den == 0:
            raise MetricsError(f"no occurrences for category {category!r}")
        return num / den

    def to_dicts(self) -> list:
        return [
            {
                "token": r.token,
                "category": r.category,
                "max_saliency": r.max_saliency,
                "mean_saliency": r.mean_saliency,
                "count": r.count,
            }
            for r in self.sorted_rows()
        ]


def saliency_occurrences(params: dict, cfg, records: list, vocab, batch_size: int = 64) -> tuple:
    """Per-occurrence causal-channel gate weights over a cohort.

    Returns (token_ids, values): one entry per non-PAD token occurrence, in
    cohort order.
    """
    sequences = encode_cohort(records, vocab)
    all_ids: list[int] = []
    values: list[float] = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        ids, mask = sequence_mask(chunk)
        weights = gate_values(ids, mask, params, cfg)
        keep = mask != 0.0
        all_ids.extend(int(t) for t in ids[keep])
        values.extend(float(w) for w in weights[keep])
    return np.array(all_ids), np.array(values)


def extract_saliency(params: dict, cfg, records: list, vocab, batch_size: int = 64) -> SaliencyTable:
    """Max/mean/count of the causal-channel gate weight per vocabulary token.

    Tokens that never occur are omitted (logged with count 0).
    """
    token_ids, values = saliency_occurrences(params, cfg, records, vocab, batch_size)
    rows = []
    for entry in vocab.entries:
        if entry.id == PAD_ID:
            continue
        mine = values[token_ids == entry.id]
        if mine.size == 0:
            log.info("token %r never occurred (count 0); omitted from saliency", entry.token)
            continue
        rows.append(
            SaliencyRow(
                entry.token, entry.category, float(mine.max()), float(mine.mean()), int(mine.size)
            ).validate()
        )
    return SaliencyTable(rows=rows)


def saliency_auc(token_ids: np.ndarray, values: np.ndarray, vocab,
                 positive: str, negative: str) -> float:
    """Occurrence-level ROC-AUC of gate saliency separating two token categories.

    Every non-PAD occurrence is one sample, scored by its gate value and
    labeled by its token's category; ties count half.
    """
    categories = np.array([vocab.by_id(int(t)).category for t in token_ids])
    pos = np.sort(values[categories == positive])
    neg = np.sort(values[categories == negative])
    if pos.size == 0 or neg.size == 0:
        raise MetricsError("both categories need occurrences for AUC")
    # rank-based AUC: count (pos > neg) pairs via searchsorted on sorted negatives
    wins = np.searchsorted(neg, pos, side="left").sum()
    ties = (np.searchsorted(neg, pos, side="right") - np.searchsorted(neg, pos, side="left")).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


# ------------------------------------------------------------------- emission


def _fmt(value, digits) -> str:
    return "null" if value is None else f"{value:.{digits}f}"


def _metric_cell(agg: dict, name: str) -> str:
    entry = agg[name]
    if entry["mean"] is None:
        return "null"
    digits = 3 if name in ("accuracy", "precision") else 2
    return f"{entry['mean']:.{digits}f} ± {entry['sd']:.{digits}f}"


def render_metrics_table(reports: list) -> str:
    """Fixed-layout text table: metric rows, one column per model."""
    tags = [r.model_tag for r in reports]
    aggs = [r.aggregate() for r in reports]
    width = max(18, *(len(t) + 2 for t in tags))
    lines = ["Metric".ljust(12) + "".join(t.ljust(width) for t in tags)]
    for name in METRIC_NAMES:
        cells = [_metric_cell(a, name) for a in aggs]
        lines.append(name.upper().ljust(12) + "".join(c.ljust(width) for c in cells))
    return "\n".join(lines)


def render_saliency_table(table: SaliencyTable) -> str:
    """Category-grouped saliency summary: top tokens and max per category."""
    if not table.rows:
        return "saliency table absent (no token occurrences)"
    lines = ["Category".ljust(18) + "Top tokens".ljust(40) + "Max saliency"]
    by_cat: dict[str, list] = {}
    for row in table.sorted_rows():
        by_cat.setdefault(row.category, []).append(row)
    for cat in sorted(by_cat):
        rows = by_cat[cat]
        tops = ", ".join(r.token for r in rows[:3])
        mx = max(r.max_saliency for r in rows)
        lines.append(cat.ljust(18) + tops.ljust(40) + f"{mx:.4f}")
    return "\n".join(lines)


def emit_report(reports: list, saliency: SaliencyTable | None, out_dir, config: dict | None = None) -> list:
    """Write CSV + JSON + plain-text tables; returns the written paths."""
    if not reports:
        raise MetricsError("at least one model report required")
    for r in reports:
        r.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for report in reports:
        path = out / f"metrics_{report.model_tag}.csv"
        lines = ["seed,mse,rmse,mae,accuracy,precision"]
        for row in report.rows:
            lines.append(
                f"{row.seed},{row.mse!r},{row.rmse!r},{row.mae!r},{row.accuracy!r},"
                + ("" if row.precision is None else repr(row.precision))
            )
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    saliency_path = out / "saliency.csv"
    lines = ["token,category,max_saliency,mean_saliency,count"]
    if saliency is not None:
        for row in saliency.sorted_rows():
            lines.append(f"{row.token},{row.category},{row.max_saliency!r},{row.mean_saliency!r},{row.count}")
    saliency_path.write_text("\n".join(lines) + "\n")
    written.append(saliency_path)

    payload = {
        "models": [r.to_dict() for r in reports],
        "saliency": None if saliency is None else saliency.to_dicts(),
        "config": config,
    }
    json_path = out / "report.json"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    written.append(json_path)

    text = render_metrics_table(reports)
    if saliency is None:
        text += "\n\nsaliency table absent\n"
    else:
        text += "\n\n" + render_saliency_table(saliency) + "\n"
    txt_path = out / "report.txt"
    txt_path.write_text(text)
    written.append(txt_path)
    return written

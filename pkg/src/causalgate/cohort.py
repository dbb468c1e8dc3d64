"""Seeded synthetic cohort generator with a known causal oracle.

Patients carry comorbidity flags (confounders), symptom flags, four weekly
means per wearable channel, a prior severity score, and a future severity
score.  The future score is produced by a fixed linear oracle over symptom
flags and a causal subset of wearable channels; comorbidity flags have
structurally zero weight and influence the score only through the sampling
correlation ``rho`` between the latent confounder and severity factors
(a Gaussian-copula coupling, sign-flipped in the OOD environment).

All randomness flows through numpy's seeded PCG64 generator; the draw order
is fixed and recorded in the sidecar manifest, so a (config, seed) pair
reproduces a cohort bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from statistics import NormalDist

import numpy as np

PRNG_NAME = "numpy-PCG64(default_rng)"

CONFOUNDER_FLAGS = ("menopause", "sleep_disorder", "heart_condition", "mental_health")

SYMPTOM_FLAGS = (
    "breathlessness",
    "malaise",
    "unrefreshing_sleep",
    "brain_fog",
    "insomnia",
    "joint_pain",
)

SYMPTOM_PREVALENCE = {
    "breathlessness": 0.45,
    "malaise": 0.55,
    "unrefreshing_sleep": 0.50,
    "brain_fog": 0.40,
    "insomnia": 0.35,
    "joint_pain": 0.30,
}

WEARABLE_CHANNELS = (
    "resting_hr",
    "hrv_rmssd",
    "breathing_rate",
    "sleep_latency",
    "rem_onset",
    "restless_periods",
    "sedentary_min",
    "very_active_min",
)

# per channel: baseline, severity loading, {flag: loading}, patient sd, weekly sd
_CHANNEL_MODEL = {
    "resting_hr": (70.05, 17.7, {"menopause": 3.0}, 4.0, 2.0),
    "hrv_rmssd": (42.0, -9.0, {}, 8.0, 3.0),
    "breathing_rate": (14.8, 1.6, {}, 1.1, 0.4),
    "sleep_latency": (18.0, 6.0, {"sleep_disorder": 10.0}, 5.0, 2.0),
    "rem_onset": (95.0, 4.0, {"sleep_disorder": 18.0}, 12.0, 5.0),
    "restless_periods": (9.0, 2.5, {"sleep_disorder": 5.0}, 2.5, 1.0),
    "sedentary_min": (520.0, 55.0, {"heart_condition": 35.0}, 50.0, 20.0),
    "very_active_min": (30.0, -9.0, {"heart_condition": -6.0}, 8.0, 3.0),
}

CHANNEL_BOUNDS = {
    "resting_hr": (40.0, 130.0),
    "hrv_rmssd": (5.0, 150.0),
    "breathing_rate": (8.0, 30.0),
    "sleep_latency": (0.0, 120.0),
    "rem_onset": (30.0, 240.0),
    "restless_periods": (0.0, 40.0),
    "sedentary_min": (120.0, 1200.0),
    "very_active_min": (0.0, 180.0),
}

# shared-factor loading of each flag family on its latent factor
_CONFOUNDER_LOADING = 0.85
_SYMPTOM_LOADING = 0.85

_PRIOR_NOISE_SD = 2.5

SCORE_MIN, SCORE_MAX = 0.0, 30.0

DEFAULT_MARGINALS = {
    "menopause": 0.6891,
    "sleep_disorder": 0.2745,
    "heart_condition": 0.5992,
    "mental_health": 0.3143,
}

ENVIRONMENTS = ("TRAIN", "TEST_IID", "TEST_OOD")


class CohortConfigError(ValueError):
    """Invalid cohort generation parameters."""


@dataclass
class CohortConfig:
    n_patients: int = 1155
    seed: int = 42
    spurious_strength: float = 0.6
    environment: str = "TRAIN"
    marginals: dict = field(default_factory=lambda: dict(DEFAULT_MARGINALS))
    noise_sd: float = 2.0

    def validate(self) -> "CohortConfig":
        if self.n_patients < 10:
            raise CohortConfigError(f"n_patients must be >= 10, got {self.n_patients}")
        if not -1.0 <= self.spurious_strength <= 1.0:
            raise CohortConfigError(
                f"spurious_strength must lie in [-1, 1], got {self.spurious_strength}"
            )
        if self.environment not in ENVIRONMENTS:
            raise CohortConfigError(
                f"environment {self.environment!r} not one of {ENVIRONMENTS}"
            )
        if set(self.marginals) != set(CONFOUNDER_FLAGS):
            raise CohortConfigError(
                f"marginals must cover exactly {sorted(CONFOUNDER_FLAGS)}"
            )
        for name, p in self.marginals.items():
            if not 0.0 < p < 1.0:
                raise CohortConfigError(f"prevalence for {name} must be in (0,1), got {p}")
        if self.noise_sd <= 0:
            raise CohortConfigError(f"noise_sd must be > 0, got {self.noise_sd}")
        return self


@dataclass
class OracleSpec:
    """Ground-truth score function: flags and causal channels only.

    Confounder flags carry no weight by construction; they can influence the
    score only through sampling correlations.
    """

    intercept: float = 4.0
    symptom_weights: dict = field(
        default_factory=lambda: {
            "breathlessness": 4.0,
            "malaise": 3.5,
            "unrefreshing_sleep": 2.5,
            "brain_fog": 3.0,
            "insomnia": 2.0,
            "joint_pain": 1.5,
        }
    )
    wearable_weights: dict = field(
        default_factory=lambda: {
            "resting_hr": 1.2,
            "hrv_rmssd": -1.0,
            "breathing_rate": 0.8,
            "sleep_latency": 0.6,
        }
    )
    # frozen standardization constants (center, scale) per weighted channel
    wearable_standardization: dict = field(
        default_factory=lambda: {
            "resting_hr": (72.5, 16.5),
            "hrv_rmssd": (42.0, 12.0),
            "breathing_rate": (14.8, 2.0),
            "sleep_latency": (20.8, 9.0),
        }
    )

    def validate(self) -> "OracleSpec":
        for name, w in self.symptom_weights.items():
            if name not in SYMPTOM_FLAGS:
                raise CohortConfigError(f"unknown symptom {name!r} in oracle")
            if w <= 0:
                raise CohortConfigError(f"symptom weight for {name} must be > 0, got {w}")
        for name in self.wearable_weights:
            if name not in WEARABLE_CHANNELS:
                raise CohortConfigError(f"unknown channel {name!r} in oracle")
            if name not in self.wearable_standardization:
                raise CohortConfigError(f"channel {name} lacks standardization constants")
        return self


@dataclass
class PatientRecord:
    patient_id: str
    age_years: int
    menopause: bool
    sleep_disorder: bool
    heart_condition: bool
    mental_health: bool
    symptom_flags: set
    wearable_weekly_means: dict
    prior_pasc_score: float
    pasc_score_future: float

    def validate(self) -> "PatientRecord":
        if not 37 <= self.age_years <= 89:
            raise ValueError(f"age_years {self.age_years} outside [37, 89]")
        unknown = set(self.symptom_flags) - set(SYMPTOM_FLAGS)
        if unknown:
            raise ValueError(f"unknown symptom flags {sorted(unknown)}")
        if set(self.wearable_weekly_means) != set(WEARABLE_CHANNELS):
            raise ValueError("wearable_weekly_means must cover every channel")
        for name, weeks in self.wearable_weekly_means.items():
            if len(weeks) != 4:
                raise ValueError(f"channel {name} needs exactly 4 weekly means")
            lo, hi = CHANNEL_BOUNDS[name]
            for w in weeks:
                if not (math.isfinite(w) and lo <= w <= hi):
                    raise ValueError(f"channel {name} value {w} outside [{lo}, {hi}]")
        for label in (self.prior_pasc_score, self.pasc_score_future):
            if not (math.isfinite(label) and label >= 0):
                raise ValueError(f"score {label} must be finite and >= 0")
        return self

    def confounder_flag(self, name: str) -> bool:
        return bool(getattr(self, name))

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "age_years": self.age_years,
            "menopause": self.menopause,
            "sleep_disorder": self.sleep_disorder,
            "heart_condition": self.heart_condition,
            "mental_health": self.mental_health,
            "symptom_flags": sorted(self.symptom_flags),
            "wearable_weekly_means": {c: list(self.wearable_weekly_means[c]) for c in WEARABLE_CHANNELS},
            "prior_pasc_score": self.prior_pasc_score,
            "pasc_score_future": self.pasc_score_future,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatientRecord":
        return cls(
            patient_id=d["patient_id"],
            age_years=int(d["age_years"]),
            menopause=bool(d["menopause"]),
            sleep_disorder=bool(d["sleep_disorder"]),
            heart_condition=bool(d["heart_condition"]),
            mental_health=bool(d["mental_health"]),
            symptom_flags=set(d["symptom_flags"]),
            wearable_weekly_means={c: [float(x) for x in d["wearable_weekly_means"][c]] for c in WEARABLE_CHANNELS},
            prior_pasc_score=float(d["prior_pasc_score"]),
            pasc_score_future=float(d["pasc_score_future"]),
        )


def channel_mean(record: PatientRecord, channel: str) -> float:
    return float(np.mean(record.wearable_weekly_means[channel]))


def oracle_label(record: PatientRecord, oracle: OracleSpec) -> float:
    """Noiseless, unclipped score: symptoms plus standardized causal channels."""
    y = oracle.intercept
    for name, w in oracle.symptom_weights.items():
        if name in record.symptom_flags:
            y += w
    for name, w in oracle.wearable_weights.items():
        center, scale = oracle.wearable_standardization[name]
        y += w * (channel_mean(record, name) - center) / scale
    return float(y)


def _quantile_threshold(p: float) -> float:
    return NormalDist().inv_cdf(p)


def generate(config: CohortConfig, oracle: OracleSpec | None = None) -> list:
    """Draw a cohort; deterministic given config.seed.

    The environment controls only the sign of the latent coupling: TRAIN and
    TEST_IID use +rho, TEST_OOD uses -rho.
    """
    config.validate()
    oracle = (oracle or OracleSpec()).validate()
    n = config.n_patients
    rho = config.spurious_strength
    if config.environment == "TEST_OOD":
        rho = -rho

    rng = np.random.default_rng(config.seed)

    age = np.clip(np.rint(rng.normal(61.5, 8.0, n)), 37, 89).astype(int)

    u = rng.standard_normal(n)                       # confounder factor
    v = rho * u + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)  # severity factor

    conf = {}
    lam = math.sqrt(_CONFOUNDER_LOADING)
    res = math.sqrt(1.0 - _CONFOUNDER_LOADING)
    for name in CONFOUNDER_FLAGS:
        z = lam * u + res * rng.standard_normal(n)
        conf[name] = z < _quantile_threshold(config.marginals[name])

    symp = {}
    lam_s = math.sqrt(_SYMPTOM_LOADING)
    res_s = math.sqrt(1.0 - _SYMPTOM_LOADING)
    for name in SYMPTOM_FLAGS:
        z = lam_s * v + res_s * rng.standard_normal(n)
        symp[name] = z < _quantile_threshold(SYMPTOM_PREVALENCE[name])

    weekly = {}
    for name in WEARABLE_CHANNELS:
        base, sev_load, flag_loads, sd_pat, sd_week = _CHANNEL_MODEL[name]
        mean = base + sev_load * v + rng.normal(0.0, sd_pat, n)
        for flag, load in flag_loads.items():
            source = conf[flag] if flag in conf else symp[flag]
            mean = mean + load * source.astype(float)
        lo, hi = CHANNEL_BOUNDS[name]
        weekly[name] = np.clip(mean[:, None] + rng.normal(0.0, sd_week, (n, 4)), lo, hi)

    prior_noise = rng.normal(0.0, _PRIOR_NOISE_SD, n)
    label_noise = rng.normal(0.0, config.noise_sd, n)

    records = []
    for i in range(n):
        record = PatientRecord(
            patient_id=f"pt-{config.seed}-{i:05d}",
            age_years=int(age[i]),
            menopause=bool(conf["menopause"][i]),
            sleep_disorder=bool(conf["sleep_disorder"][i]),
            heart_condition=bool(conf["heart_condition"][i]),
            mental_health=bool(conf["mental_health"][i]),
            symptom_flags={s for s in SYMPTOM_FLAGS if symp[s][i]},
            wearable_weekly_means={c: [float(x) for x in weekly[c][i]] for c in WEARABLE_CHANNELS},
            prior_pasc_score=0.0,
            pasc_score_future=0.0,
        )
        base_score = oracle_label(record, oracle)
        record.prior_pasc_score = float(np.clip(base_score + prior_noise[i], SCORE_MIN, SCORE_MAX))
        record.pasc_score_future = float(np.clip(base_score + label_noise[i], SCORE_MIN, SCORE_MAX))
        records.append(record.validate())
    return records


def split_stratified(cohort: list, fraction: float, seed: int, n_bins: int = 4):
    """Deterministic train/test split stratified over label quantile bins.

    Bins with fewer than two members fall back to a shared pool that is split
    at the same fraction.  Returns (train, test) preserving cohort order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(cohort)
    labels = np.array([r.pasc_score_future for r in cohort])
    edges = np.quantile(labels, [k / n_bins for k in range(1, n_bins)])
    bin_ids = np.searchsorted(edges, labels, side="right")

    groups: dict[int, list[int]] = {}
    pool: list[int] = []
    for b in range(n_bins):
        members = [i for i in range(n) if bin_ids[i] == b]
        if len(members) < 2:
            pool.extend(members)
        else:
            groups[b] = members
    if pool:
        groups[n_bins] = pool  # fallback stratum

    n_train_target = round(n * fraction)
    keys = sorted(groups)
    ideal = {b: fraction * len(groups[b]) for b in keys}
    take = {b: int(math.floor(ideal[b])) for b in keys}
    remainder = n_train_target - sum(take.values())
    by_frac = sorted(keys, key=lambda b: (-(ideal[b] - take[b]), b))
    for b in by_frac[: max(0, remainder)]:
        take[b] += 1

    rng = np.random.default_rng(seed)
    train_idx: set[int] = set()
    for b in keys:
        members = np.array(groups[b])
        rng.shuffle(members)
        train_idx.update(int(i) for i in members[: take[b]])

    train = [cohort[i] for i in range(n) if i in train_idx]
    test = [cohort[i] for i in range(n) if i not in train_idx]
    return train, test


# -- JSONL persistence -------------------------------------------------------


def save_cohort(records: list, path, config: CohortConfig | None = None) -> None:
    """Write one record per line plus a sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    manifest = {
        "prng": PRNG_NAME,
        "n_patients": len(records),
        "config": None if config is None else {
            f.name: getattr(config, f.name) for f in fields(config)
        },
    }
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_cohort(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(PatientRecord.from_dict(json.loads(line)))
    return records

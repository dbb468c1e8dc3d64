"""Controlled-vocabulary narrative encoding of patient records.

A record becomes a fixed-length token sequence: demographics, comorbidity
flags, symptom flags, one tercile bin per wearable channel, and a binned
prior score, padded with PAD up to length ``SEQ_LEN``.  Administrative
filler tokens are injected deterministically so that zero-information tokens
exist in every sequence and their suppression is measurable.

The vocabulary (token, id, category, binning thresholds) is frozen in
``vocab_manifest.json`` next to this module; ``build_vocabulary()`` is the
in-code source of truth and a test pins the two against each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .cohort import SYMPTOM_FLAGS, WEARABLE_CHANNELS, PatientRecord, channel_mean

# token categories
CAUSAL_SYMPTOM = "CAUSAL_SYMPTOM"
CONFOUNDER = "CONFOUNDER"
ADMINISTRATIVE = "ADMINISTRATIVE"
WEARABLE_BIN = "WEARABLE_BIN"
STRUCTURAL = "STRUCTURAL"
CATEGORIES = (CAUSAL_SYMPTOM, CONFOUNDER, ADMINISTRATIVE, WEARABLE_BIN, STRUCTURAL)

PAD_ID = 0
BOS_ID = 1
SEQ_LEN = 48

SYMPTOM_TOKENS = {
    "breathlessness": "breath",
    "malaise": "malaise",
    "unrefreshing_sleep": "unrefreshing",
    "brain_fog": "fog",
    "insomnia": "insomnia",
    "joint_pain": "joint_pain",
}

CONFOUNDER_TOKENS = ("menopause", "sleep_disorder", "heart_condition", "mental_health")

# baseline-noise vocabulary entries with no generator flag; they never occur
# in synthetic cohorts but keep the token-class table complete
EXTRA_CONFOUNDER_TOKENS = ("diabetes", "hypertension", "anxiety")

AGE_BIN_TOKENS = ("age_37_54", "age_55_64", "age_65_74", "age_75_89")
AGE_BIN_EDGES = (54, 64, 74)  # age <= edge selects the bin

PRIOR_BIN_TOKENS = ("prior_none", "prior_mild", "prior_moderate", "prior_severe")
PRIOR_BIN_EDGES = (4.0, 10.0, 16.0)  # value <= edge selects the lower bin

_CHANNEL_PREFIX = {
    "resting_hr": "hr",
    "hrv_rmssd": "hrv",
    "breathing_rate": "br",
    "sleep_latency": "lat",
    "rem_onset": "rem",
    "restless_periods": "restless",
    "sedentary_min": "sed",
    "very_active_min": "active",
}

# tercile thresholds of each channel's 4-week mean, frozen from a
# 10,000-patient draw of the default generator (seed 123); values at a
# threshold fall into the lower bin
WEARABLE_THRESHOLDS = {
    "resting_hr": (65.0, 80.0),
    "hrv_rmssd": (36.7, 47.3),
    "breathing_rate": (14.0, 15.7),
    "sleep_latency": (17.5, 24.3),
    "rem_onset": (93.3, 105.8),
    "restless_periods": (8.8, 11.9),
    "sedentary_min": (510.7, 571.9),
    "very_active_min": (21.3, 31.2),
}

_FILLERS = (
    "that", "to", "by", "the", "of", "with", "and", "was", "is", "on",
    "for", "as", "at", "from", "this", "her", "noted", "reported", "record",
    "summary", "patient", "female", "visit", "status", "review", "week",
    "mean", "level", "data", "entry", "last", "months", "three", "follow_up",
    "plan", "during", "daily", "average", "scale",
)

_SECTION_MARKERS = (
    "<demographics>", "<conditions>", "<symptoms>", "<wearables>", "<history>",
)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class VocabEntry:
    token: str
    id: int
    category: str


class Vocabulary:
    """Immutable token table with contiguous ids and fixed categories."""

    def __init__(self, entries: list):
        self.entries = list(entries)
        ids = sorted(e.id for e in self.entries)
        if ids != list(range(len(self.entries))):
            raise SchemaError("vocabulary ids must be contiguous 0..V-1")
        tokens = [e.token for e in self.entries]
        if len(set(tokens)) != len(tokens):
            raise SchemaError("vocabulary tokens must be unique")
        for e in self.entries:
            if e.category not in CATEGORIES:
                raise SchemaError(f"unknown category {e.category!r} for token {e.token!r}")
        self._by_token = {e.token: e for e in self.entries}
        self._by_id = {e.id: e for e in self.entries}
        if self._by_id[PAD_ID].token != "<pad>" or self._by_id[BOS_ID].token != "<bos>":
            raise SchemaError("id 0 must be <pad> and id 1 must be <bos>")

    def __len__(self):
        return len(self.entries)

    def lookup(self, token: str) -> VocabEntry:
        try:
            return self._by_token[token]
        except KeyError:
            raise SchemaError(f"token {token!r} not in vocabulary") from None

    def by_id(self, token_id: int) -> VocabEntry:
        try:
            return self._by_id[token_id]
        except KeyError:
            raise SchemaError(f"token id {token_id} not in vocabulary") from None

    def id_of(self, token: str) -> int:
        return self.lookup(token).id

    def tokens_of_category(self, category: str) -> list:
        return [e.token for e in self.entries if e.category == category]

    def manifest_dict(self) -> dict:
        return {
            "tokens": [
                {"token": e.token, "id": e.id, "category": e.category}
                for e in self.entries
            ],
            "wearable_thresholds": {c: list(WEARABLE_THRESHOLDS[c]) for c in WEARABLE_CHANNELS},
            "prior_bin_edges": list(PRIOR_BIN_EDGES),
            "age_bin_edges": list(AGE_BIN_EDGES),
            "seq_len": SEQ_LEN,
        }


def build_vocabulary() -> Vocabulary:
    """The fixed controlled vocabulary; ids are assigned in declaration order."""
    entries = []

    def put(token, category):
        entries.append(VocabEntry(token, len(entries), category))

    put("<pad>", STRUCTURAL)
    put("<bos>", STRUCTURAL)
    put("<eos>", STRUCTURAL)
    for marker in _SECTION_MARKERS:
        put(marker, STRUCTURAL)
    for token in PRIOR_BIN_TOKENS:
        put(token, STRUCTURAL)
    for flag in SYMPTOM_FLAGS:
        put(SYMPTOM_TOKENS[flag], CAUSAL_SYMPTOM)
    for token in CONFOUNDER_TOKENS:
        put(token, CONFOUNDER)
    for token in EXTRA_CONFOUNDER_TOKENS:
        put(token, CONFOUNDER)
    for token in AGE_BIN_TOKENS:
        put(token, CONFOUNDER)
    for token in _FILLERS:
        put(token, ADMINISTRATIVE)
    for channel in WEARABLE_CHANNELS:
        prefix = _CHANNEL_PREFIX[channel]
        for level in ("low", "mid", "high"):
            put(f"{prefix}_{level}", WEARABLE_BIN)
    return Vocabulary(entries)


def load_manifest() -> dict:
    with resources.files("causalgate").joinpath("vocab_manifest.json").open("r") as fh:
        return json.load(fh)


@dataclass
class TokenSequence:
    ids: list
    categories: list
    patient_id: str

    def validate(self, vocab: Vocabulary) -> "TokenSequence":
        if len(self.ids) != SEQ_LEN or len(self.categories) != SEQ_LEN:
            raise SchemaError(f"sequence length must be {SEQ_LEN}")
        seen_pad = False
        for tid, cat in zip(self.ids, self.categories):
            entry = vocab.by_id(tid)
            if entry.category != cat:
                raise SchemaError(f"category mismatch for id {tid}")
            if tid == PAD_ID:
                seen_pad = True
            elif seen_pad:
                raise SchemaError("PAD tokens must form a suffix")
        return self

    def length(self) -> int:
        """Number of non-PAD positions."""
        n = 0
        for tid in self.ids:
            if tid == PAD_ID:
                break
            n += 1
        return n


def _bin_index(value: float, edges) -> int:
    """Index of the bin holding value; ties go to the lower bin."""
    for k, edge in enumerate(edges):
        if value <= edge:
            return k
    return len(edges)


def bin_wearable(channel: str, mean_value: float) -> str:
    """Tercile bin token for a channel's 4-week mean."""
    if channel not in WEARABLE_THRESHOLDS:
        raise SchemaError(f"unknown wearable channel {channel!r}")
    level = ("low", "mid", "high")[_bin_index(mean_value, WEARABLE_THRESHOLDS[channel])]
    return f"{_CHANNEL_PREFIX[channel]}_{level}"


def age_bin(age_years: int) -> str:
    return AGE_BIN_TOKENS[_bin_index(age_years, AGE_BIN_EDGES)]


def prior_bin(prior_score: float) -> str:
    return PRIOR_BIN_TOKENS[_bin_index(prior_score, PRIOR_BIN_EDGES)]


def encode(record: PatientRecord, vocab: Vocabulary, seq_len: int = SEQ_LEN) -> TokenSequence:
    """Deterministic narrative encoding of one record.

    Each true flag emits its token exactly once; each wearable channel emits
    exactly one bin token; filler tokens are constant across records.
    """
    tokens = ["<bos>"]
    tokens += ["<demographics>", "record", "of", "patient", "female", age_bin(record.age_years)]
    tokens += ["<conditions>", "noted", "that"]
    tokens += [flag for flag in CONFOUNDER_TOKENS if record.confounder_flag(flag)]
    tokens += ["<symptoms>", "reported"]
    tokens += [SYMPTOM_TOKENS[flag] for flag in SYMPTOM_FLAGS if flag in record.symptom_flags]
    tokens += ["<wearables>", "week", "mean"]
    tokens += [bin_wearable(c, channel_mean(record, c)) for c in WEARABLE_CHANNELS]
    tokens += ["<history>", "status", prior_bin(record.prior_pasc_score)]
    tokens += ["<eos>"]

    if len(tokens) > seq_len:
        raise SchemaError(
            f"emission of {len(tokens)} tokens exceeds sequence length {seq_len}"
        )
    ids = [vocab.id_of(t) for t in tokens] + [PAD_ID] * (seq_len - len(tokens))
    categories = [vocab.by_id(i).category for i in ids]
    return TokenSequence(ids=ids, categories=categories, patient_id=record.patient_id)


def encode_cohort(records: list, vocab: Vocabulary, seq_len: int = SEQ_LEN) -> list:
    return [encode(r, vocab, seq_len) for r in records]

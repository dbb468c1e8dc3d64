import copy

import numpy as np
import pytest

from causalgate.cohort import (
    CONFOUNDER_FLAGS,
    SYMPTOM_FLAGS,
    WEARABLE_CHANNELS,
    CohortConfig,
    CohortConfigError,
    OracleSpec,
    PatientRecord,
    channel_mean,
    generate,
    load_cohort,
    oracle_label,
    save_cohort,
    split_stratified,
)


@pytest.fixture(scope="module")
def default_cohort():
    return generate(CohortConfig(n_patients=1155, seed=42))


# ------------------------------------------------------------------ generation


def test_cohort_size_and_menopause_prevalence(default_cohort):
    assert len(default_cohort) == 1155
    prevalence = np.mean([r.menopause for r in default_cohort])
    assert 0.659 <= prevalence <= 0.719


def test_all_marginals_within_three_points():
    cfg = CohortConfig(n_patients=2000, seed=7)
    cohort = generate(cfg)
    for flag in CONFOUNDER_FLAGS:
        prevalence = np.mean([getattr(r, flag) for r in cohort])
        assert abs(prevalence - cfg.marginals[flag]) <= 0.03, flag


def test_rho_zero_gives_independence():
    cohort = generate(CohortConfig(n_patients=2000, seed=11, spurious_strength=0.0))
    men = np.array([r.menopause for r in cohort], dtype=float)
    mal = np.array(["malaise" in r.symptom_flags for r in cohort], dtype=float)
    assert abs(np.corrcoef(men, mal)[0, 1]) <= 0.06


def test_degenerate_oracle_all_labels_at_intercept():
    oracle = OracleSpec(intercept=5.0, symptom_weights={}, wearable_weights={})
    cohort = generate(CohortConfig(n_patients=50, seed=2, noise_sd=1e-9), oracle)
    labels = [r.pasc_score_future for r in cohort]
    assert np.allclose(labels, 5.0, atol=1e-6)


def test_generation_deterministic(default_cohort):
    again = generate(CohortConfig(n_patients=1155, seed=42))
    assert [r.to_dict() for r in again] == [r.to_dict() for r in default_cohort]


def test_records_valid(default_cohort):
    for r in default_cohort[:200]:
        r.validate()


def test_config_validation():
    with pytest.raises(CohortConfigError, match="spurious_strength"):
        CohortConfig(spurious_strength=1.5).validate()
    with pytest.raises(CohortConfigError, match="n_patients"):
        CohortConfig(n_patients=3).validate()
    with pytest.raises(CohortConfigError, match="noise_sd"):
        CohortConfig(noise_sd=0.0).validate()
    with pytest.raises(CohortConfigError, match="environment"):
        CohortConfig(environment="SHIFT").validate()


# ------------------------------------------------------------------ the oracle


def test_oracle_ignores_confounder_flags(default_cohort):
    oracle = OracleSpec()
    for record in default_cohort[:1000]:
        flipped = copy.deepcopy(record)
        flipped.menopause = not flipped.menopause
        flipped.sleep_disorder = not flipped.sleep_disorder
        flipped.heart_condition = not flipped.heart_condition
        flipped.mental_health = not flipped.mental_health
        assert oracle_label(record, oracle) == oracle_label(flipped, oracle)


def test_oracle_symptom_linearity(default_cohort):
    oracle = OracleSpec()
    record = next(r for r in default_cohort if "brain_fog" not in r.symptom_flags)
    with_fog = copy.deepcopy(record)
    with_fog.symptom_flags = set(record.symptom_flags) | {"brain_fog"}
    delta = oracle_label(with_fog, oracle) - oracle_label(record, oracle)
    assert abs(delta - oracle.symptom_weights["brain_fog"]) < 1e-12


def test_oracle_matches_bruteforce_recomputation(default_cohort):
    # independent scalar recomputation of the linear form
    oracle = OracleSpec()
    for record in default_cohort[:100]:
        expected = oracle.intercept
        for flag, w in oracle.symptom_weights.items():
            expected += w * (flag in record.symptom_flags)
        for ch, w in oracle.wearable_weights.items():
            center, scale = oracle.wearable_standardization[ch]
            mean4 = sum(record.wearable_weekly_means[ch]) / 4.0
            expected += w * (mean4 - center) / scale
        assert abs(oracle_label(record, oracle) - expected) <= 1e-12


def test_environment_flip_reverses_correlation():
    def count_corr(env, seed):
        cohort = generate(
            CohortConfig(n_patients=2000, seed=seed, spurious_strength=0.6, environment=env)
        )
        cc = np.array([sum(getattr(r, f) for f in CONFOUNDER_FLAGS) for r in cohort])
        sc = np.array([len(r.symptom_flags) for r in cohort])
        return np.corrcoef(cc, sc)[0, 1]

    train = count_corr("TRAIN", 30)
    ood = count_corr("TEST_OOD", 31)
    iid = count_corr("TEST_IID", 32)
    assert train > 0.25 and ood < -0.25
    assert np.sign(train) != np.sign(ood)
    assert abs(train - iid) < 0.15


def test_correlation_tracks_rho_monotonically():
    def count_corr(rho):
        cohort = generate(CohortConfig(n_patients=4000, seed=9, spurious_strength=rho))
        cc = np.array([sum(getattr(r, f) for f in CONFOUNDER_FLAGS) for r in cohort])
        sc = np.array([len(r.symptom_flags) for r in cohort])
        return np.corrcoef(cc, sc)[0, 1]

    c0, c3, c6 = count_corr(0.0), count_corr(0.3), count_corr(0.6)
    assert abs(c0) < 0.06
    assert c0 < c3 < c6
    assert c6 > 0.4


# ------------------------------------------------------------------ splitting


def test_split_sizes(default_cohort):
    train, test = split_stratified(default_cohort, 0.8, seed=1)
    assert len(train) == 924 and len(test) == 231


def test_split_deterministic(default_cohort):
    a = split_stratified(default_cohort, 0.8, seed=5)
    b = split_stratified(default_cohort, 0.8, seed=5)
    assert [r.patient_id for r in a[0]] == [r.patient_id for r in b[0]]
    c = split_stratified(default_cohort, 0.8, seed=6)
    assert [r.patient_id for r in a[0]] != [r.patient_id for r in c[0]]


def test_split_stratification_balanced(default_cohort):
    labels = np.array([r.pasc_score_future for r in default_cohort])
    edges = np.quantile(labels, [0.25, 0.5, 0.75])
    train, _ = split_stratified(default_cohort, 0.8, seed=3)
    for b in range(4):
        members = [r for r in default_cohort if np.searchsorted(edges, r.pasc_score_future, side="right") == b]
        in_train = [r for r in train if np.searchsorted(edges, r.pasc_score_future, side="right") == b]
        assert abs(len(in_train) - 0.8 * len(members)) <= 1.0


def test_split_constant_labels():
    records = generate(CohortConfig(n_patients=50, seed=4))
    for r in records:
        r.pasc_score_future = 7.0
    train, test = split_stratified(records, 0.8, seed=2)
    assert len(train) == 40 and len(test) == 10


def test_split_partition_is_exact(default_cohort):
    train, test = split_stratified(default_cohort, 0.8, seed=9)
    ids = sorted(r.patient_id for r in train) + sorted(r.patient_id for r in test)
    assert sorted(ids) == sorted(r.patient_id for r in default_cohort)


# ------------------------------------------------------------------ persistence


def test_jsonl_round_trip(tmp_path, default_cohort):
    path = tmp_path / "cohort.jsonl"
    save_cohort(default_cohort[:40], path, CohortConfig(n_patients=40, seed=42))
    loaded = load_cohort(path)
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in default_cohort[:40]]
    manifest = (tmp_path / "cohort.jsonl.manifest.json").read_text()
    assert "PCG64" in manifest


def test_save_idempotent(tmp_path, default_cohort):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_cohort(default_cohort[:25], p1)
    save_cohort(default_cohort[:25], p2)
    assert p1.read_bytes() == p2.read_bytes()

import numpy as np
import pytest

from cvep.errors import (
    EmptyTestSetError,
    FractionOverflowError,
    MissingCheckpointError,
    SingleSubjectError,
)
from cvep.encoder import FeatureTensor
from cvep.head import Model, TaskHead
from cvep.protocols import (
    FAST_STIM_FRACTIONS,
    GROUP_MOD_FRACTIONS,
    ExperimentResult,
    PreparedDataset,
    PreparedSubject,
    ProtocolConfig,
    _apportion,
    aggregate,
    calibration_seconds,
    evaluate_accuracy,
    gather,
    plan_calibration_free,
    plan_subject,
    prepare_dataset,
    read_results_csv,
    run_calibration_free,
    run_limited,
    run_within,
    write_results_csv,
)
from cvep.synth import CohortSpec, generate_cohort


def stub_dataset(n_subjects, trials_per_class, K, layout="ensemble", n_test=0):
    """Split planning only looks at unit labels, so no features are needed."""
    subs = []
    for i in range(n_subjects):
        labels = np.repeat(np.arange(K), trials_per_class)
        n = labels.size
        cal_units = np.arange(n) if layout == "ensemble" else np.repeat(np.arange(n), K)
        test_labels = None if not n_test else np.repeat(np.arange(K), n_test)
        subs.append(PreparedSubject(f"{i + 1:02d}", layout, K, 1.06, None, labels, cal_units, labels,
                                    None if not n_test else object(), test_labels))
    return PreparedDataset(subs, "stub", "single", None)


def keys(refs):
    return {tuple(r) for r in refs}


def test_calibration_free_excludes_target_subject():
    data = stub_dataset(17, 5, 4)
    plan = plan_calibration_free(data, "11", seed=0)
    assert plan.subjects("train") | plan.subjects("val") == {f"{i:02d}" for i in range(1, 18)} - {"11"}
    assert plan.subjects("test") == {"11"}
    assert not keys(plan.train) & keys(plan.test)
    assert not keys(plan.val) & keys(plan.test)
    assert not keys(plan.train) & keys(plan.val)


def test_calibration_free_counts_1000_trials():
    # 10 other subjects x 10 classes x 10 trials = 1000 pooled trials
    data = stub_dataset(11, 10, 10)
    plan = plan_calibration_free(data, "01", seed=3)
    assert len(plan.train) + len(plan.val) == 1000
    assert abs(len(plan.val) - 100) <= 100  # bound by the number of strata
    assert len(plan.val) == 100


def test_calibration_free_uneven_strata():
    # 7 trials per class: 10% of each stratum is fractional, totals still round correctly
    data = stub_dataset(4, 7, 16)
    plan = plan_calibration_free(data, "02", seed=1)
    assert len(plan.val) == round(0.1 * 3 * 7 * 16)
    assert len(plan.train) + len(plan.val) == 3 * 7 * 16


def test_single_subject_rejected():
    with pytest.raises(SingleSubjectError):
        plan_calibration_free(stub_dataset(1, 5, 4), "01")


def test_split_determinism():
    data = stub_dataset(5, 10, 16)
    assert plan_calibration_free(data, "03", 7) == plan_calibration_free(data, "03", 7)
    assert plan_subject(data, "03", 0.4, 7) == plan_subject(data, "03", 0.4, 7)
    assert plan_subject(data, "03", 0.4, 7) != plan_subject(data, "03", 0.4, 8)


@pytest.mark.parametrize("p", FAST_STIM_FRACTIONS)
def test_subject_split_geometry(p):
    data = stub_dataset(2, 50, 16)  # 800 trials per subject, like a Fast-Stim session
    plan = plan_subject(data, "01", p, seed=0)
    assert len(plan.test) == 160 and len(plan.val) == 80
    assert len(plan.train) == round(p * 800)
    assert not keys(plan.train) & keys(plan.val)
    assert not (keys(plan.train) | keys(plan.val)) & keys(plan.test)
    assert plan.subjects("train") == {"01"}


def test_test_set_fixed_across_fractions_and_train_nested():
    data = stub_dataset(2, 10, 16)
    plans = [plan_subject(data, "02", p, seed=4) for p in FAST_STIM_FRACTIONS]
    for a, b in zip(plans, plans[1:]):
        assert a.test == b.test and a.val == b.val
        assert keys(a.train) <= keys(b.train)


def test_limited_and_within_share_test_sets():
    data = stub_dataset(3, 10, 16)
    for p in (0.1, 0.7):
        a = plan_subject(data, "02", p, 5, "limited")
        b = plan_subject(data, "02", p, 5, "within")
        assert a.test == b.test and a.train == b.train and a.val == b.val


def test_fraction_overflow():
    data = stub_dataset(2, 10, 16)
    with pytest.raises(FractionOverflowError):
        plan_subject(data, "01", 0.8, 0)
    with pytest.raises(FractionOverflowError):
        plan_subject(data, "01", 0.0, 0)


def test_separate_test_session_allows_larger_fractions():
    data = stub_dataset(2, 5, 16, layout="circular_shift", n_test=3)
    for p in GROUP_MOD_FRACTIONS + (0.9,):
        plan = plan_subject(data, "01", p, 0)
        assert all(part == "test" for _, part, _ in plan.test) and len(plan.test) == 48
        assert len(plan.train) == round(p * 80)
    with pytest.raises(FractionOverflowError):
        plan_subject(data, "01", 0.95, 0)


def test_apportion_sums_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sizes = rng.integers(1, 30, size=rng.integers(1, 20))
        share = rng.uniform(0.05, 0.9)
        got = _apportion(sizes, share, np.random.default_rng(1))
        assert got.sum() == int(np.floor(share * sizes.sum() + 0.5))
        assert np.all(got <= sizes) and np.all(got >= 0)
        assert np.all(np.abs(got - share * sizes) < 1 + 1e-9)


def constant_model(K, cls=None):
    head = TaskHead.zeros(K)
    if cls is not None:
        head.b2[cls] = 1.0
    return Model(head, Model.create(1, K, None).spatial, None)


def zero_feats(n):
    return FeatureTensor(np.zeros((n, 16, 4, 512)))


def test_accuracy_examples():
    assert evaluate_accuracy(constant_model(4, 2), zero_feats(3), [2, 2, 2]) == 1.0
    assert evaluate_accuracy(constant_model(32, 5), zero_feats(64), np.arange(64) % 32) == 1 / 32
    assert evaluate_accuracy(constant_model(4, 1), zero_feats(4), [1, 1, 0, 1]) == 0.75
    # all-tied logits resolve to class 0
    assert evaluate_accuracy(constant_model(4), zero_feats(2), [0, 0]) == 1.0
    with pytest.raises(EmptyTestSetError):
        evaluate_accuracy(constant_model(4), zero_feats(0), [])


def test_calibration_seconds():
    assert calibration_seconds(20, 1.06) == 22
    assert calibration_seconds(40, 1.06) == 43
    assert calibration_seconds(640, 1.05) == 672
    for d in (0.0, 1.05, 1.06, 5.3):
        assert calibration_seconds(0, d) == 0
    assert calibration_seconds(200, 1.06) == 212
    with pytest.raises(ValueError):
        calibration_seconds(-1, 1.0)


def result(subject, acc, paradigm="limited", fraction=0.1, seed=0):
    return ExperimentResult("d", subject, paradigm, fraction, "single", acc, 10, 22, seed, 3)


def test_aggregate_examples():
    (s,) = aggregate([result("01", 0.6)])
    assert s.std == 0 and s.mean == 0.6 and s.n == 1
    (s,) = aggregate([result("01", 0.6), result("02", 0.8)])
    assert abs(s.mean - 0.7) < 1e-12 and abs(s.std - 0.1) < 1e-12
    rows = [result("01", 0.6), result("11", 0.1), result("02", 0.8)]
    (s,) = aggregate(rows, exclude=["11"])
    assert s.n == 2 and abs(s.mean - 0.7) < 1e-12
    groups = aggregate(rows + [result("01", 0.9, fraction=0.2), result("01", 0.5, "calibration_free", 0.0)])
    assert [(g.paradigm, g.fraction) for g in groups] == [("calibration_free", 0.0), ("limited", 0.1),
                                                          ("limited", 0.2)]


def test_results_csv_round_trip(tmp_path):
    rows = [result("02", 1 / 3, seed=1), result("01", 0.1 + 0.2), result("01", 0.5, "calibration_free", 0.0)]
    path = write_results_csv(rows, tmp_path / "r.csv", config_hash="abc")
    text = path.read_text()
    assert text.splitlines()[0] == "# config_hash=abc"
    assert text.splitlines()[1] == "dataset,subject,paradigm,fraction,trial_mode,accuracy,n_test,calib_seconds,seed,selected_epoch"
    back = read_results_csv(path)
    assert sorted(back, key=repr) == sorted(rows, key=repr)
    assert back[0].paradigm == "calibration_free"


@pytest.fixture(scope="module")
def small_cohort():
    spec = CohortSpec(n_subjects=3, snr=2.0, n_trials_per_target=10)
    return prepare_dataset(generate_cohort(spec, 0))


def test_end_to_end_small(small_cohort):
    cfg = ProtocolConfig(epochs_free=2, epochs_limited=2)
    free, models = run_calibration_free(small_cohort, cfg, seed=0)
    assert len(free) == 3 and all(r.calib_seconds == 0 and r.fraction == 0.0 for r in free)
    assert all(r.n_test == 160 for r in free)
    lim = run_limited(small_cohort, [0.1, 0.2], cfg, 0, models, subjects=["01"])
    wit = run_within(small_cohort, [0.1, 0.2], cfg, 0, subjects=["01"])
    assert [r.calib_seconds for r in lim] == [calibration_seconds(16, 1.0667), calibration_seconds(32, 1.0667)]
    assert [r.n_test for r in lim] == [r.n_test for r in wit] == [32, 32]
    for r in free + lim + wit:
        assert 0 <= r.accuracy <= 1 and r.selected_epoch in (1, 2)
    # warm start is used: the untouched checkpoint must not be modified by fine-tuning
    before = models["01"].head.W2.copy()
    run_limited(small_cohort, [0.1], cfg, 0, models, subjects=["01"])
    np.testing.assert_array_equal(models["01"].head.W2, before)
    with pytest.raises(MissingCheckpointError):
        run_limited(small_cohort, [0.1], cfg, 0, {}, subjects=["01"])


def test_gather_and_averaged_mode():
    ds = generate_cohort(CohortSpec(n_subjects=2, n_trials_per_target=10), 1)
    data = prepare_dataset(ds, trial_mode="averaged", group_size=5)
    sub = data.subjects[0]
    assert sub.n_units == 32 and abs(sub.unit_duration_s - 5 * 64 / 60) < 1e-12
    plan = plan_subject(data, "01", 0.7, 0)
    x, y = gather(data, plan.train)
    assert len(x) == len(y) == round(0.7 * 32)
    with pytest.raises(EmptyTestSetError):
        gather(data, [])


def test_circular_units_keep_synthesized_rows_together():
    spec = CohortSpec(n_subjects=2, layout="circular_shift", n_reference_trials=10, n_test_per_target=2)
    data = prepare_dataset(generate_cohort(spec, 0))
    sub = data.subjects[0]
    assert sub.n_units == 10 and len(sub.cal) == 160
    plan = plan_subject(data, "01", 0.5, 0)
    x, y = gather(data, plan.train)
    assert len(y) == 5 * 16 and sorted(np.bincount(y).tolist()) == [5] * 16
    xt, yt = gather(data, plan.test)
    assert len(yt) == 32


@pytest.mark.slow
def test_shared_structure_transfers_better():
    cfg = ProtocolConfig(epochs_free=5)
    acc = {}
    for rho in (0.0, 1.0):
        data = prepare_dataset(generate_cohort(CohortSpec(n_subjects=4, similarity_rho=rho, snr=2.0), 0))
        res, _ = run_calibration_free(data, cfg, seed=0)
        acc[rho] = np.mean([r.accuracy for r in res])
    assert acc[1.0] >= 0.8
    assert acc[0.0] < acc[1.0]

import numpy as np
import pytest

from cvep.baseline import (
    build_templates,
    cca,
    cca_scores,
    classify_cca,
    leading_eigenpair,
    predict_cca,
    run_baseline_cca,
)
from cvep.dsp import TrialSet
from cvep.errors import MissingClassError, SingularCovarianceError
from cvep.synth import CohortSpec, generate_cohort

from oracles import binomial_interval


def eig_cca_r(X, Y):
    """Leading canonical correlation from the unsymmetrized eigenproblem (oracle)."""
    Xc = X - X.mean(1, keepdims=True)
    Yc = Y - Y.mean(1, keepdims=True)
    Cxx, Cyy, Cxy = Xc @ Xc.T, Yc @ Yc.T, Xc @ Yc.T
    M = np.linalg.solve(Cxx, Cxy) @ np.linalg.solve(Cyy, Cxy.T)
    return float(np.sqrt(np.max(np.linalg.eigvals(M).real)))


def tset(data, labels, fs=240):
    return TrialSet(np.asarray(data, dtype=float), np.asarray(labels), fs, "01", data.shape[2] / fs)


def test_templates_one_trial_per_class():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 2, 50))
    tpl = build_templates(tset(X, [2, 0, 1]))
    np.testing.assert_array_equal(tpl.templates, X[[1, 2, 0]])
    assert tpl.counts.tolist() == [1, 1, 1]


def test_templates_identical_trials():
    x = np.random.default_rng(1).normal(size=(2, 40))
    tpl = build_templates(tset(np.stack([x, x, -x, -x]), [0, 0, 1, 1]))
    np.testing.assert_allclose(tpl.templates[0], x, atol=1e-15)
    np.testing.assert_allclose(tpl.templates[1], -x, atol=1e-15)


def test_templates_missing_class():
    with pytest.raises(MissingClassError):
        build_templates(tset(np.zeros((2, 1, 10)), [0, 2]))
    with pytest.raises(MissingClassError):
        build_templates(tset(np.zeros((2, 1, 10)), [0, 1]), n_classes=3)


def test_cca_self_correlation():
    X = np.random.default_rng(2).normal(size=(4, 500))
    assert abs(cca(X, X).r - 1) < 1e-9


def test_cca_independent_signals():
    rng = np.random.default_rng(3)
    assert cca(rng.normal(size=(2, 100_000)), rng.normal(size=(2, 100_000))).r < 0.05


def test_cca_one_channel_is_pearson():
    rng = np.random.default_rng(4)
    x = rng.normal(size=300)
    y = 0.4 * x + rng.normal(size=300)
    res = cca(x[None], y[None])
    assert abs(res.r - abs(np.corrcoef(x, y)[0, 1])) < 1e-9
    res = cca(x[None], -y[None])
    assert abs(res.r - abs(np.corrcoef(x, y)[0, 1])) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_cca_matches_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(2, 400))
    X = rng.normal(size=(5, 2)) @ s + rng.normal(size=(5, 400))
    Y = rng.normal(size=(3, 2)) @ s + 2 * rng.normal(size=(3, 400))
    res = cca(X, Y, ridge=0)
    assert abs(res.r - eig_cca_r(X, Y)) < 1e-9
    # the returned weights realise the correlation
    u, v = res.wx @ X, res.wy @ Y
    assert abs(np.corrcoef(u, v)[0, 1] - res.r) < 1e-9


def test_cca_invariances():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(3, 200)), rng.normal(size=(3, 200))
    Y[0] += X[1]
    r = cca(X, Y, ridge=0).r
    assert abs(cca(Y, X, ridge=0).r - r) < 1e-9
    assert abs(cca(7 * X, 0.01 * Y + 3, ridge=0).r - r) < 1e-9
    assert abs(cca(X[::-1], Y[[2, 0, 1]], ridge=0).r - r) < 1e-9
    assert 0 <= r <= 1


def test_cca_singular_without_ridge():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(3, 100))
    X[2] = X[0] + X[1]
    with pytest.raises(SingularCovarianceError):
        cca(X, rng.normal(size=(3, 100)), ridge=0)
    assert 0 <= cca(X, rng.normal(size=(3, 100))).r <= 1


def test_leading_eigenpair_matches_eigh():
    rng = np.random.default_rng(7)
    for n in (1, 3, 8):
        A = rng.normal(size=(n, n))
        M = A @ A.T
        lam, v = leading_eigenpair(M)
        w, V = np.linalg.eigh(M)
        assert abs(lam - w[-1]) <= 1e-10 * w[-1]
        assert abs(abs(v @ V[:, -1]) - 1) < 1e-8


def test_classify_exact_template():
    rng = np.random.default_rng(8)
    tpl = build_templates(tset(rng.normal(size=(6, 3, 120)), np.arange(6)))
    assert classify_cca(tpl.templates[3], tpl) == 3


def test_classify_ties_go_low():
    x = np.random.default_rng(9).normal(size=(2, 60))
    tpl = build_templates(tset(np.stack([x, x, x]), [0, 1, 2]))
    assert classify_cca(x, tpl) == 0
    assert np.allclose(cca_scores(x, tpl), cca_scores(x, tpl)[0])


def split_cohort(snr, noise=1.0):
    spec = CohortSpec(n_subjects=1, snr=snr, noise_sigma=noise, n_trials_per_target=20)
    sub = generate_cohort(spec, 0).subjects[0]
    ts = sub.trials
    first = np.concatenate([np.flatnonzero(ts.labels == k)[:10] for k in range(16)])
    rest = np.setdiff1d(np.arange(len(ts)), first)
    return ts.subset(first), ts.subset(rest)


def test_high_snr_perfect_accuracy():
    fit, test = split_cohort(snr=5.0, noise=0.05)
    pred = predict_cca(test, build_templates(fit, 16))
    assert len(test) == 160
    assert np.mean(pred == test.labels) == 1.0


def test_pure_noise_is_at_chance():
    fit, test = split_cohort(snr=0.0)
    acc = np.mean(predict_cca(test, build_templates(fit, 16)) == test.labels)
    lo, hi = binomial_interval(160, 1 / 16)
    assert lo <= acc <= hi


def test_run_baseline_both_layouts():
    ens = generate_cohort(CohortSpec(n_subjects=2, snr=3.0, n_trials_per_target=10), 0)
    res = run_baseline_cca(ens, seed=0)
    assert [r.subject for r in res] == ["01", "02"]
    assert all(r.n_test == 32 and r.fraction == 0.8 and r.accuracy > 0.9 for r in res)
    assert res[0].calib_seconds == int(np.ceil(128 * 64 / 60))
    circ = generate_cohort(CohortSpec(n_subjects=1, snr=3.0, layout="circular_shift", n_reference_trials=10,
                                      n_test_per_target=2), 0)
    (r,) = run_baseline_cca(circ, seed=0)
    assert r.n_test == 32 and r.fraction == 1.0 and r.accuracy > 0.9

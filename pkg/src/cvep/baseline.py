"""Classical comparison decoder: class templates, CCA spatial filtering, template matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .dsp import TrialSet
from .errors import MissingClassError, ShapeError, SingularCovarianceError

POWER_TOL = 1e-12
POWER_MAX_ITER = 10_000


@dataclass(frozen=True)
class ClassTemplates:
    templates: np.ndarray  # (K, C, T)
    counts: np.ndarray  # (K,)

    @property
    def n_classes(self) -> int:
        return int(self.templates.shape[0])


@dataclass(frozen=True)
class CcaResult:
    wx: np.ndarray
    wy: np.ndarray
    r: float


def build_templates(ts: TrialSet, n_classes: int | None = None) -> ClassTemplates:
    """Per-class mean trial. Every class in ``[0, n_classes)`` must be present."""
    K = int(n_classes if n_classes is not None else (ts.labels.max() + 1 if len(ts) else 0))
    counts = np.bincount(ts.labels, minlength=K)[:K]
    missing = [k for k in range(K) if counts[k] == 0]
    if missing or K == 0:
        raise MissingClassError(missing or [0])
    tpl = np.stack([ts.data[ts.labels == k].mean(axis=0) for k in range(K)])
    return ClassTemplates(tpl, counts.astype(np.int64))


def _cholesky(C: np.ndarray, name: str) -> np.ndarray:
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(f"{name} is not positive definite") from exc
    d = np.diag(L)
    if d.min() <= 1e-6 * d.max():  # condition number beyond ~1e12
        raise SingularCovarianceError(f"{name} is numerically rank-deficient")
    return L


def leading_eigenpair(M: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and unit eigenvector of a symmetric PSD matrix by power iteration.

    The iteration is started from a column of ``M^(2^s)``, obtained by
    repeated normalized squaring, which is the power method run ``2^s`` steps
    at once; plain iterations then polish it to ``tol``.
    """
    n = M.shape[0]
    scale = np.trace(M)
    if scale <= 0:
        return 0.0, np.eye(n)[0]
    S = M / scale
    for _ in range(12):
        S = S @ S
        S /= max(np.trace(S), np.finfo(float).tiny)
    v = S[:, np.argmax(np.linalg.norm(S, axis=0))]
    v = v / np.linalg.norm(v)
    lam = float(v @ M @ v)
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        w /= norm
        lam_new = float(w @ M @ w)
        done = abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300) and np.linalg.norm(w - v) <= np.sqrt(tol)
        v, lam = w, lam_new
        if done:
            break
    return lam, v


def cca(X: np.ndarray, Y: np.ndarray, ridge: float | None = None) -> CcaResult:
    """Leading canonical pair of two ``(C, T)`` signals.

    ``ridge=None`` adds ``1e-6 * trace / C`` to each covariance's diagonal;
    ``ridge=0`` disables regularization and raises on singular covariances.
    The whitened problem uses Cholesky factors in place of inverse square
    roots; the matrix is similar, so the spectrum is the same.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"cca needs (C, T) inputs with equal T, got {X.shape} and {Y.shape}")
    if ridge is not None and ridge < 0:
        raise ValueError("ridge must be non-negative")
    T = X.shape[1]
    Xc = X - X.mean(axis=1, keepdims=True)
    Yc = Y - Y.mean(axis=1, keepdims=True)
    Cxx = Xc @ Xc.T / T
    Cyy = Yc @ Yc.T / T
    Cxy = Xc @ Yc.T / T
    if ridge is None:
        ex = 1e-6 * np.trace(Cxx) / Cxx.shape[0]
        ey = 1e-6 * np.trace(Cyy) / Cyy.shape[0]
    else:
        ex = ey = float(ridge)
    Rxx = Cxx + ex * np.eye(Cxx.shape[0])
    Ryy = Cyy + ey * np.eye(Cyy.shape[0])
    Lx = _cholesky(Rxx, "Cxx")
    Ly = _cholesky(Ryy, "Cyy")
    # K = Lx^-1 Cxy Ly^-T; M = K K^T is similar to Rxx^-1 Cxy Ryy^-1 Cyx
    Kmat = np.linalg.solve(Lx, np.linalg.solve(Ly, Cxy.T).T)
    M = Kmat @ Kmat.T
    M = 0.5 * (M + M.T)
    _, u = leading_eigenpair(M)
    wx = np.linalg.solve(Lx.T, u)
    wy = np.linalg.solve(Ryy, Cxy.T @ wx)
    vx = float(wx @ Cxx @ wx)
    vy = float(wy @ Cyy @ wy)
    if vx <= 0 or vy <= 0:
        return CcaResult(wx, wy, 0.0)
    wx = wx / np.sqrt(vx)
    wy = wy / np.sqrt(vy)
    r = float(wx @ Cxy @ wy)
    if r < 0:
        wy, r = -wy, -r
    return CcaResult(wx, wy, min(r, 1.0))


def cca_scores(trial: np.ndarray, tpl: ClassTemplates, ridge: float | None = None) -> np.ndarray:
    trial = np.asarray(trial, dtype=np.float64)
    if trial.shape != tpl.templates.shape[1:]:
        raise ShapeError(f"trial shape {trial.shape} does not match templates {tpl.templates.shape[1:]}")
    return np.array([cca(trial, t, ridge).r for t in tpl.templates])


def classify_cca(trial: np.ndarray, tpl: ClassTemplates, ridge: float | None = None) -> int:
    """Template with the highest leading canonical correlation; ties go to the lowest index."""
    return int(np.argmax(cca_scores(trial, tpl, ridge)))


def predict_cca(ts: TrialSet | np.ndarray, tpl: ClassTemplates, ridge: float | None = None) -> np.ndarray:
    data = ts.data if isinstance(ts, TrialSet) else np.asarray(ts)
    return np.array([classify_cca(x, tpl, ridge) for x in data], dtype=np.int64)


def run_baseline_cca(ds: Dataset, seed: int = 0, ridge: float | None = None,
                     bandpass: tuple[float, float] | None = None, filter_order: int = 4):
    """Template-matching CCA per subject, on the same test trials as the within-subject runs.

    Ensemble subjects build templates from every non-test trial; circular-shift
    subjects from the mean reference response rotated to each target.
    """
    from .protocols import (ExperimentResult, PreparedDataset, PreparedSubject, VAL_SHARE,
                            ENSEMBLE_TEST_SHARE, calibration_seconds, plan_subject, preprocess_subject)

    prepared, trials = [], {}
    for sub in ds.subjects:
        cal, units, unit_labels, test = preprocess_subject(sub, "single", bandpass=bandpass,
                                                           filter_order=filter_order)
        trials[sub.subject_id] = (cal, test)
        prepared.append(PreparedSubject(sub.subject_id, sub.layout, sub.n_classes, sub.trials.trial_duration_s,
                                        cal, cal.labels, units, unit_labels, test,
                                        None if test is None else test.labels))
    data = PreparedDataset(prepared, ds.name, "single", None)
    results = []
    for sub in prepared:
        cal, test = trials[sub.subject_id]
        if sub.test is None:
            plan = plan_subject(data, sub.subject_id, VAL_SHARE, seed, "baseline_cca")
            test_units = [r[2] for r in plan.test]
            fit_units = sorted(set(range(sub.n_units)) - set(test_units))
            tpl = build_templates(cal.subset(sub.cal_rows(fit_units)), sub.n_classes)
            test_ts = cal.subset(sub.cal_rows(test_units))
            share = 1.0 - ENSEMBLE_TEST_SHARE
        else:
            # synthesized calibration trials cover every target, so class means are the rotated templates
            tpl = build_templates(cal, sub.n_classes)
            test_ts = test
            fit_units = range(sub.n_units)
            share = 1.0
        pred = predict_cca(test_ts, tpl, ridge)
        acc = float(np.mean(pred == test_ts.labels))
        secs = calibration_seconds(len(fit_units), sub.unit_duration_s)
        results.append(ExperimentResult(ds.name, sub.subject_id, "baseline_cca", share, "single", acc,
                                        len(test_ts), secs, seed, 0))
    return results

"""Evaluation paradigms: calibration-free LOSO, limited calibration and within-subject.

Splits are made over *calibration units*. For ensemble recordings a unit is a
trial. For circular-shift recordings a unit is one reference-target trial,
which stands for the K rotated trials synthesized from it; keeping those K
trials on the same side of every split prevents near-duplicates from leaking
between training and validation.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, SubjectRecord
from .dsp import (
    ENCODER_LEN,
    TrialSet,
    average_groups,
    design_bandpass,
    filter_trials,
    fit_length,
    group_by_label,
    synthesize_shifted,
)
from .encoder import FeatureTensor, Projections, ReferenceEncoderParams, project
from .errors import (
    EmptyTestSetError,
    FractionOverflowError,
    MissingCheckpointError,
    ShapeError,
    SingleSubjectError,
)
from .head import Model, TrainConfig, train

PARADIGMS = ("calibration_free", "limited", "within")
FAST_STIM_FRACTIONS = (0.10, 0.20, 0.40, 0.60, 0.70)
GROUP_MOD_FRACTIONS = (0.10, 0.20, 0.40, 0.60, 0.80)
FAST_STIM_REPORTED_FRACTIONS = (0.125, 0.75)
FRACTION_PRESETS = {
    "fast_stim": FAST_STIM_FRACTIONS,
    "group_mod": GROUP_MOD_FRACTIONS,
    "fast_stim_reported": FAST_STIM_REPORTED_FRACTIONS,
}
VAL_SHARE = 0.10
ENSEMBLE_TEST_SHARE = 0.20

TrialRef = tuple[str, str, int]  # (subject_id, partition, unit index)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass
class PreparedSubject:
    """One subject after preprocessing and encoding, ready for training."""

    subject_id: str
    layout: str
    n_classes: int
    unit_duration_s: float
    cal: Projections | FeatureTensor
    cal_labels: np.ndarray
    cal_units: np.ndarray  # unit index of each calibration row
    unit_labels: np.ndarray  # label of each unit, used for stratification
    test: Projections | FeatureTensor | None = None
    test_labels: np.ndarray | None = None

    @property
    def n_units(self) -> int:
        return int(self.unit_labels.size)

    @property
    def n_channels(self) -> int:
        return self.cal.n_channels if isinstance(self.cal, Projections) else 0

    def cal_rows(self, units) -> np.ndarray:
        """Calibration rows belonging to ``units``, in unit order."""
        units = np.asarray(units, dtype=np.int64)
        if self.layout == "circular_shift" and self.cal_units.size == self.n_units * self.n_classes:
            K = self.n_classes
            return (units[:, None] * K + np.arange(K)[None, :]).reshape(-1)
        pos = {int(u): i for i, u in enumerate(self.cal_units)} if self.layout == "ensemble" else None
        if pos is not None and len(pos) == self.cal_units.size:
            return np.array([pos[int(u)] for u in units], dtype=np.int64)
        mask = np.isin(self.cal_units, units)
        return np.flatnonzero(mask)


@dataclass
class PreparedDataset:
    subjects: list[PreparedSubject]
    name: str
    trial_mode: str
    encoder: ReferenceEncoderParams | None

    def index(self, subject_id: str) -> int:
        for i, s in enumerate(self.subjects):
            if s.subject_id == subject_id:
                return i
        raise KeyError(subject_id)

    def subject(self, subject_id: str) -> PreparedSubject:
        return self.subjects[self.index(subject_id)]

    @property
    def n_classes(self) -> int:
        return self.subjects[0].n_classes


def preprocess_subject(sub: SubjectRecord, trial_mode: str = "single", group_size: int = 5,
                       bandpass: tuple[float, float] | None = None, filter_order: int = 4,
                       target_len: int = ENCODER_LEN) -> tuple[TrialSet, np.ndarray, np.ndarray, TrialSet | None]:
    """Filter, average, synthesize shifted responses and fit to the encoder length.

    Returns ``(calibration trials, unit of each row, label of each unit, test trials)``.
    """
    cal, test = sub.trials, sub.test
    if bandpass is not None:
        f = design_bandpass(filter_order, bandpass[0], bandpass[1], cal.fs_hz)
        cal = filter_trials(f, cal)
        test = None if test is None else filter_trials(f, test)
    if trial_mode == "averaged":
        cal = average_groups(group_by_label(cal), group_size)
        test = None if test is None else average_groups(group_by_label(test), group_size)
    elif trial_mode != "single":
        raise ValueError(f"unknown trial_mode {trial_mode!r}")
    n_units = len(cal)
    unit_labels = cal.labels.copy()
    if sub.layout == "circular_shift":
        cal = synthesize_shifted(cal, sub.codebook)
        units = np.repeat(np.arange(n_units), sub.codebook.n_targets)
    else:
        units = np.arange(n_units)
    cal = fit_length(cal, target_len)
    test = None if test is None else fit_length(test, target_len)
    return cal, units, unit_labels, test


def prepare_dataset(ds: Dataset, trial_mode: str = "single", group_size: int = 5,
                    encoder: ReferenceEncoderParams | None = None, encoder_seed: int = 0,
                    bandpass: tuple[float, float] | None = None, filter_order: int = 4) -> PreparedDataset:
    """Preprocess every subject and cache its reference-encoder projections."""
    if encoder is None:
        encoder = ReferenceEncoderParams.create(ds.subjects[0].trials.n_channels, encoder_seed)
    out = []
    for sub in ds.subjects:
        cal, units, unit_labels, test = preprocess_subject(sub, trial_mode, group_size, bandpass, filter_order)
        duration = sub.trials.trial_duration_s * (group_size if trial_mode == "averaged" else 1)
        out.append(PreparedSubject(
            sub.subject_id, sub.layout, sub.n_classes, duration,
            project(cal.data, encoder), cal.labels, units, unit_labels,
            None if test is None else project(test.data, encoder),
            None if test is None else test.labels,
        ))
    return PreparedDataset(out, ds.name, trial_mode, encoder)


def prepare_features(entries: Sequence[dict], name: str = "features", trial_mode: str = "single") -> PreparedDataset:
    """Wrap imported features; ``entries`` need subject_id, n_classes, features, labels and
    optionally test_features/test_labels. Every row is its own calibration unit."""
    out = []
    for e in entries:
        labels = np.asarray(e["labels"], dtype=np.int64)
        out.append(PreparedSubject(
            str(e["subject_id"]), "ensemble" if e.get("test_features") is None else "imported_split",
            int(e["n_classes"]), float(e.get("trial_duration_s", 0.0)),
            e["features"], labels, np.arange(labels.size), labels.copy(),
            e.get("test_features"),
            None if e.get("test_labels") is None else np.asarray(e["test_labels"], dtype=np.int64),
        ))
    return PreparedDataset(out, name, trial_mode, None)


# -- split plans -------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    target: str
    paradigm: str
    train: tuple[TrialRef, ...]
    val: tuple[TrialRef, ...]
    test: tuple[TrialRef, ...]
    fraction: float | None = None

    def subjects(self, part: str) -> set[str]:
        return {r[0] for r in getattr(self, part)}


def _apportion(sizes: Sequence[int], share: float, rng: np.random.Generator,
               caps: Sequence[int] | None = None) -> np.ndarray:
    """Per-stratum counts summing to round(share * total), by largest remainder.

    ``caps`` bounds each stratum (what is left after earlier draws); units a
    full stratum cannot take go to the others. Equal remainders are ordered by
    a seeded random permutation so that no stratum is systematically favoured.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    caps = sizes if caps is None else np.asarray(caps, dtype=np.int64)
    exact = share * sizes
    base = np.minimum(np.floor(exact + 1e-9).astype(np.int64), caps)
    extra = min(_round_half_up(share * sizes.sum()), int(caps.sum())) - int(base.sum())
    tiebreak = rng.permutation(sizes.size)
    order = sorted(range(sizes.size), key=lambda i: (-round(exact[i] - base[i], 9), tiebreak[i]))
    while extra > 0:
        for i in order:
            if extra and base[i] < caps[i]:
                base[i] += 1
                extra -= 1
    return base


def _strata(sub: PreparedSubject) -> list[np.ndarray]:
    return [np.flatnonzero(sub.unit_labels == k) for k in np.unique(sub.unit_labels)]


def _test_refs(sub: PreparedSubject) -> tuple[TrialRef, ...]:
    if sub.test is not None:
        return tuple((sub.subject_id, "test", i) for i in range(len(sub.test_labels)))
    return tuple((sub.subject_id, "cal", int(u)) for u in range(sub.n_units))


def plan_calibration_free(data: PreparedDataset, target: str, seed: int = 0) -> SplitPlan:
    """Pool every other subject, split 90/10 stratified by (subject, class); test on the target."""
    if len(data.subjects) < 2:
        raise SingleSubjectError("leave-one-subject-out needs at least two subjects")
    t_idx = data.index(target)
    rng = np.random.default_rng([seed, 11, t_idx])
    strata = [(sub.subject_id, st) for sub in data.subjects if sub.subject_id != target for st in _strata(sub)]
    n_val = _apportion([st.size for _, st in strata], VAL_SHARE, np.random.default_rng([seed, 19, t_idx]))
    train_refs: list[TrialRef] = []
    val_refs: list[TrialRef] = []
    for (sid, stratum), nv in zip(strata, n_val):
        perm = rng.permutation(stratum)
        val_refs += [(sid, "cal", int(u)) for u in perm[:nv]]
        train_refs += [(sid, "cal", int(u)) for u in perm[nv:]]
    return SplitPlan(target, "calibration_free", tuple(train_refs), tuple(val_refs),
                     _test_refs(data.subjects[t_idx]))


def plan_subject(data: PreparedDataset, target: str, fraction: float, seed: int = 0,
                 paradigm: str = "limited") -> SplitPlan:
    """Within-subject split shared by the limited and within-subject paradigms.

    Test and validation units are drawn first from a per-(subject, seed)
    permutation, so they do not depend on ``fraction`` and larger fractions
    extend smaller ones.
    """
    sub = data.subject(target)
    has_test = sub.test is not None
    test_share = 0.0 if has_test else ENSEMBLE_TEST_SHARE
    if not 0 < fraction <= 1 or fraction + VAL_SHARE + test_share > 1 + 1e-9:
        raise FractionOverflowError(
            f"fraction {fraction} + validation {VAL_SHARE} + test {test_share} exceeds the subject's data"
        )
    s_idx = data.index(target)
    rng = np.random.default_rng([seed, 13, s_idx])
    strata = _strata(sub)
    sizes = np.array([st.size for st in strata], dtype=np.int64)
    n_test = _apportion(sizes, test_share, np.random.default_rng([seed, 19, s_idx, 0]))
    n_val = _apportion(sizes, VAL_SHARE, np.random.default_rng([seed, 19, s_idx, 1]), sizes - n_test)
    n_train = _apportion(sizes, fraction, np.random.default_rng([seed, 19, s_idx, 2]), sizes - n_test - n_val)
    train_u, val_u, test_u = [], [], []
    for stratum, nt, nv, nr in zip(strata, n_test, n_val, n_train):
        perm = rng.permutation(stratum)
        test_u += perm[:nt].tolist()
        val_u += perm[nt:nt + nv].tolist()
        train_u += perm[nt + nv:nt + nv + nr].tolist()
    sid = sub.subject_id
    test = _test_refs(sub) if has_test else tuple((sid, "cal", int(u)) for u in test_u)
    return SplitPlan(sid, paradigm, tuple((sid, "cal", int(u)) for u in train_u),
                     tuple((sid, "cal", int(u)) for u in val_u), test, float(fraction))


def gather(data: PreparedDataset, refs: Iterable[TrialRef]):
    """Collect inputs and labels for a list of trial references."""
    by_sub: dict[str, dict[str, list[int]]] = {}
    for sid, part, i in refs:
        by_sub.setdefault(sid, {"cal": [], "test": []})[part].append(i)
    chunks, labels = [], []
    for sid in sorted(by_sub, key=data.index):
        sub = data.subject(sid)
        parts = by_sub[sid]
        if parts["cal"]:
            rows = sub.cal_rows(parts["cal"])
            chunks.append(sub.cal[rows])
            labels.append(sub.cal_labels[rows])
        if parts["test"]:
            rows = np.asarray(parts["test"], dtype=np.int64)
            chunks.append(sub.test[rows])
            labels.append(sub.test_labels[rows])
    if not chunks:
        raise EmptyTestSetError("no trials referenced")
    first = chunks[0]
    if isinstance(first, Projections):
        inputs = Projections(np.concatenate([c.P for c in chunks]), first.encoder)
    else:
        inputs = FeatureTensor(np.concatenate([c.Z for c in chunks]), first.provenance)
    return inputs, np.concatenate(labels)


# -- metrics -----------------------------------------------------------------

def evaluate_accuracy(model: Model, inputs, labels, n_classes: int | None = None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyTestSetError("cannot score an empty test set")
    if n_classes is not None and n_classes != model.K:
        raise ShapeError(f"model has {model.K} outputs, dataset has {n_classes} classes")
    return float(np.mean(model.predict(inputs) == labels))


def calibration_seconds(n_calib_trials: int, trial_duration_s: float) -> int:
    if n_calib_trials < 0:
        raise ValueError("trial count must be non-negative")
    if n_calib_trials == 0:
        return 0
    # guard against 20 * 1.06 = 21.200000000000003 style noise
    return int(math.ceil(round(n_calib_trials * trial_duration_s, 9)))


@dataclass
class ExperimentResult:
    dataset: str
    subject: str
    paradigm: str
    fraction: float
    trial_mode: str
    accuracy: float
    n_test: int
    calib_seconds: int
    seed: int
    selected_epoch: int


@dataclass
class ProtocolConfig:
    epochs_free: int = 200
    epochs_limited: int = 400
    batch_size: int = 64
    lr_free: float = 1e-3
    lr_limited: float = 5e-4
    lr_within: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    train_spatial: bool = True

    def train_config(self, paradigm: str, seed: int) -> TrainConfig:
        epochs = self.epochs_free if paradigm == "calibration_free" else self.epochs_limited
        lr = {"calibration_free": self.lr_free, "limited": self.lr_limited, "within": self.lr_within}[paradigm]
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, lr=lr, seed=seed, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
                           train_spatial=self.train_spatial)


def _fresh_model(data: PreparedDataset, seed: int) -> Model:
    # imported features keep a 1x1 identity filter that is never trained
    C = data.subjects[0].n_channels if data.encoder is not None else 1
    return Model.create(C, data.n_classes, data.encoder, seed=[seed, 17])


def _train_and_score(data: PreparedDataset, plan: SplitPlan, init: Model, cfg: TrainConfig):
    tr = gather(data, plan.train)
    va = gather(data, plan.val)
    te = gather(data, plan.test)
    model, _ = train(init, tr[0], tr[1], va[0], va[1], cfg)
    acc = evaluate_accuracy(model, te[0], te[1], data.n_classes)
    return model, acc, len(te[1])


def run_calibration_free(data: PreparedDataset, cfg: ProtocolConfig, seed: int = 0,
                         subjects: Sequence[str] | None = None) -> tuple[list[ExperimentResult], dict[str, Model]]:
    """LOSO over ``subjects`` (default all). Returns results and the selected model per target."""
    results, models = [], {}
    for sid in subjects or [s.subject_id for s in data.subjects]:
        plan = plan_calibration_free(data, sid, seed)
        model, acc, n_test = _train_and_score(data, plan, _fresh_model(data, seed),
                                              cfg.train_config("calibration_free", seed))
        models[sid] = model
        results.append(ExperimentResult(data.name, sid, "calibration_free", 0.0, data.trial_mode, acc,
                                        n_test, 0, seed, int(model.meta["selected_epoch"])))
    return results, models


def _run_fractions(data: PreparedDataset, fractions: Sequence[float], cfg: ProtocolConfig, seed: int,
                   paradigm: str, checkpoints: dict[str, Model] | None,
                   subjects: Sequence[str] | None) -> list[ExperimentResult]:
    results = []
    for sid in subjects or [s.subject_id for s in data.subjects]:
        if paradigm == "limited" and (checkpoints is None or sid not in checkpoints):
            raise MissingCheckpointError(f"no calibration-free checkpoint for subject {sid}")
        sub = data.subject(sid)
        for p in fractions:
            plan = plan_subject(data, sid, p, seed, paradigm)
            init = checkpoints[sid] if paradigm == "limited" else _fresh_model(data, seed)
            model, acc, n_test = _train_and_score(data, plan, init, cfg.train_config(paradigm, seed))
            secs = calibration_seconds(len(plan.train), sub.unit_duration_s)
            results.append(ExperimentResult(data.name, sid, paradigm, float(p), data.trial_mode, acc, n_test,
                                            secs, seed, int(model.meta["selected_epoch"])))
    return results


def run_limited(data: PreparedDataset, fractions: Sequence[float], cfg: ProtocolConfig, seed: int,
                checkpoints: dict[str, Model], subjects: Sequence[str] | None = None) -> list[ExperimentResult]:
    """Fine-tune each subject's calibration-free model on a fraction of its own data."""
    return _run_fractions(data, fractions, cfg, seed, "limited", checkpoints, subjects)


def run_within(data: PreparedDataset, fractions: Sequence[float], cfg: ProtocolConfig, seed: int,
               subjects: Sequence[str] | None = None) -> list[ExperimentResult]:
    """Same splits and schedule as :func:`run_limited`, from a fresh initialization."""
    return _run_fractions(data, fractions, cfg, seed, "within", None, subjects)


# -- aggregation and results files --------------------------------------------

@dataclass
class Summary:
    paradigm: str
    fraction: float
    trial_mode: str
    mean: float
    std: float
    n: int
    calib_seconds: float = 0.0


def aggregate(results: Sequence[ExperimentResult], exclude: Iterable[str] = ()) -> list[Summary]:
    """Population mean and std of accuracy per (paradigm, fraction, trial_mode)."""
    skip = {str(s) for s in exclude}
    groups: dict[tuple, list[ExperimentResult]] = {}
    for r in results:
        if r.subject in skip:
            continue
        groups.setdefault((r.paradigm, r.fraction, r.trial_mode), []).append(r)
    out = []
    for (paradigm, fraction, mode), rows in groups.items():
        acc = np.array([r.accuracy for r in rows])
        secs = float(np.mean([r.calib_seconds for r in rows]))
        out.append(Summary(paradigm, fraction, mode, float(acc.mean()), float(acc.std()), len(rows), secs))
    order = {p: i for i, p in enumerate(PARADIGMS)}
    out.sort(key=lambda s: (order.get(s.paradigm, len(order)), s.trial_mode, s.fraction))
    return out


CSV_FIELDS = [f.name for f in fields(ExperimentResult)]


def sort_results(results: Sequence[ExperimentResult]) -> list[ExperimentResult]:
    order = {p: i for i, p in enumerate(PARADIGMS)}
    return sorted(results, key=lambda r: (r.dataset, order.get(r.paradigm, len(order)), r.trial_mode,
                                          r.seed, r.subject, r.fraction))


def results_to_csv(results: Sequence[ExperimentResult], config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash is not None:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sort_results(results):
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, k) for k in CSV_FIELDS)])
    return buf.getvalue()


def write_results_csv(results: Sequence[ExperimentResult], path: str | Path, config_hash: str | None = None) -> Path:
    path = Path(path)
    path.write_text(results_to_csv(results, config_hash), encoding="utf-8")
    return path


def read_results_csv(path: str | Path) -> list[ExperimentResult]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(ExperimentResult(
            row["dataset"], row["subject"], row["paradigm"], float(row["fraction"]), row["trial_mode"],
            float(row["accuracy"]), int(row["n_test"]), int(row["calib_seconds"]), int(row["seed"]),
            int(row["selected_epoch"]),
        ))
    return out



"""On-disk dataset layout shared by the generator, the runner and external importers.

A dataset is a directory holding ``manifest.json`` plus one little-endian
float32 blob per subject partition, laid out ``[trial][channel][sample]``.
Subjects recorded with the circular-shift paradigm carry two partitions: the
reference-target calibration trials (``sub_<id>.bin``) and the test session
(``sub_<id>_test.bin``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import CodeBook, read_codebook, write_codebook
from .dsp import TrialSet
from .errors import FormatError, ShapeError

FORMAT = "cvep-dataset"
VERSION = 1
LAYOUTS = ("ensemble", "circular_shift")


@dataclass
class SubjectRecord:
    subject_id: str
    layout: str
    trials: TrialSet  # ensemble: every trial; circular_shift: reference-target calibration
    codebook: CodeBook
    test: TrialSet | None = None  # circular_shift only

    @property
    def n_classes(self) -> int:
        return self.codebook.n_targets


@dataclass
class Dataset:
    subjects: list[SubjectRecord]
    name: str = "dataset"

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]


def _write_blob(path: Path, data: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())


def write_dataset(ds: Dataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    books: dict[CodeBook, str] = {}
    entries = []
    for sub in ds.subjects:
        if sub.codebook not in books:
            books[sub.codebook] = "codebook.txt" if not books else f"codebook_{len(books)}.txt"
            write_codebook(sub.codebook, root / books[sub.codebook])
        ts = sub.trials
        entry = {
            "subject_id": sub.subject_id,
            "paradigm": sub.layout,
            "fs_hz": float(ts.fs_hz),
            "n_channels": ts.n_channels,
            "channel_names": list(ts.channel_names) or [f"ch{i}" for i in range(ts.n_channels)],
            "trial_duration_s": float(ts.trial_duration_s),
            "n_samples": ts.n_samples,
            "n_trials": len(ts),
            "n_classes": sub.n_classes,
            "labels": [int(v) for v in ts.labels],
            "file": f"sub_{sub.subject_id}.bin",
            "codebook": books[sub.codebook],
        }
        _write_blob(root / entry["file"], ts.data)
        if sub.test is not None:
            entry["test"] = {
                "n_trials": len(sub.test),
                "labels": [int(v) for v in sub.test.labels],
                "file": f"sub_{sub.subject_id}_test.bin",
            }
            _write_blob(root / entry["test"]["file"], sub.test.data)
        entries.append(entry)
    manifest = {"format": FORMAT, "version": VERSION, "name": ds.name, "subjects": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return root


def _require(obj: dict, key: str, where: str, kind=None):
    if key not in obj:
        raise FormatError("missing field", field=f"{where}.{key}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(f"expected {getattr(kind, '__name__', kind)}", field=f"{where}.{key}")
    return value


def _read_partition(root: Path, fname: str, n_trials: int, C: int, T: int, where: str) -> np.ndarray:
    blob = root / fname
    if not blob.is_file():
        raise FormatError(f"data file {fname} not found", field=f"{where}.file")
    raw = blob.read_bytes()
    expected = n_trials * C * T * 4
    if len(raw) != expected:
        raise ShapeError(f"{fname}: {len(raw)} bytes, expected {expected} ({n_trials}x{C}x{T} float32)")
    return np.frombuffer(raw, dtype="<f4").reshape(n_trials, C, T).astype(np.float64)


def _check_labels(labels, n_trials: int, n_classes: int, where: str) -> np.ndarray:
    if len(labels) != n_trials:
        raise FormatError(f"{len(labels)} labels for {n_trials} trials", field=f"{where}.labels")
    arr = np.asarray(labels)
    if arr.size and (arr.dtype.kind not in "iu" or arr.min() < 0 or arr.max() >= n_classes):
        raise FormatError(f"labels must be integers in [0, {n_classes})", field=f"{where}.labels")
    return arr.astype(np.int64)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc), field="manifest") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"expected {FORMAT!r}", field="format")
    if manifest.get("version") != VERSION:
        raise FormatError(f"unsupported version {manifest.get('version')!r}", field="version")
    subjects = []
    books: dict[str, CodeBook] = {}
    for i, e in enumerate(_require(manifest, "subjects", "manifest", list)):
        where = f"subjects[{i}]"
        sid = str(_require(e, "subject_id", where))
        layout = _require(e, "paradigm", where, str)
        if layout not in LAYOUTS:
            raise FormatError(f"must be one of {LAYOUTS}", field=f"{where}.paradigm")
        fs = float(_require(e, "fs_hz", where, (int, float)))
        C = int(_require(e, "n_channels", where, int))
        T = int(_require(e, "n_samples", where, int))
        n = int(_require(e, "n_trials", where, int))
        K = int(_require(e, "n_classes", where, int))
        names = list(_require(e, "channel_names", where, list))
        if len(names) != C:
            raise FormatError(f"{len(names)} names for {C} channels", field=f"{where}.channel_names")
        dur = float(_require(e, "trial_duration_s", where, (int, float)))
        labels = _check_labels(_require(e, "labels", where, list), n, K, where)
        book_name = _require(e, "codebook", where, str)
        if book_name not in books:
            books[book_name] = read_codebook(root / book_name)
        book = books[book_name]
        if book.n_targets != K:
            raise FormatError(f"codebook has {book.n_targets} targets, manifest says {K}", field=f"{where}.n_classes")
        data = _read_partition(root, _require(e, "file", where, str), n, C, T, where)
        trials = TrialSet(data, labels, fs, sid, dur, names)
        test = None
        if layout == "circular_shift":
            if trials.labels.size and np.any(trials.labels != 0):
                raise FormatError("circular_shift calibration trials must all be label 0", field=f"{where}.labels")
            t = _require(e, "test", where, dict)
            tn = int(_require(t, "n_trials", f"{where}.test", int))
            tl = _check_labels(_require(t, "labels", f"{where}.test", list), tn, K, f"{where}.test")
            tdata = _read_partition(root, _require(t, "file", f"{where}.test", str), tn, C, T, f"{where}.test")
            test = TrialSet(tdata, tl, fs, sid, dur, names)
        subjects.append(SubjectRecord(sid, layout, trials, book, test))
    return Dataset(subjects, name=str(manifest.get("name", root.name)))

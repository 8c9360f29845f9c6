"""Adaptive spatial filter and the frozen reference encoder.

The reference encoder is a fixed random two-sided projection followed by
``tanh``. It maps ``(B, C, 1024)`` trials to ``(B, 16, 4, 512)`` features:
16 spatial tokens (rows of ``A``) by 4 contiguous windows of 256 samples, each
window projected onto 512 temporal directions (rows of ``B_time``). Features
produced by an external foundation model can be imported instead through
:func:`load_features`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChannelMismatchError, FormatError, ShapeError

N_TOKENS = 16
N_WINDOWS = 4
EMBED_DIM = 512
WINDOW_LEN = 256
INPUT_LEN = N_WINDOWS * WINDOW_LEN
FEATURE_SHAPE = (N_TOKENS, N_WINDOWS, EMBED_DIM)


@dataclass
class SpatialFilter:
    W: np.ndarray  # (C, C)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ShapeError(f"spatial filter must be square, got {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("spatial filter has non-finite entries")

    @classmethod
    def identity(cls, n_channels: int) -> "SpatialFilter":
        return cls(np.eye(n_channels))

    @property
    def n_channels(self) -> int:
        return int(self.W.shape[0])

    def copy(self) -> "SpatialFilter":
        return SpatialFilter(self.W.copy())


@dataclass(frozen=True)
class ReferenceEncoderParams:
    A: np.ndarray  # (16, C)
    B_time: np.ndarray  # (512, 256)
    seed: int

    @classmethod
    def create(cls, n_channels: int, seed: int = 0) -> "ReferenceEncoderParams":
        rng = np.random.default_rng(seed)
        B_time = rng.normal(0.0, np.sqrt(1.0 / WINDOW_LEN), size=(EMBED_DIM, WINDOW_LEN))
        A = rng.normal(0.0, np.sqrt(1.0 / n_channels), size=(N_TOKENS, n_channels))
        A.setflags(write=False)
        B_time.setflags(write=False)
        return cls(A, B_time, int(seed))

    @property
    def n_channels(self) -> int:
        return int(self.A.shape[1])


def _index(idx):
    return idx if isinstance(idx, slice) else np.asarray(idx, dtype=np.int64)


@dataclass
class FeatureTensor:
    Z: np.ndarray  # (B, 16, 4, 512)
    provenance: str = "reference-encoder"

    def __post_init__(self):
        self.Z = np.asarray(self.Z)
        if self.Z.ndim != 4 or self.Z.shape[1:] != FEATURE_SHAPE:
            raise ShapeError(f"features must be (B, 16, 4, 512), got {self.Z.shape}")
        if self.provenance not in ("reference-encoder", "imported"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return int(self.Z.shape[0])

    def __getitem__(self, idx) -> "FeatureTensor":
        return FeatureTensor(self.Z[_index(idx)], self.provenance)


@dataclass
class Projections:
    """Trials already projected onto the temporal directions: ``P[b] = X_b`` windows times ``B_time^T``.

    Because the spatial filter and ``A`` act on channels while ``B_time`` acts
    on time, the encoder pre-activation equals ``(A @ W) @ P[b]``. Caching
    ``P`` lets training update ``W`` without re-running the temporal
    projection every step.
    """

    P: np.ndarray  # (B, C, 4 * 512)
    encoder: ReferenceEncoderParams = field(repr=False)

    def __len__(self) -> int:
        return int(self.P.shape[0])

    def __getitem__(self, idx) -> "Projections":
        return Projections(self.P[_index(idx)], self.encoder)

    @property
    def n_channels(self) -> int:
        return int(self.P.shape[1])


def _check_trials(X: np.ndarray, n_channels: int | None = None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[2] != INPUT_LEN:
        raise ShapeError(f"expected (B, C, {INPUT_LEN}) trials, got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ChannelMismatchError(f"trials have {X.shape[1]} channels, expected {n_channels}")
    return X


def apply_spatial_filter(X: np.ndarray, sf: SpatialFilter) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1] != sf.n_channels:
        raise ChannelMismatchError(f"trials of shape {X.shape} do not match a {sf.n_channels}-channel filter")
    return np.matmul(sf.W, X)


def reference_encode(X: np.ndarray, p: ReferenceEncoderParams) -> FeatureTensor:
    X = _check_trials(X, p.n_channels)
    B = X.shape[0]
    mixed = np.matmul(p.A, X).reshape(B * N_TOKENS * N_WINDOWS, WINDOW_LEN)
    return FeatureTensor(np.tanh(mixed @ p.B_time.T).reshape(B, *FEATURE_SHAPE))


def encode_vjp(X: np.ndarray, p: ReferenceEncoderParams, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * reference_encode(X).Z)`` with respect to ``X``."""
    X = _check_trials(X, p.n_channels)
    B = X.shape[0]
    upstream = np.asarray(upstream)
    if upstream.shape != (B, *FEATURE_SHAPE):
        raise ShapeError(f"upstream gradient must be {(B, *FEATURE_SHAPE)}, got {upstream.shape}")
    Z = reference_encode(X, p).Z
    dpre = upstream * (1.0 - Z * Z)
    dmixed = (dpre.reshape(-1, EMBED_DIM) @ p.B_time).reshape(B, N_TOKENS, INPUT_LEN)
    return np.matmul(p.A.T, dmixed)


def project(X: np.ndarray, p: ReferenceEncoderParams) -> Projections:
    X = _check_trials(X, p.n_channels)
    B, C, _ = X.shape
    P = np.ascontiguousarray(X, dtype=np.float64).reshape(B * C * N_WINDOWS, WINDOW_LEN) @ p.B_time.T
    return Projections(P.reshape(B, C, N_WINDOWS * EMBED_DIM), p)


def encode_projections(proj: Projections, sf: SpatialFilter) -> np.ndarray:
    """Features ``Z`` for cached projections, flattened to ``(B, 16, 2048)``."""
    pre = np.matmul(proj.encoder.A @ sf.W, proj.P)
    return np.tanh(pre, out=pre)


# -- features files ---------------------------------------------------------

FEATURES_FORMAT = "cvep-features"
FEATURES_VERSION = 1


def write_features(directory: str | Path, subject_id: str, feats: FeatureTensor, labels,
                   n_classes: int, partition: str = "cal") -> Path:
    """Write ``feat_<id>.bin`` (``feat_<id>_test.bin`` for a test partition) and register it
    in the directory's ``manifest.json``."""
    if partition not in ("cal", "test"):
        raise ValueError(f"partition must be 'cal' or 'test', got {partition!r}")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    mpath = root / "manifest.json"
    manifest = {"format": FEATURES_FORMAT, "version": FEATURES_VERSION, "subjects": []}
    if mpath.is_file():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    fname = f"feat_{subject_id}.bin" if partition == "cal" else f"feat_{subject_id}_test.bin"
    entry = {
        "subject_id": subject_id,
        "partition": partition,
        "file": fname,
        "shape": [len(feats), *FEATURE_SHAPE],
        "n_classes": int(n_classes),
        "labels": [int(v) for v in np.asarray(labels).reshape(-1)],
    }
    manifest["subjects"] = [e for e in manifest["subjects"] if e.get("file") != fname] + [entry]
    (root / fname).write_bytes(np.ascontiguousarray(feats.Z, dtype="<f4").tobytes())
    mpath.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return root / fname


def load_features(path: str | Path) -> tuple[FeatureTensor, np.ndarray, str]:
    """Read one ``feat_<id>.bin`` using the ``manifest.json`` next to it."""
    path = Path(path)
    mpath = path.parent / "manifest.json"
    if not mpath.is_file():
        raise FormatError("no manifest.json beside the features file", field="manifest")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc), field="manifest") from exc
    if manifest.get("format") != FEATURES_FORMAT:
        raise FormatError(f"expected {FEATURES_FORMAT!r}", field="format")
    entries = [e for e in manifest.get("subjects", []) if e.get("file") == path.name]
    if not entries:
        raise FormatError(f"{path.name} is not listed", field="subjects")
    e = entries[0]
    for key in ("subject_id", "shape", "n_classes", "labels"):
        if key not in e:
            raise FormatError("missing field", field=f"subjects.{key}")
    shape = tuple(int(v) for v in e["shape"])
    if len(shape) != 4 or shape[1:] != FEATURE_SHAPE:
        raise ShapeError(f"feature dims {shape[1:]} != {FEATURE_SHAPE}")
    labels = np.asarray(e["labels"])
    K = int(e["n_classes"])
    if labels.size != shape[0]:
        raise FormatError(f"{labels.size} labels for {shape[0]} trials", field="subjects.labels")
    if labels.size and (labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= K):
        raise FormatError(f"labels must be integers in [0, {K})", field="subjects.labels")
    raw = path.read_bytes()
    if len(raw) != int(np.prod(shape)) * 4:
        raise ShapeError(f"{path.name}: {len(raw)} bytes, expected {int(np.prod(shape)) * 4}")
    Z = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return FeatureTensor(Z, "imported"), labels.astype(np.int64), str(e["subject_id"])


def load_feature_dir(directory: str | Path) -> list[dict]:
    """Every subject in a features directory, with calibration and optional test partitions.

    Returns dicts with ``subject_id``, ``n_classes``, ``features``, ``labels``,
    ``test_features`` and ``test_labels``, in manifest order.
    """
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc), field="manifest") from exc
    out: dict[str, dict] = {}
    for e in manifest.get("subjects", []):
        if "file" not in e:
            raise FormatError("missing field", field="subjects.file")
        feats, labels, sid = load_features(root / e["file"])
        slot = out.setdefault(sid, {"subject_id": sid, "n_classes": int(e["n_classes"]), "features": None,
                                    "labels": None, "test_features": None, "test_labels": None})
        if e.get("partition", "cal") == "test":
            slot["test_features"], slot["test_labels"] = feats, labels
        else:
            slot["features"], slot["labels"] = feats, labels
    for sid, slot in out.items():
        if slot["features"] is None:
            raise FormatError(f"subject {sid} has no calibration features", field="subjects.partition")
    return list(out.values())

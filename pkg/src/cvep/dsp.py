"""EEG preprocessing: Butterworth bandpass, resampling, epoching, trial averaging,
circular-shift response synthesis and length normalization."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .codebook import CodeBook
from .errors import (
    IndivisibleBatchError,
    InvalidBandError,
    MixedLabelGroupError,
    NonReferenceLabelError,
    RateMismatchError,
    TrialOutOfBoundsError,
)

ENCODER_LEN = 1024


@dataclass
class ContinuousRecording:
    samples: np.ndarray  # (C, T)
    fs_hz: float
    channel_names: list[str] = field(default_factory=list)
    events: list[tuple[int, int]] = field(default_factory=list)  # (onset_sample, label)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.fs_hz <= 0:
            raise ValueError("fs_hz must be positive")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.samples.shape[0])]
        if len(self.channel_names) != self.samples.shape[0]:
            raise ValueError("one channel name per row of samples is required")
        T = self.samples.shape[1]
        for i, (onset, _) in enumerate(self.events):
            if not 0 <= onset < T:
                raise ValueError(f"event {i} onset {onset} outside [0, {T})")


@dataclass
class TrialSet:
    """Labeled trials of shape ``(B, C, T')``."""

    data: np.ndarray
    labels: np.ndarray
    fs_hz: float
    subject_id: str = ""
    trial_duration_s: float = 0.0
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be 3-D (B, C, T'), got shape {self.data.shape}")
        if self.data.shape[0] != self.labels.size:
            raise ValueError("one label per trial is required")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def n_channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[2])

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, data=self.data[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class BiquadCascade:
    sections: np.ndarray  # (n_sections, 6) rows of b0 b1 b2 1 a1 a2, scipy "sos" layout
    fs_hz: float
    band: tuple[float, float]

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response evaluated on the unit circle at ``freqs_hz``."""
        z = np.exp(-1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.fs_hz)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sections:
            h = h * (b0 + b1 * z + b2 * z * z) / (1 + a1 * z + a2 * z * z)
        return h

    def gain(self, freqs_hz) -> np.ndarray:
        return np.abs(self.frequency_response(freqs_hz))

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for *_, a1, a2 in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def design_bandpass(order: int, f_lo: float, f_hi: float, fs_hz: float) -> BiquadCascade:
    """Butterworth bandpass of total order ``order`` as ``order // 2`` biquads.

    The lowpass prototype of order ``order // 2`` is moved to the band with the
    usual lowpass-to-bandpass substitution, with both band edges prewarped, and
    discretized by the bilinear transform. Each section has zeros at z = +1 and
    z = -1 and unit gain at the band center.
    """
    if order not in (2, 4, 6, 8):
        raise InvalidBandError(f"order must be one of 2, 4, 6, 8 (got {order})")
    if not 0 < f_lo < f_hi < fs_hz / 2:
        raise InvalidBandError(f"need 0 < f_lo < f_hi < fs/2, got ({f_lo}, {f_hi}) at fs={fs_hz}")
    n = order // 2
    k2 = 2.0 * fs_hz
    w_lo = k2 * np.tan(np.pi * f_lo / fs_hz)
    w_hi = k2 * np.tan(np.pi * f_hi / fs_hz)
    w0 = np.sqrt(w_lo * w_hi)
    bw = w_hi - w_lo

    # prototype poles on the left half of the unit circle, upper half plane only
    proto = [np.exp(1j * np.pi * (2 * k + n + 1) / (2 * n)) for k in range(n)]
    proto = [p for p in proto if p.imag >= -1e-12]

    pairs = []
    for p in proto:
        half = p * bw / 2
        root = np.sqrt(half * half - w0 * w0)
        q1, q2 = half + root, half - root
        if abs(p.imag) < 1e-12:
            pairs.append((q1, q2))
        else:
            pairs.append((q1, np.conj(q1)))
            pairs.append((q2, np.conj(q2)))

    wc = 2 * np.arctan(w0 / k2)
    zc = np.exp(-1j * wc)
    sections = []
    for s1, s2 in pairs:
        z1 = (k2 + s1) / (k2 - s1)
        z2 = (k2 + s2) / (k2 - s2)
        a1 = float(np.real(-(z1 + z2)))
        a2 = float(np.real(z1 * z2))
        g = 1.0 / abs((1 - zc * zc) / (1 + a1 * zc + a2 * zc * zc))
        sections.append([g, 0.0, -g, 1.0, a1, a2])
    return BiquadCascade(np.array(sections), float(fs_hz), (float(f_lo), float(f_hi)))


def filter_array(f: BiquadCascade, x: np.ndarray, zero_phase: bool = True) -> np.ndarray:
    """Filter along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if zero_phase:
        return signal.sosfiltfilt(f.sections, x, axis=-1)
    return signal.sosfilt(f.sections, x, axis=-1)


def apply_filter(f: BiquadCascade, rec: ContinuousRecording, zero_phase: bool = True) -> ContinuousRecording:
    if not np.isclose(rec.fs_hz, f.fs_hz):
        raise RateMismatchError(f"recording at {rec.fs_hz} Hz, filter designed for {f.fs_hz} Hz")
    return replace(rec, samples=filter_array(f, rec.samples, zero_phase), events=list(rec.events))


def filter_trials(f: BiquadCascade, ts: TrialSet, zero_phase: bool = True) -> TrialSet:
    if not np.isclose(ts.fs_hz, f.fs_hz):
        raise RateMismatchError(f"trials at {ts.fs_hz} Hz, filter designed for {f.fs_hz} Hz")
    return replace(ts, data=filter_array(f, ts.data, zero_phase))


def resample(rec: ContinuousRecording, fs_out: float) -> ContinuousRecording:
    """Linear-interpolation re-gridding onto a ``fs_out`` time grid."""
    if fs_out == rec.fs_hz:
        return replace(rec, samples=rec.samples.copy(), events=list(rec.events))
    T = rec.samples.shape[1]
    n_out = int(round(T * fs_out / rec.fs_hz))
    t_in = np.arange(T) / rec.fs_hz
    t_out = np.arange(n_out) / fs_out
    out = np.stack([np.interp(t_out, t_in, ch) for ch in rec.samples])
    ratio = fs_out / rec.fs_hz
    events = [(min(int(round(on * ratio)), n_out - 1), lab) for on, lab in rec.events]
    return ContinuousRecording(out, float(fs_out), list(rec.channel_names), events)


def segment_trials(rec: ContinuousRecording, duration_s: float, subject_id: str = "") -> TrialSet:
    n = int(round(duration_s * rec.fs_hz))
    C, T = rec.samples.shape
    data = np.empty((len(rec.events), C, n), dtype=np.float64)
    labels = np.empty(len(rec.events), dtype=np.int64)
    for i, (onset, label) in enumerate(rec.events):
        if onset + n > T:
            raise TrialOutOfBoundsError(i, f"event {i} at sample {onset} needs {n} samples, recording has {T}")
        data[i] = rec.samples[:, onset:onset + n]
        labels[i] = label
    return TrialSet(data, labels, rec.fs_hz, subject_id, duration_s, list(rec.channel_names))


def average_groups(ts: TrialSet, group_size: int) -> TrialSet:
    """Average consecutive groups of ``group_size`` same-label trials."""
    B = len(ts)
    g = int(group_size)
    if g < 1:
        raise ValueError("group_size must be >= 1")
    if B % g:
        raise IndivisibleBatchError(f"{B} trials do not split into groups of {g}")
    if g == 1:
        return replace(ts, data=ts.data.copy(), labels=ts.labels.copy())
    labels = ts.labels.reshape(-1, g)
    bad = np.flatnonzero(np.any(labels != labels[:, :1], axis=1))
    if bad.size:
        raise MixedLabelGroupError(f"group {int(bad[0])} mixes labels {sorted(set(labels[bad[0]].tolist()))}")
    data = ts.data.reshape(B // g, g, *ts.data.shape[1:]).mean(axis=1)
    return replace(ts, data=data, labels=labels[:, 0].copy())


def group_by_label(ts: TrialSet) -> TrialSet:
    """Stable reorder so trials of the same label are contiguous."""
    order = np.argsort(ts.labels, kind="stable")
    return ts.subset(order)


def shift_samples(book: CodeBook, n_samples: int) -> np.ndarray:
    """Per-target rotation in samples, rounded once per target."""
    spb = n_samples / book.length
    return np.array([int(round(s * spb)) for s in book.shifts], dtype=np.int64)


def synthesize_shifted(reference: TrialSet, book: CodeBook) -> TrialSet:
    """Build responses for every target by rotating reference-target trials.

    Output is ordered reference-trial major: row ``r * K + j`` is reference
    trial ``r`` rotated for target ``j``.
    """
    if len(reference) and np.any(reference.labels != 0):
        bad = int(np.flatnonzero(reference.labels != 0)[0])
        raise NonReferenceLabelError(f"trial {bad} has label {int(reference.labels[bad])}, expected 0")
    K = book.n_targets
    rot = shift_samples(book, reference.n_samples)
    B, C, T = reference.data.shape
    out = np.empty((B, K, C, T), dtype=reference.data.dtype)
    for j, r in enumerate(rot):
        out[:, j] = np.roll(reference.data, r, axis=-1)
    labels = np.tile(np.arange(K), B)
    return replace(reference, data=out.reshape(B * K, C, T), labels=labels)


def fit_length(ts: TrialSet, target_len: int = ENCODER_LEN) -> TrialSet:
    """Linearly re-grid every trial to ``target_len`` samples, keeping both endpoints."""
    T = ts.n_samples
    if T < 2:
        raise ValueError("need at least 2 samples per trial")
    if T == target_len:
        return replace(ts, data=ts.data.copy())
    x_new = np.linspace(0.0, T - 1, target_len)
    lo = np.minimum(np.floor(x_new).astype(np.int64), T - 2)
    frac = x_new - lo
    left = ts.data[..., lo]
    data = left + (ts.data[..., lo + 1] - left) * frac
    data[..., -1] = ts.data[..., -1]
    fs = ts.fs_hz * (target_len - 1) / (T - 1)
    return replace(ts, data=data, fs_hz=fs)

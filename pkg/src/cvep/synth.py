"""Synthetic c-VEP cohorts with known ground truth.

The forward model is linear: a damped-sinusoid impulse response is triggered
by every bit of the (periodically repeated) stimulus code, the resulting
scalar source is projected onto the channels by a per-subject mixing vector,
and white Gaussian noise is added.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import BitSequence, CodeBook, build_codebook, generate_golay_pair
from .dataset import Dataset, SubjectRecord
from .dsp import TrialSet
from .errors import InvalidSpecError


@dataclass(frozen=True)
class VepKernel:
    latency_s: float
    decay_s: float
    freq_hz: float
    fs_hz: float
    taps: np.ndarray

    def evaluate(self, t) -> np.ndarray:
        """Closed-form response at arbitrary times ``t`` (seconds), truncated at the tap length."""
        t = np.asarray(t, dtype=np.float64)
        tau = t - self.latency_s
        support = self.taps.size / self.fs_hz
        out = np.exp(-np.maximum(tau, 0.0) / self.decay_s) * np.sin(2 * np.pi * self.freq_hz * tau)
        return np.where((tau >= 0) & (t < support), out, 0.0)


def vep_kernel(latency_s: float = 0.1, decay_s: float = 0.15, freq_hz: float = 10.0,
               fs_hz: float = 240.0, duration_s: float = 0.6) -> VepKernel:
    if min(latency_s, decay_s, freq_hz, fs_hz, duration_s) <= 0:
        raise ValueError("kernel parameters must be positive")
    if latency_s >= duration_s:
        raise ValueError("latency must be shorter than the kernel duration")
    n = int(round(duration_s * fs_hz))
    idx = np.arange(n)
    tau = (idx - latency_s * fs_hz) / fs_hz
    taps = np.exp(-np.maximum(tau, 0.0) / decay_s) * np.sin(2 * np.pi * freq_hz * tau)
    taps[idx < latency_s * fs_hz - 1e-9] = 0.0
    taps.setflags(write=False)
    return VepKernel(latency_s, decay_s, freq_hz, fs_hz, taps)


@dataclass(frozen=True)
class SubjectModel:
    mixing: np.ndarray  # (C,), unit norm
    noise_sigma: float = 1.0
    latency_jitter_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        m = np.asarray(self.mixing, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(m)
        if not np.isclose(norm, 1.0):
            raise ValueError(f"mixing must have unit norm (got {norm})")
        object.__setattr__(self, "mixing", m)


@dataclass
class CohortSpec:
    n_subjects: int = 8
    similarity_rho: float = 0.9
    n_trials_per_target: int = 10
    snr: float = 1.0
    codebook: CodeBook | None = None
    fs_hz: float = 240.0
    duration_s: float | None = None  # defaults to one code period
    n_channels: int = 8
    noise_sigma: float = 1.0
    latency_jitter_s: float = 0.02
    layout: str = "ensemble"
    block_size: int = 5  # consecutive repeats of a target (ensemble layout)
    n_reference_trials: int | None = None  # circular_shift calibration trials
    n_test_per_target: int = 5  # circular_shift test session
    kernel_latency_s: float = 0.1
    kernel_decay_s: float = 0.15
    kernel_freq_hz: float = 10.0
    kernel_duration_s: float = 0.6
    name: str = "synthetic"
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.codebook is None:
            a, _ = generate_golay_pair(6)
            self.codebook = build_codebook(a, 16, 4)
        if self.duration_s is None:
            self.duration_s = self.codebook.base.duration_s

    def validate(self) -> None:
        if not 0.0 <= self.similarity_rho <= 1.0:
            raise InvalidSpecError(f"similarity_rho must lie in [0, 1], got {self.similarity_rho}")
        if self.snr < 0:
            raise InvalidSpecError(f"snr must be >= 0, got {self.snr}")
        if self.n_subjects < 1 or self.n_trials_per_target < 1 or self.n_channels < 1:
            raise InvalidSpecError("n_subjects, n_trials_per_target and n_channels must be >= 1")
        if self.fs_hz <= 0 or self.noise_sigma < 0:
            raise InvalidSpecError("fs_hz must be positive and noise_sigma non-negative")
        if self.layout not in ("ensemble", "circular_shift"):
            raise InvalidSpecError(f"unknown layout {self.layout!r}")
        if self.duration_s < self.codebook.base.duration_s - 1e-9:
            raise InvalidSpecError("trial duration shorter than one code period")
        if self.layout == "ensemble" and self.n_trials_per_target % self.block_size:
            raise InvalidSpecError("n_trials_per_target must be a multiple of block_size")


def source_signal(code: BitSequence, kernel: VepKernel, fs_hz: float, duration_s: float) -> np.ndarray:
    """Steady-state response to the code repeated back to back, sampled over one trial."""
    n = int(round(duration_s * fs_hz))
    t = np.arange(n) / fs_hz
    br = code.bit_rate_hz
    period = code.length / br
    support = kernel.taps.size / kernel.fs_hz
    n_prev = int(np.ceil(support / period)) + 1
    onsets = np.arange(code.length) / br
    s = np.zeros(n)
    for m in range(-n_prev, int(np.ceil(duration_s / period)) + 1):
        lag = t[:, None] - (onsets[None, :] + m * period)
        s += kernel.evaluate(lag) @ code.bits.astype(np.float64)
    return s


def simulate_trial(code: BitSequence, subj: SubjectModel, kernel: VepKernel, fs_hz: float,
                   duration_s: float, snr: float, rng: np.random.Generator,
                   source: np.ndarray | None = None) -> np.ndarray:
    """One ``(C, T)`` trial: scaled source on every channel plus white noise."""
    if duration_s < code.duration_s - 1e-9:
        raise ValueError("trial shorter than one code period")
    s = source_signal(code, kernel, fs_hz, duration_s) if source is None else source
    rms = np.sqrt(np.mean(s * s))
    signal_part = snr * subj.mixing[:, None] * (s / rms)[None, :]
    noise = rng.standard_normal(signal_part.shape)
    return signal_part + subj.noise_sigma * noise


def subject_models(spec: CohortSpec, master_seed: int) -> list[SubjectModel]:
    C = spec.n_channels
    proto = np.random.default_rng([master_seed, 1]).standard_normal(C)
    proto /= np.linalg.norm(proto)
    rho = spec.similarity_rho
    models = []
    for s in range(spec.n_subjects):
        rng = np.random.default_rng([master_seed, 2, s])
        own = rng.standard_normal(C)
        own /= np.linalg.norm(own)
        mix = rho * proto + (1.0 - rho) * own
        mix /= np.linalg.norm(mix)
        jitter = (1.0 - rho) * spec.latency_jitter_s * rng.standard_normal()
        models.append(SubjectModel(mix, spec.noise_sigma, float(jitter), seed=s))
    return models


def _ensemble_labels(K: int, n_per_target: int, block: int, rng: np.random.Generator) -> np.ndarray:
    rounds = []
    for _ in range(n_per_target // block):
        rounds.append(np.repeat(rng.permutation(K), block))
    return np.concatenate(rounds)


def generate_subject(spec: CohortSpec, model: SubjectModel, master_seed: int, index: int) -> SubjectRecord:
    book = spec.codebook
    K = book.n_targets
    fs, dur = spec.fs_hz, spec.duration_s
    kernel = vep_kernel(spec.kernel_latency_s + model.latency_jitter_s, spec.kernel_decay_s,
                        spec.kernel_freq_hz, fs, spec.kernel_duration_s)
    sources = [source_signal(book.code(j), kernel, fs, dur) for j in range(K)]
    rng = np.random.default_rng([master_seed, 3, index])
    sid = f"{index + 1:02d}"
    names = spec.channel_names or [f"ch{i}" for i in range(spec.n_channels)]

    def draw(labels) -> TrialSet:
        data = np.stack([simulate_trial(book.code(j), model, kernel, fs, dur, spec.snr, rng, sources[j])
                         for j in labels]) if len(labels) else np.zeros((0, spec.n_channels, int(round(dur * fs))))
        return TrialSet(data, labels, fs, sid, dur, list(names))

    if spec.layout == "ensemble":
        labels = _ensemble_labels(K, spec.n_trials_per_target, spec.block_size, rng)
        return SubjectRecord(sid, "ensemble", draw(labels), book)
    n_ref = spec.n_reference_trials or spec.n_trials_per_target * K
    calib = draw(np.zeros(n_ref, dtype=np.int64))
    test_labels = _ensemble_labels(K, spec.n_test_per_target, 1, rng)
    return SubjectRecord(sid, "circular_shift", calib, book, draw(test_labels))


def generate_cohort(spec: CohortSpec, master_seed: int = 0) -> Dataset:
    spec.validate()
    models = subject_models(spec, master_seed)
    subjects = [generate_subject(spec, m, master_seed, i) for i, m in enumerate(models)]
    return Dataset(subjects, name=spec.name)

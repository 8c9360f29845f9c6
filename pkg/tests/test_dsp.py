import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from cvep.codebook import build_codebook, generate_golay_pair, generate_m_sequence
from cvep.dsp import (
    ContinuousRecording,
    TrialSet,
    apply_filter,
    average_groups,
    design_bandpass,
    filter_trials,
    fit_length,
    resample,
    segment_trials,
    shift_samples,
    synthesize_shifted,
)
from cvep.errors import (
    IndivisibleBatchError,
    InvalidBandError,
    MixedLabelGroupError,
    NonReferenceLabelError,
    RateMismatchError,
    TrialOutOfBoundsError,
)


def sine(freq, fs, n, phase=0.0):
    return np.sin(2 * np.pi * freq * np.arange(n) / fs + phase)


# -- filter design -------------------------------------------------------------

@pytest.mark.parametrize("order,lo,hi,fs", [(4, 4, 31, 2000), (4, 2, 30, 1000), (2, 1, 40, 250),
                                            (6, 5, 45, 500), (8, 8, 12, 240)])
def test_bandpass_matches_scipy_butterworth(order, lo, hi, fs):
    f = design_bandpass(order, lo, hi, fs)
    assert f.sections.shape == (order // 2, 6)
    ref = signal.butter(order // 2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    freqs = np.linspace(0.1, fs / 2 - 0.1, 2000)
    _, h_ref = signal.sosfreqz(ref, worN=freqs, fs=fs)
    np.testing.assert_allclose(f.gain(freqs), np.abs(h_ref), atol=1e-9)


def test_bandpass_fast_stim_design():
    f = design_bandpass(4, 4, 31, 2000)
    assert f.gain([0.0])[0] == pytest.approx(0.0, abs=1e-15)
    assert f.gain([np.sqrt(4 * 31)])[0] >= 0.95
    assert f.is_stable()


def test_bandpass_group_mod_edges():
    f = design_bandpass(4, 2, 30, 1000)
    g_lo, g_hi = f.gain([2.0, 30.0])
    assert 0.66 <= g_lo <= 0.75
    assert 0.66 <= g_hi <= 0.75
    assert f.is_stable()


@pytest.mark.parametrize("lo,hi,fs", [(4, 31, 2000), (2, 30, 1000)])
def test_minus_3db_points_within_two_percent(lo, hi, fs):
    f = design_bandpass(4, lo, hi, fs)
    grid = np.linspace(0.01, 2 * hi, 400001)
    g = f.gain(grid)
    above = grid[g >= 1 / np.sqrt(2)]
    assert abs(above[0] - lo) / lo < 0.02
    assert abs(above[-1] - hi) / hi < 0.02


@pytest.mark.parametrize("args", [(3, 4, 31, 2000), (4, 0, 31, 2000), (4, 31, 4, 2000), (4, 4, 1000, 2000),
                                  (10, 4, 31, 2000)])
def test_bandpass_invalid(args):
    with pytest.raises(InvalidBandError):
        design_bandpass(*args)


# -- filtering -----------------------------------------------------------------

def test_filter_zero_in_zero_out():
    f = design_bandpass(4, 4, 31, 2000)
    rec = ContinuousRecording(np.zeros((3, 4000)), 2000)
    assert np.all(apply_filter(f, rec, zero_phase=True).samples == 0)


def test_filter_passband_sine_amplitude_and_lag():
    fs, n = 2000, 8000
    f = design_bandpass(4, 4, 31, fs)
    x = sine(15, fs, n)
    y = apply_filter(f, ContinuousRecording(x[None, :], fs)).samples[0]
    core = slice(2000, 6000)
    # least-squares fit of a*sin + b*cos at 15 Hz
    t = np.arange(n)[core] / fs
    basis = np.stack([np.sin(2 * np.pi * 15 * t), np.cos(2 * np.pi * 15 * t)], axis=1)
    (a, b), *_ = np.linalg.lstsq(basis, y[core], rcond=None)
    assert abs(np.hypot(a, b) - 1.0) < 0.05
    lag_samples = np.arctan2(b, a) / (2 * np.pi * 15) * fs
    assert abs(lag_samples) < 1.0
    xc = np.correlate(y[core], x[core], mode="full")
    assert int(np.argmax(xc)) - (core.stop - core.start - 1) == 0


def test_filter_stopband_attenuation():
    fs = 2000
    f = design_bandpass(4, 4, 31, fs)
    x = sine(0.5, fs, 40000)
    y = apply_filter(f, ContinuousRecording(x[None, :], fs)).samples[0]
    core = slice(8000, 32000)
    assert np.sqrt(np.mean(y[core] ** 2)) < 0.05 * np.sqrt(np.mean(x[core] ** 2))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_filter_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    f = design_bandpass(4, 2, 30, 1000)
    x = rng.standard_normal((2, 1500))
    y = rng.standard_normal((2, 1500))
    fx = apply_filter(f, ContinuousRecording(x, 1000)).samples
    fy = apply_filter(f, ContinuousRecording(y, 1000)).samples
    fxy = apply_filter(f, ContinuousRecording(a * x + b * y, 1000)).samples
    scale = max(np.abs(fxy).max(), 1e-12)
    assert np.abs(fxy - (a * fx + b * fy)).max() <= 1e-9 * scale + 1e-12


def test_causal_mode_differs_from_zero_phase():
    f = design_bandpass(4, 4, 31, 2000)
    x = ContinuousRecording(sine(15, 2000, 4000)[None, :], 2000)
    assert not np.allclose(apply_filter(f, x, zero_phase=False).samples, apply_filter(f, x).samples)


def test_rate_mismatch():
    f = design_bandpass(4, 4, 31, 2000)
    with pytest.raises(RateMismatchError):
        apply_filter(f, ContinuousRecording(np.zeros((1, 100)), 1000))
    with pytest.raises(RateMismatchError):
        filter_trials(f, TrialSet(np.zeros((1, 1, 100)), [0], 1000))


# -- resampling ------------------------------------------------------------------

def test_resample_identity():
    rec = ContinuousRecording(np.random.default_rng(0).standard_normal((2, 300)), 100, events=[(5, 1)])
    out = resample(rec, 100)
    np.testing.assert_array_equal(out.samples, rec.samples)
    assert out.events == rec.events


def test_resample_length_and_events():
    rec = ContinuousRecording(np.zeros((1, 2100)), 2000, events=[(0, 0), (1000, 3), (2099, 1)])
    out = resample(rec, 100)
    assert out.samples.shape == (1, 105)
    assert out.events == [(0, 0), (50, 3), (104, 1)]


def test_resample_sine_accuracy():
    fs_in, n = 2000, 4000
    rec = ContinuousRecording(sine(5, fs_in, n)[None, :], fs_in)
    out = resample(rec, 100)
    expected = sine(5, 100, out.samples.shape[1])
    assert np.abs(out.samples[0] - expected).max() < 0.01


# -- segmentation and averaging ----------------------------------------------------

def test_segment_800_events():
    fs = 100
    onsets = [i * 110 for i in range(800)]
    rec = ContinuousRecording(np.zeros((2, onsets[-1] + 200)), fs, events=[(o, i % 32) for i, o in enumerate(onsets)])
    ts = segment_trials(rec, 1.05, "01")
    assert ts.data.shape == (800, 2, 105)
    assert ts.labels.tolist() == [i % 32 for i in range(800)]


def test_segment_window_contents():
    x = np.arange(50, dtype=float)[None, :]
    ts = segment_trials(ContinuousRecording(x, 10, events=[(3, 0), (20, 1)]), 0.5)
    np.testing.assert_array_equal(ts.data[0, 0], np.arange(3, 8))
    np.testing.assert_array_equal(ts.data[1, 0], np.arange(20, 25))


def test_segment_no_events():
    ts = segment_trials(ContinuousRecording(np.zeros((3, 10)), 10), 0.5)
    assert len(ts) == 0
    assert ts.data.shape == (0, 3, 5)


def test_segment_out_of_bounds_names_event():
    rec = ContinuousRecording(np.zeros((1, 100)), 100, events=[(0, 0), (99, 1)])
    with pytest.raises(TrialOutOfBoundsError) as info:
        segment_trials(rec, 1.0)
    assert info.value.event_index == 1


def test_average_groups_counts():
    labels = np.repeat(np.arange(160), 5)
    ts = TrialSet(np.random.default_rng(0).standard_normal((800, 2, 10)), labels, 100)
    out = average_groups(ts, 5)
    assert len(out) == 160
    assert out.labels.tolist() == list(range(160))
    np.testing.assert_allclose(out.data[7], ts.data[35:40].mean(axis=0))


def test_average_groups_identity_and_constant():
    ts = TrialSet(np.random.default_rng(1).standard_normal((6, 2, 8)), [0, 0, 1, 1, 2, 2], 100)
    np.testing.assert_array_equal(average_groups(ts, 1).data, ts.data)
    const = TrialSet(np.full((4, 2, 8), 3.25), [1, 1, 1, 1], 100)
    np.testing.assert_array_equal(average_groups(const, 4).data, np.full((1, 2, 8), 3.25))


def test_average_groups_errors():
    ts = TrialSet(np.zeros((6, 1, 4)), [0, 0, 1, 1, 1, 1], 100)
    with pytest.raises(IndivisibleBatchError):
        average_groups(ts, 4)
    with pytest.raises(MixedLabelGroupError):
        average_groups(ts, 3)


def test_average_groups_reduces_noise_variance():
    rng = np.random.default_rng(123)
    g = 5
    ts = TrialSet(rng.standard_normal((500, 4, 200)), np.zeros(500, dtype=int), 100)
    ratio = ts.data.var() / average_groups(ts, g).data.var()
    assert abs(ratio - g) / g < 0.2


# -- circular-shift synthesis ---------------------------------------------------------

def golay_book():
    a, _ = generate_golay_pair(6)
    return build_codebook(a, 16, 4)


def test_synthesize_counts_and_zero_shift():
    book = golay_book()
    ref = TrialSet(np.random.default_rng(2).standard_normal((200, 3, 64)), np.zeros(200, dtype=int), 60)
    out = synthesize_shifted(ref, book)
    assert len(out) == 3200
    np.testing.assert_array_equal(out.data[0::16], ref.data)
    assert out.labels[:16].tolist() == list(range(16))


def test_synthesize_rejects_non_reference():
    with pytest.raises(NonReferenceLabelError):
        synthesize_shifted(TrialSet(np.zeros((2, 1, 64)), [0, 3], 60), golay_book())


@settings(max_examples=10, deadline=None)
@given(st.integers(64, 1100), st.integers(0, 2**31 - 1))
def test_synthesize_rotating_back_reproduces_reference(T, seed):
    book = build_codebook(generate_m_sequence(6), 32, 1)
    ref = TrialSet(np.random.default_rng(seed).standard_normal((2, 2, T)), [0, 0], 100)
    out = synthesize_shifted(ref, book)
    rot = shift_samples(book, T)
    for r in range(2):
        for j in range(32):
            np.testing.assert_array_equal(np.roll(out.data[r * 32 + j], -rot[j], axis=-1), ref.data[r])


def test_shift_rounding_per_target():
    book = build_codebook(generate_m_sequence(6), 32, 1)
    rot = shift_samples(book, 1024)
    exact = np.array(book.shifts) * 1024 / 63
    assert np.abs(rot - exact).max() <= 0.5


def test_synthesized_trials_decode_to_their_targets():
    # noiseless reference response, decoded by brute-force circular correlation over all shifts
    book = golay_book()
    T = 256
    rng = np.random.default_rng(9)
    template = np.repeat(book.code(0).bits.astype(float), T // 64)
    template = np.convolve(np.tile(template, 2), np.exp(-np.arange(12) / 3.0))[T:2 * T]
    mixing = rng.standard_normal(3)
    ref = TrialSet(np.stack([np.outer(mixing * (1 + g), template) for g in rng.random(10)]),
                   np.zeros(10, dtype=int), 240)
    out = synthesize_shifted(ref, book)
    rot = shift_samples(book, T)
    for trial, label in zip(out.data, out.labels):
        x = mixing @ trial
        scores = [np.dot(x, np.roll(template, r)) for r in rot]
        assert int(np.argmax(scores)) == label


# -- length normalization ------------------------------------------------------------------

def test_fit_length_fast_stim_endpoints():
    ts = TrialSet(np.random.default_rng(3).standard_normal((4, 2, 105)), [0, 1, 2, 3], 100, trial_duration_s=1.05)
    out = fit_length(ts)
    assert out.data.shape == (4, 2, 1024)
    np.testing.assert_array_equal(out.data[..., 0], ts.data[..., 0])
    np.testing.assert_array_equal(out.data[..., -1], ts.data[..., -1])
    assert out.fs_hz == pytest.approx(100 * 1023 / 104)
    assert out.labels.tolist() == ts.labels.tolist()


def test_fit_length_matches_interp():
    x = np.random.default_rng(4).standard_normal(105)
    out = fit_length(TrialSet(x[None, None, :], [0], 100)).data[0, 0]
    np.testing.assert_allclose(out, np.interp(np.linspace(0, 104, 1024), np.arange(105), x), atol=1e-12)


def test_fit_length_identity_and_constant():
    x = np.random.default_rng(5).standard_normal((2, 3, 1024))
    np.testing.assert_array_equal(fit_length(TrialSet(x, [0, 1], 1000)).data, x)
    c = fit_length(TrialSet(np.full((1, 2, 1066), -2.5), [0], 1000)).data
    assert c.shape == (1, 2, 1024)
    assert np.all(c == -2.5)


def test_segment_then_fit_preserves_counts():
    rec = ContinuousRecording(np.random.default_rng(6).standard_normal((2, 5000)), 1000,
                              events=[(i * 1200, i % 16) for i in range(4)])
    ts = fit_length(segment_trials(rec, 1.06))
    assert len(ts) == 4
    assert ts.labels.tolist() == [0, 1, 2, 3]
    assert ts.n_samples == 1024

"""Stimulus codes for c-VEP targets: m-sequences, Golay pairs and shifted codebooks.

Sequences are held in bipolar form (+1/-1). The binary form {0, 1} is only
accepted at the file boundary, where 0 maps to -1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AllZeroStateError,
    FormatError,
    NonMaximalPeriodError,
    ShiftCollisionError,
)

FAMILIES = ("m-sequence", "golay-a", "golay-b", "custom")

# x^n + x^k + 1 style primitive polynomials, written as tap sets
DEFAULT_TAPS = {
    2: (2, 1),
    3: (3, 1),
    4: (4, 1),
    5: (5, 2),
    6: (6, 1),
    7: (7, 1),
    8: (8, 4, 3, 2),
    9: (9, 4),
    10: (10, 3),
}


@dataclass(frozen=True)
class BitSequence:
    """An immutable bipolar stimulus code."""

    bits: np.ndarray
    family: str = "custom"
    bit_rate_hz: float = 60.0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size < 1:
            raise ValueError("bits must be a non-empty 1-D sequence")
        if not np.all((bits == 1) | (bits == -1)):
            raise ValueError("every element must be +1 or -1")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.bit_rate_hz <= 0:
            raise ValueError("bit_rate_hz must be positive")
        bits = bits.astype(np.int8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def length(self) -> int:
        return int(self.bits.size)

    @property
    def duration_s(self) -> float:
        """Time needed to present one full period of the code."""
        return self.length / self.bit_rate_hz

    def __eq__(self, other):
        if not isinstance(other, BitSequence):
            return NotImplemented
        return (
            self.family == other.family
            and self.bit_rate_hz == other.bit_rate_hz
            and np.array_equal(self.bits, other.bits)
        )

    def __hash__(self):
        return hash((self.family, self.bit_rate_hz, self.bits.tobytes()))


@dataclass(frozen=True)
class CodeBook:
    base: BitSequence
    n_targets: int
    shift_step: int
    shifts: tuple[int, ...] = field(default=())

    @property
    def length(self) -> int:
        return self.base.length

    def code(self, target: int) -> BitSequence:
        return circular_shift(self.base, self.shifts[target])

    def codes(self) -> np.ndarray:
        """All target codes stacked as an ``(n_targets, L)`` array."""
        return np.stack([np.roll(self.base.bits, k) for k in self.shifts])


def generate_m_sequence(
    register_len: int = 6,
    taps: Iterable[int] | None = None,
    init_state: Sequence[int] | None = None,
    bit_rate_hz: float = 60.0,
) -> BitSequence:
    """Generate a maximal-length sequence with a Fibonacci LFSR.

    Parameters
    ----------
    register_len : int
        Number of register stages ``n``; the output has length ``2**n - 1``.
    taps : iterable of int, optional
        1-indexed register stages XOR-ed into the feedback, e.g. ``(6, 1)`` for
        x^6 + x + 1. Defaults to a known primitive polynomial for ``n``.
    init_state : sequence of int, optional
        ``n`` binary values for stages 1..n. Defaults to all ones.

    Raises
    ------
    AllZeroStateError
        If the initial register is all zero.
    NonMaximalPeriodError
        If the register cycle is shorter than ``2**n - 1``.
    """
    n = int(register_len)
    if n < 1:
        raise ValueError("register_len must be >= 1")
    if taps is None:
        if n not in DEFAULT_TAPS:
            raise ValueError(f"no default taps for register length {n}")
        taps = DEFAULT_TAPS[n]
    taps = sorted({int(t) for t in taps})
    if not taps or taps[0] < 1 or taps[-1] > n:
        raise ValueError(f"taps must lie in 1..{n}")
    state = [1] * n if init_state is None else [int(b) & 1 for b in init_state]
    if len(state) != n:
        raise ValueError(f"init_state must have {n} bits")
    if not any(state):
        raise AllZeroStateError("LFSR initial state must not be all zero")

    period = 2**n - 1
    start = tuple(state)
    out = np.empty(period, dtype=np.int8)
    for i in range(period):
        out[i] = state[-1]
        feedback = 0
        for t in taps:
            feedback ^= state[t - 1]
        state = [feedback] + state[:-1]
        if tuple(state) == start and i + 1 < period:
            raise NonMaximalPeriodError(
                f"taps {taps} cycle after {i + 1} steps, expected {period}"
            )
    if tuple(state) != start:
        raise NonMaximalPeriodError(f"taps {taps} do not return to the initial state")
    return BitSequence(2 * out.astype(np.int8) - 1, family="m-sequence", bit_rate_hz=bit_rate_hz)


def generate_golay_pair(order: int, bit_rate_hz: float = 60.0) -> tuple[BitSequence, BitSequence]:
    """Complementary pair of length ``2**order`` built by repeated doubling."""
    if order < 0:
        raise ValueError("order must be >= 0")
    a = np.array([1], dtype=np.int8)
    b = np.array([1], dtype=np.int8)
    for _ in range(order):
        a, b = np.concatenate([a, b]), np.concatenate([a, -b])
    return (
        BitSequence(a, family="golay-a", bit_rate_hz=bit_rate_hz),
        BitSequence(b, family="golay-b", bit_rate_hz=bit_rate_hz),
    )


def circular_shift(seq: BitSequence, k: int) -> BitSequence:
    """Right rotation: ``out[i] = seq[(i - k) mod L]``."""
    return BitSequence(np.roll(seq.bits, int(k) % seq.length), family=seq.family, bit_rate_hz=seq.bit_rate_hz)


def build_codebook(base: BitSequence, n_targets: int, shift_step: int | None = None) -> CodeBook:
    """Allocate one circular shift of ``base`` to each of ``n_targets`` targets.

    ``shift_step`` defaults to ``L // n_targets`` when that divides evenly,
    otherwise to 1.
    """
    L = base.length
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    if shift_step is None:
        shift_step = L // n_targets if L % n_targets == 0 else 1
    shifts = tuple((j * int(shift_step)) % L for j in range(n_targets))
    if len(set(shifts)) != n_targets:
        seen: dict[int, int] = {}
        for j, s in enumerate(shifts):
            if s in seen:
                raise ShiftCollisionError(
                    f"targets {seen[s]} and {j} both receive shift {s} (L={L}, step={shift_step})"
                )
            seen[s] = j
    return CodeBook(base=base, n_targets=n_targets, shift_step=int(shift_step), shifts=shifts)


def periodic_autocorrelation(seq: BitSequence) -> np.ndarray:
    """``R[k] = sum_i seq[i] * seq[(i + k) mod L]`` for every lag k."""
    x = seq.bits.astype(np.int64)
    return np.array([int(np.dot(x, np.roll(x, -k))) for k in range(x.size)], dtype=np.int64)


def aperiodic_autocorrelation(seq: BitSequence) -> np.ndarray:
    """Non-cyclic autocorrelation at lags ``-(L-1) .. L-1``."""
    x = seq.bits.astype(np.int64)
    return np.correlate(x, x, mode="full")


def write_codebook(book: CodeBook, path: str | Path) -> None:
    base = book.base
    header = f"{base.length} {book.n_targets} {book.shift_step} {base.bit_rate_hz:g} {base.family}\n"
    body = " ".join("+1" if b > 0 else "-1" for b in base.bits) + "\n"
    Path(path).write_text(header + body, encoding="utf-8")


def read_codebook(path: str | Path) -> CodeBook:
    """Parse a codebook file. Bits may be written as +1/-1 or 0/1."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise FormatError("expected a header line and a sequence line", field=str(path))
    head = lines[0].split()
    if len(head) != 5:
        raise FormatError("header must be 'L n_targets shift_step bit_rate_hz family'", field="header")
    try:
        L, n_targets, step = int(head[0]), int(head[1]), int(head[2])
        rate = float(head[3])
    except ValueError as exc:
        raise FormatError(str(exc), field="header") from exc
    family = head[4]
    if family not in FAMILIES:
        raise FormatError(f"unknown family {family!r}", field="header.family")
    tokens = " ".join(lines[1:]).split()
    if set(tokens) <= {"0", "1"}:
        bits = [1 if t == "1" else -1 for t in tokens]
    else:
        try:
            bits = [int(t) for t in tokens]
        except ValueError as exc:
            raise FormatError(str(exc), field="bits") from exc
        if any(b not in (1, -1) for b in bits):
            raise FormatError("bits must be +1/-1 or 0/1", field="bits")
    if len(bits) != L:
        raise FormatError(f"header says L={L} but {len(bits)} bits follow", field="bits")
    base = BitSequence(np.array(bits), family=family, bit_rate_hz=rate)
    return build_codebook(base, n_targets, step)

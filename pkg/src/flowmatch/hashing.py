"""Windowed packet-count features and the sinusoidal-projection binary flow hash.

A flow is reduced to N evenly spaced time windows; the per-window packet
counts are projected onto m fixed pseudo-random sinusoidal bases and the sign
pattern of the accumulated projections is the m-bit fingerprint. Two vantage
points that share the basis seed compute comparable fingerprints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flows import FlowId, Trace

_REP_TIME_MODES = ("midpoint", "start")


class FlowDiscarded(Exception):
    """A flow has fewer packets than time windows and must be skipped."""

    def __init__(self, id: FlowId, n_packets: int, n_windows: int):
        super().__init__(
            f"flow {id}: {n_packets} packets < {n_windows} windows, discard"
        )
        self.id = id
        self.n_packets = n_packets
        self.n_windows = n_windows


@dataclass(frozen=True)
class HashConfig:
    """Hash parameters shared by both vantage points.

    `rep_time` picks the representative time fed to the bases per window
    (window midpoint by default). `weight_first_window` switches on the
    ablation variant that multiplies window 0's projection by its packet
    count; the default adds it unweighted. `time_scale` converts window
    times to basis units (1.0 = seconds).
    """

    n_windows: int = 256
    hash_bits: int = 256
    basis_seed: int = 0
    rep_time: str = "midpoint"
    weight_first_window: bool = False
    time_scale: float = 1.0

    def __post_init__(self):
        if self.n_windows < 1:
            raise ValueError("n_windows must be >= 1")
        if self.hash_bits < 1:
            raise ValueError("hash_bits must be >= 1")
        if self.rep_time not in _REP_TIME_MODES:
            raise ValueError(f"rep_time must be one of {_REP_TIME_MODES}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")


@dataclass(frozen=True, eq=False)
class BasisSet:
    """The m pseudo-random bases: basis a evaluates to

        sin(x + a)/5 + sin((x + a) * r_a) * r_a

    with a in 1..m and r_a a fixed random coefficient in (-1, 1). Coefficients
    come from a portable SHA-256 counter stream (see `from_seed`), so any
    implementation with the same seed reproduces them bit-exactly.
    """

    m: int
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64, copy=True).ravel()
        if r.size != self.m:
            raise ValueError("need exactly m coefficients")
        if not np.all((r > -1.0) & (r < 1.0)):
            raise ValueError("coefficients must lie strictly inside (-1, 1)")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @classmethod
    def from_seed(cls, seed: int, m: int) -> "BasisSet":
        """Derive coefficient a (1-indexed) as the first 8 bytes, big-endian,
        of SHA-256(f"flowmatch-basis:{seed}:{a}") mapped through
        (u + 0.5) / 2**64 * 2 - 1 into (-1, 1)."""
        if m < 1:
            raise ValueError("m must be >= 1")
        r = np.empty(m, dtype=np.float64)
        for a in range(1, m + 1):
            digest = hashlib.sha256(f"flowmatch-basis:{seed}:{a}".encode()).digest()
            u = int.from_bytes(digest[:8], "big")
            r[a - 1] = (u + 0.5) / 2.0 ** 64 * 2.0 - 1.0
        return cls(m, r)

    def value(self, a: int, x: float) -> float:
        """Evaluate basis `a` (1-indexed) at time `x`."""
        if not 1 <= a <= self.m:
            raise ValueError(f"basis index {a} out of range 1..{self.m}")
        ra = self.r[a - 1]
        s = x + a
        return float(np.sin(s) / 5.0 + np.sin(s * ra) * ra)

    def row(self, x: float) -> np.ndarray:
        """All m basis values at time `x`."""
        s = x + np.arange(1, self.m + 1, dtype=np.float64)
        return np.sin(s) / 5.0 + np.sin(s * self.r) * self.r

    def matrix(self, xs: np.ndarray) -> np.ndarray:
        """Basis values for several times at once, shape (len(xs), m)."""
        xs = np.asarray(xs, dtype=np.float64)
        s = xs[:, None] + np.arange(1, self.m + 1, dtype=np.float64)[None, :]
        return np.sin(s) / 5.0 + np.sin(s * self.r[None, :]) * self.r[None, :]


def basis_value(a: int, x: float, basis: BasisSet) -> float:
    return basis.value(a, x)


@dataclass(frozen=True, eq=False)
class WindowCounts:
    """Windowed packet-count feature of one flow.

    `cumulative[i]` is the packet count through window i, `deltas[i]` the
    count inside window i (so `deltas[0] == cumulative[0]`), `rep_times[i]`
    the representative time of window i on the flow clock.
    """

    rep_times: np.ndarray
    cumulative: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        rep = np.array(self.rep_times, dtype=np.float64, copy=True)
        cum = np.array(self.cumulative, dtype=np.int64, copy=True)
        del_ = np.array(self.deltas, dtype=np.int64, copy=True)
        if not (rep.shape == cum.shape == del_.shape and rep.ndim == 1 and rep.size >= 1):
            raise ValueError("rep_times, cumulative and deltas must share one 1-d shape")
        if np.any(del_ < 0) or np.any(np.diff(cum) < 0):
            raise ValueError("window counts must be non-negative and cumulative")
        if not np.array_equal(np.cumsum(del_), cum):
            raise ValueError("deltas must sum to the cumulative counts")
        for name, arr in (("rep_times", rep), ("cumulative", cum), ("deltas", del_)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_windows(self) -> int:
        return int(self.deltas.size)

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])


def windowize(trace: Trace, n_windows: int, rep_time: str = "midpoint") -> WindowCounts:
    """Split a flow into `n_windows` evenly spaced windows and count packets.

    Window i covers [i*D/N, (i+1)*D/N) with the last window closed on the
    right, D being the last timestamp. Both directions are counted together.
    Raises `FlowDiscarded` when the flow has fewer packets than windows and
    ValueError when it is empty.
    """
    if rep_time not in _REP_TIME_MODES:
        raise ValueError(f"rep_time must be one of {_REP_TIME_MODES}")
    n = trace.n_packets
    if n == 0:
        raise ValueError("cannot windowize an empty trace")
    if n < n_windows:
        raise FlowDiscarded(trace.id, n, n_windows)
    duration = trace.duration
    if duration > 0:
        idx = np.floor(trace.times * (n_windows / duration)).astype(np.int64)
        np.clip(idx, 0, n_windows - 1, out=idx)
    else:
        idx = np.full(n, n_windows - 1, dtype=np.int64)
    deltas = np.bincount(idx, minlength=n_windows)
    width = duration / n_windows
    offset = 0.5 if rep_time == "midpoint" else 0.0
    rep_times = (np.arange(n_windows, dtype=np.float64) + offset) * width
    return WindowCounts(rep_times, np.cumsum(deltas), deltas)


@dataclass(frozen=True, eq=False)
class FlowHash:
    """m-bit binary fingerprint of a flow; bit a-1 is 1 iff the accumulated
    projection onto basis a is strictly positive."""

    id: FlowId
    bits: np.ndarray
    accumulator: np.ndarray | None = None

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.uint8, copy=True).ravel()
        if bits.size < 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("bits must be a non-empty 0/1 vector")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if self.accumulator is not None:
            acc = np.array(self.accumulator, dtype=np.float64, copy=True).ravel()
            if acc.shape != bits.shape:
                raise ValueError("accumulator must match bits in length")
            if not np.array_equal((acc > 0).astype(np.uint8), bits):
                raise ValueError("bits must equal sign(accumulator > 0)")
            acc.setflags(write=False)
            object.__setattr__(self, "accumulator", acc)

    @property
    def m(self) -> int:
        return int(self.bits.size)

    def to_hex(self) -> str:
        """Little-endian hex: bit 0 of byte 0 is basis a=1."""
        return np.packbits(self.bits, bitorder="little").tobytes().hex()

    @classmethod
    def from_hex(cls, id: FlowId, m: int, hex_bits: str) -> "FlowHash":
        raw = np.frombuffer(bytes.fromhex(hex_bits), dtype=np.uint8)
        bits = np.unpackbits(raw, bitorder="little")
        if bits.size < m:
            raise ValueError(f"hex string too short for {m} bits")
        if np.any(bits[m:] != 0):
            raise ValueError("padding bits beyond m must be zero")
        return cls(id, bits[:m])


def compute_hash(trace: Trace, cfg: HashConfig, basis: BasisSet) -> FlowHash:
    """Hash one flow.

    The accumulator starts at zero; window 0 adds its basis row unweighted
    (unless `cfg.weight_first_window`), every later window i adds its packet
    count times the basis row at that window's representative time. The hash
    is the elementwise sign test accumulator > 0.
    """
    if basis.m != cfg.hash_bits:
        raise ValueError(f"basis has m={basis.m}, config wants {cfg.hash_bits}")
    wc = windowize(trace, cfg.n_windows, cfg.rep_time)
    weights = wc.deltas.astype(np.float64)
    if not cfg.weight_first_window:
        weights[0] = 1.0
    xs = wc.rep_times * cfg.time_scale
    active = weights != 0.0
    acc = weights[active] @ basis.matrix(xs[active])
    # |R_a| < 1.2, so the accumulator can never exceed 1.2 * sum of weights.
    bound = 1.2 * float(np.sum(np.abs(weights))) + 1e-9
    assert np.all(np.abs(acc) <= bound), "accumulator exceeded basis bound"
    return FlowHash(trace.id, (acc > 0).astype(np.uint8), acc)


def hamming(h1: FlowHash, h2: FlowHash) -> int:
    """Number of differing bit positions."""
    if h1.m != h2.m:
        raise ValueError(f"hash length mismatch: {h1.m} != {h2.m}")
    return int(np.count_nonzero(h1.bits != h2.bits))


# ---------------------------------------------------------------------------
# Hash library files: one record per line, "<site>-<instance>,<m>,<hex>".


def save_hash_library(path: Path | str, hashes: list[FlowHash],
                      header_comment: str | None = None) -> None:
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    for h in hashes:
        lines.append(f"{h.id},{h.m},{h.to_hex()}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_hash_library(path: Path | str) -> list[FlowHash]:
    hashes = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}: line {lineno}: expected '<id>,<m>,<hex>'")
        site, _, instance = parts[0].partition("-")
        try:
            fid = FlowId(int(site), int(instance))
            m = int(parts[1])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: bad record") from None
        hashes.append(FlowHash.from_hex(fid, m, parts[2]))
    return hashes

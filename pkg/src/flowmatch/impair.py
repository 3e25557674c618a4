"""Network impairments: packet drop, timing jitter, and adaptive padding.

Each transformation turns a client-side trace into a simulated observation
taken elsewhere in the network. All of them are pure functions of
(input, config, rng state); per-flow rng streams are derived from the config
seed and the flow id so corpora can be processed in any order or in parallel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .flows import (Direction, FlowSet, IpdvDistribution, Trace, build_trace)
from .seeds import rng_for

logger = logging.getLogger(__name__)

# Hard cap on injected packets per flow, as a multiple of the real packet
# count. Keeps degenerate rate scales from padding without bound; orders of
# magnitude above any configurable target rate.
_MAX_DUMMY_FACTOR = 64
_MIN_DELAY = 1e-12


class CalibrationError(RuntimeError):
    """Padding-rate calibration could not reach the target."""

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class ImpairmentConfig:
    """Drop probability + jitter distribution + seed for one impairment cell."""

    drop_probability: float
    ipdv: IpdvDistribution
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")


def drop_packets(trace: Trace, p: float, rng: np.random.Generator) -> Trace:
    """Remove each packet independently with probability `p`; survivors keep
    their order and are re-normalized to start at zero. An empty result is
    legal and left to downstream discard handling."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop probability must be in [0, 1]")
    keep = rng.random(trace.n_packets) >= p
    times = trace.times[keep]
    if times.size:
        times = times - times[0]
    return Trace(trace.id, times, trace.dirs[keep], trace.dummy[keep])


def apply_jitter(trace: Trace, dist: IpdvDistribution, rng: np.random.Generator) -> Trace:
    """Add an independent delay-variation draw to every timestamp, re-sort,
    and re-normalize. Packet count and the direction multiset survive; order
    may not, because large negative draws can overtake neighbours."""
    if trace.n_packets == 0:
        raise ValueError("cannot jitter an empty trace")
    u = np.asarray(dist.sample(rng, size=trace.n_packets), dtype=np.float64)
    return build_trace(trace.id, trace.times + u, trace.dirs, trace.dummy)


def impair_trace(trace: Trace, cfg: ImpairmentConfig) -> Trace:
    """Drop, then jitter (a dropped packet never arrives, so it is never
    jittered). Per-flow rng streams derive from (seed, stage, flow id)."""
    out = drop_packets(trace, cfg.drop_probability, rng_for(cfg.seed, "drop", trace.id))
    if out.n_packets == 0:
        return out
    return apply_jitter(out, cfg.ipdv, rng_for(cfg.seed, "jitter", trace.id))


def impair_flowset(flows: FlowSet, cfg: ImpairmentConfig) -> FlowSet:
    return FlowSet(tuple(impair_trace(t, cfg) for t in flows))


# ---------------------------------------------------------------------------
# Adaptive padding.


@dataclass(frozen=True, eq=False)
class Histogram:
    """Token counts over exponentially spaced inter-arrival bins."""

    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.array(self.bin_edges, dtype=np.float64, copy=True).ravel()
        counts = np.array(self.counts, dtype=np.int64, copy=True).ravel()
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing, length >= 2")
        if counts.size != edges.size - 1:
            raise ValueError("need one count per bin")
        if np.any(counts < 0):
            raise ValueError("token counts must be non-negative")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)
        total = counts.sum()
        # Sampling floor: an all-zero histogram degrades to uniform over bins
        # so the padder always has a gap distribution to draw from.
        weights = counts.astype(np.float64) if total > 0 else np.ones(counts.size)
        cdf = np.cumsum(weights / weights.sum())
        cdf.setflags(write=False)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def sample(self, rng: np.random.Generator) -> float:
        """Draw a gap: pick a bin by token mass, then uniformly inside it."""
        j = int(np.searchsorted(self._cdf, rng.random(), side="right"))
        j = min(j, self.counts.size - 1)
        lo, hi = self.bin_edges[j], self.bin_edges[j + 1]
        return float(lo + rng.random() * (hi - lo))


@dataclass(frozen=True, eq=False)
class ApHistograms:
    """Per-direction burst/gap histograms driving the padder.

    Consecutive same-direction inter-arrival gaps below `split_threshold`
    feed the burst histogram, the rest feed the gap histogram.
    """

    incoming_burst: Histogram
    incoming_gap: Histogram
    outgoing_burst: Histogram
    outgoing_gap: Histogram
    split_threshold: float = 0.1

    def __post_init__(self):
        if self.split_threshold <= 0:
            raise ValueError("split_threshold must be positive")

    def get(self, direction: Direction, mode: str) -> Histogram:
        name = ("incoming" if direction == Direction.INCOMING else "outgoing") + "_" + mode
        return getattr(self, name)


def default_bin_edges(low: float = 1e-3, high: float = 10.0, n_bins: int = 20) -> np.ndarray:
    return np.geomspace(low, high, n_bins + 1)


def build_histograms(corpus: FlowSet, bin_edges: np.ndarray | None = None,
                     split_threshold: float = 0.1) -> ApHistograms:
    """Histogram all consecutive same-direction inter-arrival gaps in a corpus.

    Gaps are clipped into the bin range so the total token count equals the
    total number of gaps.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    edges = default_bin_edges() if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    hists = {}
    total_gaps = 0
    for direction in (Direction.INCOMING, Direction.OUTGOING):
        gaps = []
        for t in corpus:
            times = t.times[t.dirs == int(direction)]
            if times.size >= 2:
                gaps.append(np.diff(times))
        gaps = np.concatenate(gaps) if gaps else np.empty(0)
        total_gaps += gaps.size
        clipped = np.clip(gaps, edges[0], edges[-1])
        burst_counts, _ = np.histogram(clipped[gaps < split_threshold], bins=edges)
        gap_counts, _ = np.histogram(clipped[gaps >= split_threshold], bins=edges)
        name = "incoming" if direction == Direction.INCOMING else "outgoing"
        hists[name + "_burst"] = Histogram(edges, burst_counts)
        hists[name + "_gap"] = Histogram(edges, gap_counts)
    if total_gaps == 0:
        raise ValueError("corpus has no flow with >= 2 packets in any direction")
    return ApHistograms(split_threshold=split_threshold, **hists)


def save_histograms(path: Path | str, h: ApHistograms) -> None:
    """Text form, one line per bin: direction,mode,bin_lo,bin_hi,count."""
    lines = [f"# split_threshold={h.split_threshold!r}"]
    for direction in ("incoming", "outgoing"):
        for mode in ("burst", "gap"):
            hist: Histogram = getattr(h, f"{direction}_{mode}")
            for j in range(hist.counts.size):
                lines.append(
                    f"{direction},{mode},{hist.bin_edges[j]!r},{hist.bin_edges[j + 1]!r},"
                    f"{int(hist.counts[j])}"
                )
    Path(path).write_text("\n".join(lines) + "\n")


def load_histograms(path: Path | str) -> ApHistograms:
    split = 0.1
    data: dict[tuple[str, str], list[tuple[float, float, int]]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "split_threshold=" in line:
                split = float(line.split("=", 1)[1])
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}: line {lineno}: expected 5 fields")
        key = (parts[0], parts[1])
        data.setdefault(key, []).append((float(parts[2]), float(parts[3]), int(parts[4])))
    hists = {}
    for (direction, mode), rows in data.items():
        rows.sort()
        edges = np.array([r[0] for r in rows] + [rows[-1][1]])
        counts = np.array([r[2] for r in rows])
        hists[f"{direction}_{mode}"] = Histogram(edges, counts)
    expected = {"incoming_burst", "incoming_gap", "outgoing_burst", "outgoing_gap"}
    if set(hists) != expected:
        raise ValueError(f"{path}: missing histogram sections {expected - set(hists)}")
    return ApHistograms(split_threshold=split, **hists)


@dataclass(frozen=True)
class ApConfig:
    """Adaptive-padding parameters.

    `rate_scale` divides every sampled timer, so doubling it roughly doubles
    injection pressure; `calibrate_padding_rate` searches it to hit
    `target_padding_rate`. `rate_basis` picks the padding-rate definition:
    "real" = dummies/real (overhead), "total" = dummies/(dummies+real).
    """

    histograms: ApHistograms
    target_padding_rate: float = 0.54
    rate_scale: float = 1.0
    seed: int = 0
    burst_inject_prob: float = 0.5
    rate_basis: str = "real"

    def __post_init__(self):
        if not 0.0 < self.target_padding_rate < 2.0:
            raise ValueError("target_padding_rate must be in (0, 2)")
        if self.rate_scale <= 0:
            raise ValueError("rate_scale must be positive")
        if not 0.0 <= self.burst_inject_prob <= 1.0:
            raise ValueError("burst_inject_prob must be in [0, 1]")
        if self.rate_basis not in ("real", "total"):
            raise ValueError("rate_basis must be 'real' or 'total'")


def _pad_direction(times: np.ndarray, burst: Histogram, gap: Histogram,
                   cfg: ApConfig, rng: np.random.Generator) -> list[float]:
    """Run the two-mode state machine over one direction's real packets.

    Starting in burst mode at the first packet, repeatedly sample an expected
    gap (burst histogram in burst mode, gap histogram in gap mode, both
    divided by rate_scale). If the next real packet arrives before the timer
    expires, forward it and reset to burst mode. On expiry, gap mode always
    injects a dummy and flips to burst mode; burst mode injects with reduced
    probability and otherwise concedes the flow has gone quiet and flips to
    gap mode. Padding never extends past the last real packet, and no real
    packet is ever delayed.
    """
    n = times.size
    dummies: list[float] = []
    if n == 0:
        return dummies
    max_dummies = _MAX_DUMMY_FACTOR * n + 16
    in_burst = True
    now = float(times[0])
    i = 1
    while len(dummies) < max_dummies:
        hist = burst if in_burst else gap
        delay = max(hist.sample(rng) / cfg.rate_scale, _MIN_DELAY)
        deadline = now + delay
        if i < n and times[i] <= deadline:
            now = float(times[i])
            i += 1
            in_burst = True
            continue
        if i >= n:
            break
        if in_burst:
            if rng.random() < cfg.burst_inject_prob:
                dummies.append(deadline)
                now = deadline
            else:
                now = deadline
                in_burst = False
        else:
            dummies.append(deadline)
            now = deadline
            in_burst = True
    return dummies


def adaptive_pad(trace: Trace, cfg: ApConfig, rng: np.random.Generator) -> Trace:
    """Pad one flow. Output is a superset of the input: every original packet
    keeps its timestamp with is_dummy false, injected packets carry
    is_dummy true. Each direction is padded independently with its own
    histograms."""
    if trace.n_packets == 0:
        raise ValueError("cannot pad an empty trace")
    times = [trace.times]
    dirs = [trace.dirs]
    dummy = [trace.dummy]
    for direction in (Direction.OUTGOING, Direction.INCOMING):
        real = trace.times[(trace.dirs == int(direction)) & ~trace.dummy]
        injected = _pad_direction(real, cfg.histograms.get(direction, "burst"),
                                  cfg.histograms.get(direction, "gap"), cfg, rng)
        if injected:
            times.append(np.array(injected))
            dirs.append(np.full(len(injected), int(direction), dtype=np.int8))
            dummy.append(np.ones(len(injected), dtype=bool))
    # Dummies always land strictly inside the flow span, so no re-shift occurs
    # and original timestamps are preserved exactly.
    return build_trace(trace.id, np.concatenate(times), np.concatenate(dirs),
                       np.concatenate(dummy), normalize=False)


def pad_flowset(flows: FlowSet, cfg: ApConfig) -> FlowSet:
    return FlowSet(tuple(
        adaptive_pad(t, cfg, rng_for(cfg.seed, "pad", t.id)) for t in flows
    ))


def padding_rate(padded: Trace, basis: str = "real") -> float:
    """dummies/real ("real") or dummies/total ("total") for one padded flow."""
    n_dummy = int(np.count_nonzero(padded.dummy))
    n_real = padded.n_packets - n_dummy
    if basis == "real":
        return n_dummy / n_real if n_real else float("inf")
    if basis == "total":
        return n_dummy / padded.n_packets if padded.n_packets else 0.0
    raise ValueError("basis must be 'real' or 'total'")


def mean_padding_rate(flows: FlowSet, cfg: ApConfig, scale: float,
                      seed_label: str = "pad") -> float:
    """Mean per-flow padding rate when padding `flows` at `scale`."""
    c = replace(cfg, rate_scale=scale)
    rates = [
        padding_rate(adaptive_pad(t, c, rng_for(cfg.seed, seed_label, t.id)), cfg.rate_basis)
        for t in flows
    ]
    return float(np.mean(rates))


def calibrate_padding_rate(corpus: FlowSet, cfg: ApConfig, tol: float = 0.01,
                           scale_bounds: tuple[float, float] = (1e-3, 1e3),
                           max_iter: int = 48) -> float:
    """Bisect `rate_scale` (log-scale) until the mean padding rate over the
    corpus is within `tol` of `cfg.target_padding_rate`.

    Per-flow rng streams are fixed, so the measured rate is a deterministic,
    monotonically increasing function of the scale. Raises CalibrationError
    (reporting the achieved rate) when the target lies outside what the
    bounds can reach.
    """
    if len(corpus) == 0:
        raise ValueError("calibration corpus is empty")
    target = cfg.target_padding_rate
    lo, hi = scale_bounds

    def measure(scale: float) -> float:
        return mean_padding_rate(corpus, cfg, scale, seed_label="calibrate")

    f_lo = measure(lo)
    if f_lo >= target:
        if abs(f_lo - target) <= tol:
            return lo
        raise CalibrationError(
            f"target {target} unreachable: rate {f_lo:.4f} at lower scale bound {lo}",
            achieved=f_lo,
        )
    f_hi = measure(hi)
    if f_hi <= target:
        if abs(f_hi - target) <= tol:
            return hi
        raise CalibrationError(
            f"target {target} unreachable: rate {f_hi:.4f} at upper scale bound {hi}",
            achieved=f_hi,
        )
    best_scale, best_rate = lo, f_lo
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        f_mid = measure(mid)
        if abs(f_mid - target) < abs(best_rate - target):
            best_scale, best_rate = mid, f_mid
        if abs(f_mid - target) <= tol:
            return mid
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"calibration did not converge: best rate {best_rate:.4f} at scale {best_scale:.5g}",
        achieved=best_rate,
    )

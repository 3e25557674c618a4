"""Flow matchers: Hamming threshold/ROC, nearest-neighbor classification, and
windowed count-agreement scoring of padded flows."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .flows import FlowId, FlowSet, Trace
from .hashing import FlowHash, hamming

_POPCOUNT8 = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


class MatchKind(str, Enum):
    PERFECT = "perfect"
    WEBSITE = "website"
    MISS = "miss"
    NO_PREDICTION = "no_prediction"


@dataclass(frozen=True)
class MatchOutcome:
    """Per-query result. `matched_ids` holds every candidate attaining the
    best score (ties retained); `score` is the deciding statistic (minimum
    Hamming distance, or summed window agreement for padded matching)."""

    kind: MatchKind
    matched_ids: tuple[FlowId, ...]
    score: float
    score_in: float | None = None
    score_out: float | None = None


@dataclass(frozen=True)
class RocPoint:
    tau: int
    tpr: float
    fpr: float


@dataclass(frozen=True)
class SccConfig:
    """Window length (seconds) for count-agreement scoring."""

    window_length_k: float = 0.05

    def __post_init__(self):
        if self.window_length_k <= 0:
            raise ValueError("window_length_k must be positive")


def threshold_match(query: FlowHash, candidate: FlowHash, tau: int) -> bool:
    """True iff the Hamming distance is strictly below `tau`."""
    if not 0 <= tau <= query.m:
        raise ValueError(f"tau must be in [0, {query.m}]")
    return hamming(query, candidate) < tau


def _pair_distances(pairs: Sequence[tuple[FlowHash, FlowHash]]) -> np.ndarray:
    a = np.stack([p[0].bits for p in pairs])
    b = np.stack([p[1].bits for p in pairs])
    if a.shape != b.shape:
        raise ValueError("hash length mismatch inside pairs")
    return (a != b).sum(axis=1)


def roc_curve(true_pairs: Sequence[tuple[FlowHash, FlowHash]],
              impostor_pairs: Sequence[tuple[FlowHash, FlowHash]]) -> list[RocPoint]:
    """TPR/FPR at every threshold tau in 0..m (strict `distance < tau`)."""
    if not true_pairs or not impostor_pairs:
        raise ValueError("need at least one true pair and one impostor pair")
    m = true_pairs[0][0].m
    d_true = np.sort(_pair_distances(true_pairs))
    d_imp = np.sort(_pair_distances(impostor_pairs))
    taus = np.arange(m + 1)
    tpr = np.searchsorted(d_true, taus, side="left") / d_true.size
    fpr = np.searchsorted(d_imp, taus, side="left") / d_imp.size
    return [RocPoint(int(t), float(tp), float(fp)) for t, tp, fp in zip(taus, tpr, fpr)]


def roc_auc(points: Sequence[RocPoint]) -> float:
    """Trapezoidal area under the ROC curve."""
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.trapz(tpr, fpr))


def _classify(query_id: FlowId, matched: Sequence[FlowId]) -> MatchKind:
    if query_id in matched:
        return MatchKind.PERFECT
    if any(fid.site == query_id.site for fid in matched):
        return MatchKind.WEBSITE
    return MatchKind.MISS


def nearest_match(query: FlowHash, library: Sequence[FlowHash]) -> MatchOutcome:
    """All minimum-distance candidates; perfect if the query's counterpart is
    among them, website if any of them shares the query's site."""
    if not library:
        raise ValueError("library is empty")
    bits = np.stack([h.bits for h in library])
    if bits.shape[1] != query.m:
        raise ValueError("hash length mismatch between query and library")
    d = (bits != query.bits).sum(axis=1)
    dmin = int(d.min())
    matched = tuple(library[i].id for i in np.flatnonzero(d == dmin))
    return MatchOutcome(_classify(query.id, matched), matched, float(dmin))


class HashLibrary:
    """Packed-bit hash collection for fast batched nearest-neighbor scans."""

    def __init__(self, hashes: Sequence[FlowHash]):
        if not hashes:
            raise ValueError("library is empty")
        self.hashes = list(hashes)
        self.m = hashes[0].m
        if any(h.m != self.m for h in hashes):
            raise ValueError("library hashes must share one length")
        bits = np.stack([h.bits for h in self.hashes])
        self.packed = np.packbits(bits, axis=1, bitorder="little")
        self.ids = [h.id for h in self.hashes]

    def distances(self, query: FlowHash) -> np.ndarray:
        if query.m != self.m:
            raise ValueError("hash length mismatch between query and library")
        q = np.packbits(query.bits, bitorder="little")
        return _POPCOUNT8[self.packed ^ q[None, :]].sum(axis=1, dtype=np.int64)

    def nearest(self, query: FlowHash) -> MatchOutcome:
        d = self.distances(query)
        dmin = int(d.min())
        matched = tuple(self.ids[i] for i in np.flatnonzero(d == dmin))
        return MatchOutcome(_classify(query.id, matched), matched, float(dmin))


def nearest_match_batch(queries: Sequence[FlowHash],
                        library: Sequence[FlowHash]) -> list[MatchOutcome]:
    """Batched `nearest_match`, identical outcomes."""
    lib = library if isinstance(library, HashLibrary) else HashLibrary(library)
    return [lib.nearest(q) for q in queries]


# ---------------------------------------------------------------------------
# Count-agreement scoring for padded flows.


def _window_counts(times: np.ndarray, k: float, n_windows: int) -> np.ndarray:
    if times.size == 0:
        return np.zeros(n_windows, dtype=np.int64)
    idx = np.floor(times / k).astype(np.int64)
    return np.bincount(idx, minlength=n_windows)[:n_windows]


def _check_direction_class(u: Trace, p: Trace) -> None:
    du = set(np.unique(u.dirs))
    dp = set(np.unique(p.dirs))
    if len(du) > 1 or len(dp) > 1:
        raise ValueError("count-agreement scoring expects single-direction traces")
    if du and dp and du != dp:
        raise ValueError("traces belong to different direction classes")


def scc_score(u: Trace, p: Trace, k: float) -> int:
    """Number of length-`k` windows in which the two traces hold an equal
    packet count.

    Windows cover [0, max(duration)] anchored at the shared flow clock.
    Empty-equals-empty windows count only inside the shorter flow's span;
    beyond both spans there are no windows at all.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    _check_direction_class(u, p)
    du, dp = u.duration, p.duration
    n = int(np.floor(max(du, dp) / k)) + 1
    cu = _window_counts(u.times, k, n)
    cp = _window_counts(p.times, k, n)
    eq = cu == cp
    j_min = int(np.floor(min(du, dp) / k))
    excluded = eq & (cu == 0) & (np.arange(n) > j_min)
    return int(eq.sum() - excluded.sum())


class SccMatcher:
    """Predicts which padded flow matches an unpadded query.

    Candidate padded flows are scored per direction by window count
    agreement; a prediction is made only when the two directions' best
    candidates intersect in exactly one flow, which keeps false matches near
    zero at the cost of occasional no-predictions.
    """

    def __init__(self, padded_in: FlowSet, padded_out: FlowSet, cfg: SccConfig):
        if len(padded_in) == 0 or len(padded_out) == 0:
            raise ValueError("empty candidate set")
        if len(padded_in) != len(padded_out):
            raise ValueError("padded_in and padded_out must be index-aligned")
        for a, b in zip(padded_in, padded_out):
            if a.id != b.id:
                raise ValueError("padded_in and padded_out must be index-aligned")
        self.cfg = cfg
        self.ids = [t.id for t in padded_in]
        self._tables = {}
        for name, flows in (("in", padded_in), ("out", padded_out)):
            k = cfg.window_length_k
            durations = np.array([t.duration for t in flows])
            width = int(np.floor(durations.max() / k)) + 1 if len(flows) else 1
            counts = np.stack([_window_counts(t.times, k, width) for t in flows])
            self._tables[name] = (counts.astype(np.int32), durations)

    def _scores(self, side: str, times: np.ndarray, duration: float) -> np.ndarray:
        k = self.cfg.window_length_k
        counts, durations = self._tables[side]
        width = counts.shape[1]
        cu = _window_counts(times, k, width)
        eq = counts == cu[None, :]
        j_min = np.floor(np.minimum(duration, durations) / k).astype(np.int64)
        cols = np.arange(width)[None, :]
        excluded = eq & (cu[None, :] == 0) & (counts == 0) & (cols > j_min[:, None])
        return eq.sum(axis=1) - excluded.sum(axis=1)

    def match(self, u_in: Trace, u_out: Trace, query_id: FlowId | None = None) -> MatchOutcome:
        query_id = query_id or u_in.id
        s_in = self._scores("in", u_in.times, u_in.duration)
        s_out = self._scores("out", u_out.times, u_out.duration)
        best_in = set(np.flatnonzero(s_in == s_in.max()))
        best_out = set(np.flatnonzero(s_out == s_out.max()))
        agreed = best_in & best_out
        if len(agreed) != 1:
            matched = tuple(sorted(self.ids[i] for i in agreed))
            return MatchOutcome(MatchKind.NO_PREDICTION, matched,
                                float(s_in.max() + s_out.max()),
                                float(s_in.max()), float(s_out.max()))
        idx = agreed.pop()
        matched = (self.ids[idx],)
        return MatchOutcome(_classify(query_id, matched), matched,
                            float(s_in[idx] + s_out[idx]),
                            float(s_in[idx]), float(s_out[idx]))


def adapted_scc(u_in: Trace, u_out: Trace, padded_in: FlowSet, padded_out: FlowSet,
                cfg: SccConfig) -> MatchOutcome:
    """Score an unpadded flow (split by direction) against index-aligned
    padded candidate sets and predict only on cross-direction agreement."""
    return SccMatcher(padded_in, padded_out, cfg).match(u_in, u_out)

"""Flow data model: packet traces, dataset ingestion, synthetic corpora, and
inter-packet delay-variation (IPDV) distributions."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

from .seeds import rng_for

logger = logging.getLogger(__name__)

# Summary statistics of the measured client/server delay-variation
# distribution used as the default parametric jitter model. Only the
# min/mean/max are measured; the spread is a free parameter.
DEFAULT_IPDV_MEAN = 0.021
DEFAULT_IPDV_STDDEV = 0.150
DEFAULT_IPDV_MIN = -1.418
DEFAULT_IPDV_MAX = 1.735

_FILENAME_RE = re.compile(r"^(\d+)-(\d+)$")
MANIFEST_NAME = "manifest.csv"


class TraceParseError(ValueError):
    """Malformed trace file content."""


class DatasetError(ValueError):
    """Dataset-level ingestion problem (layout, pairing, emptiness)."""


class Direction(IntEnum):
    OUTGOING = 1
    INCOMING = -1


@dataclass(frozen=True, order=True)
class FlowId:
    """Identity of one observed flow: which site, which visit of that site."""

    site: int
    instance: int

    def __str__(self) -> str:
        return f"{self.site}-{self.instance}"


@dataclass(frozen=True)
class PacketEvent:
    """One packet: when it was seen, which way it went, and whether it is
    padding rather than payload traffic."""

    timestamp: float
    direction: Direction
    is_dummy: bool = False


@dataclass(frozen=True, eq=False)
class Trace:
    """An ordered packet trace for one flow.

    Packets are stored as parallel arrays (`times`, `dirs`, `dummy`) for fast
    numeric work; `packets` materializes them as `PacketEvent` objects.
    Invariants checked on construction: arrays share one length, timestamps
    are sorted and non-negative, directions are +-1. Whether the first
    timestamp is zero is a property of the operation that built the trace
    (ingestion, synthesis, and impairments all normalize; direction-filtered
    views keep the shared flow clock).
    """

    id: FlowId
    times: np.ndarray
    dirs: np.ndarray
    dummy: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64, copy=True)
        dirs = np.array(self.dirs, dtype=np.int8, copy=True)
        dummy = np.array(self.dummy, dtype=bool, copy=True)
        if times.ndim != 1 or dirs.shape != times.shape or dummy.shape != times.shape:
            raise ValueError("times, dirs and dummy must be 1-d arrays of equal length")
        if times.size:
            if times[0] < 0:
                raise ValueError("timestamps must be non-negative")
            if np.any(np.diff(times) < 0):
                raise ValueError("packets must be sorted by timestamp")
        if not np.all(np.abs(dirs) == 1):
            raise ValueError("directions must be +1 (outgoing) or -1 (incoming)")
        for name, arr in (("times", times), ("dirs", dirs), ("dummy", dummy)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_events(cls, id: FlowId, events: Iterable[PacketEvent],
                    normalize: bool = True) -> "Trace":
        ev = list(events)
        times = np.array([e.timestamp for e in ev], dtype=np.float64)
        dirs = np.array([int(e.direction) for e in ev], dtype=np.int8)
        dummy = np.array([e.is_dummy for e in ev], dtype=bool)
        return build_trace(id, times, dirs, dummy, normalize=normalize)

    @property
    def n_packets(self) -> int:
        return int(self.times.size)

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0

    @property
    def packets(self) -> tuple[PacketEvent, ...]:
        return tuple(
            PacketEvent(float(t), Direction(int(d)), bool(u))
            for t, d, u in zip(self.times, self.dirs, self.dummy)
        )

    def filter_direction(self, direction: Direction) -> "Trace":
        """Packets of one direction only, keeping the shared flow clock
        (timestamps are not re-normalized)."""
        mask = self.dirs == int(direction)
        return Trace(self.id, self.times[mask], self.dirs[mask], self.dummy[mask])

    def without_dummies(self) -> "Trace":
        """Drop padding packets, keeping the flow clock."""
        mask = ~self.dummy
        return Trace(self.id, self.times[mask], self.dirs[mask], self.dummy[mask])


def build_trace(id: FlowId, times: np.ndarray, dirs: np.ndarray,
                dummy: np.ndarray | None = None, normalize: bool = True) -> Trace:
    """Sort packets by timestamp (stable) and optionally shift so the first
    packet sits at t=0."""
    times = np.asarray(times, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.int8)
    if dummy is None:
        dummy = np.zeros(times.shape, dtype=bool)
    else:
        dummy = np.asarray(dummy, dtype=bool)
    order = np.argsort(times, kind="stable")
    times = times[order]
    dirs = dirs[order]
    dummy = dummy[order]
    if normalize and times.size:
        times = times - times[0]
    return Trace(id, times, dirs, dummy)


@dataclass(frozen=True, eq=False)
class FlowSet:
    """An ordered collection of traces; `l` is the flow count."""

    traces: tuple[Trace, ...]

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        ids = [t.id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate FlowId in FlowSet")

    @property
    def l(self) -> int:
        return len(self.traces)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    def __getitem__(self, i) -> Trace:
        return self.traces[i]

    def ids(self) -> tuple[FlowId, ...]:
        return tuple(t.id for t in self.traces)

    def sites(self) -> tuple[int, ...]:
        return tuple(sorted({t.id.site for t in self.traces}))


# ---------------------------------------------------------------------------
# Trace file format: one packet per line, "<seconds>\t<+1|-1>".


def parse_trace_file(content: str, id: FlowId) -> Trace:
    """Parse a text trace into a normalized `Trace`.

    Each non-empty line must be `<float timestamp><TAB><+1|-1>`. Packets are
    sorted and shifted so the first timestamp is zero; everything parsed here
    is real traffic (`is_dummy` false).
    """
    times: list[float] = []
    dirs: list[int] = []
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TraceParseError(
                f"line {lineno}: expected '<timestamp>\\t<direction>', got {raw!r}"
            )
        try:
            ts = float(parts[0])
        except ValueError:
            raise TraceParseError(f"line {lineno}: bad timestamp {parts[0]!r}") from None
        try:
            d = int(parts[1])
        except ValueError:
            raise TraceParseError(f"line {lineno}: bad direction {parts[1]!r}") from None
        if d not in (1, -1):
            raise TraceParseError(f"line {lineno}: direction not in {{+1,-1}}: {d}")
        times.append(ts)
        dirs.append(d)
    if not times:
        raise TraceParseError("empty trace file")
    return build_trace(id, np.array(times), np.array(dirs))


def serialize_trace(trace: Trace) -> str:
    """Render a trace in the trace-file format (6-decimal timestamps).

    Dummy flags are not part of the wire format: a written padded trace looks
    exactly like a real one, which is what an observer would record.
    """
    lines = ["%f\t%+d" % (t, d) for t, d in zip(trace.times, trace.dirs)]
    return "\n".join(lines) + "\n"


def scan_dataset_dir(root: Path) -> tuple[list[tuple[FlowId, Path]], int]:
    """Find `<site>-<instance>` files under `root` (or entries of an optional
    `manifest.csv` mapping `filename,site,instance`). Returns (entries sorted
    by id, count of skipped non-conforming names)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    entries: list[tuple[FlowId, Path]] = []
    skipped = 0
    manifest = root / MANIFEST_NAME
    if manifest.is_file():
        for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DatasetError(f"{manifest}: line {lineno}: expected 'filename,site,instance'")
            try:
                fid = FlowId(int(parts[1]), int(parts[2]))
            except ValueError:
                raise DatasetError(f"{manifest}: line {lineno}: bad site/instance") from None
            entries.append((fid, root / parts[0]))
    else:
        for path in sorted(root.iterdir()):
            if not path.is_file():
                continue
            m = _FILENAME_RE.match(path.name)
            if m is None:
                logger.warning("skipping non-conforming filename: %s", path.name)
                skipped += 1
                continue
            entries.append((FlowId(int(m.group(1)), int(m.group(2))), path))
    seen: set[FlowId] = set()
    for fid, _ in entries:
        if fid in seen:
            raise DatasetError(f"duplicate FlowId {fid} in dataset")
        seen.add(fid)
    entries.sort(key=lambda e: e[0])
    return entries, skipped


def load_dataset(root: Path | str) -> FlowSet:
    """Load every trace under a dataset directory, ordered by (site, instance)."""
    entries, skipped = scan_dataset_dir(Path(root))
    if skipped:
        logger.warning("skipped %d non-conforming filenames under %s", skipped, root)
    if not entries:
        raise DatasetError(f"no traces found under {root}")
    traces = []
    for fid, path in entries:
        try:
            content = path.read_text()
        except OSError as exc:
            raise DatasetError(f"unreadable trace file {path}: {exc}") from exc
        try:
            traces.append(parse_trace_file(content, fid))
        except TraceParseError as exc:
            raise TraceParseError(f"{path}: {exc}") from exc
    return FlowSet(tuple(traces))


def save_dataset(flows: FlowSet, root: Path | str) -> None:
    """Write one `<site>-<instance>` trace file per flow."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t in flows:
        (root / str(t.id)).write_text(serialize_trace(t))


# ---------------------------------------------------------------------------
# IPDV distributions.


@dataclass(frozen=True, eq=False)
class EmpiricalIpdv:
    """Per-packet delay-variation sampler backed by measured samples."""

    samples: np.ndarray

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True).ravel()
        if samples.size == 0:
            raise ValueError("empirical IPDV needs at least one sample")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def summary(self) -> tuple[float, float, float]:
        return (float(self.samples.min()), float(self.samples.mean()), float(self.samples.max()))

    def sample(self, rng: np.random.Generator, size=None):
        idx = rng.integers(0, self.samples.size, size=size)
        return self.samples[idx]


@dataclass(frozen=True)
class NormalIpdv:
    """Clipped-Gaussian delay-variation sampler."""

    mean: float = DEFAULT_IPDV_MEAN
    stddev: float = DEFAULT_IPDV_STDDEV
    min_clip: float = DEFAULT_IPDV_MIN
    max_clip: float = DEFAULT_IPDV_MAX

    def __post_init__(self):
        if not (self.min_clip <= self.mean <= self.max_clip):
            raise ValueError("need min_clip <= mean <= max_clip")
        if self.stddev < 0:
            raise ValueError("stddev must be non-negative")

    @property
    def summary(self) -> tuple[float, float, float]:
        return (self.min_clip, self.mean, self.max_clip)

    def sample(self, rng: np.random.Generator, size=None):
        return np.clip(rng.normal(self.mean, self.stddev, size=size),
                       self.min_clip, self.max_clip)


IpdvDistribution = Union[EmpiricalIpdv, NormalIpdv]


def default_ipdv() -> NormalIpdv:
    return NormalIpdv()


def load_ipdv_file(path: Path | str) -> EmpiricalIpdv:
    """Read an empirical IPDV sample file: one float (seconds) per line."""
    values = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise DatasetError(f"{path}: line {lineno}: bad sample {line!r}") from None
    if not values:
        raise DatasetError(f"{path}: no IPDV samples")
    return EmpiricalIpdv(np.array(values))


def build_ipdv_distribution(client_traces: FlowSet, server_traces: FlowSet) -> EmpiricalIpdv:
    """Empirical IPDV from paired observations of the same flows.

    For each flow observed at both vantage points, the samples are the
    per-packet differences of consecutive inter-arrival deltas between the
    two observations; a constant path delay cancels out.
    """
    server_by_id = {t.id: t for t in server_traces}
    chunks = []
    for c in client_traces:
        s = server_by_id.pop(c.id, None)
        if s is None:
            raise DatasetError(f"unpaired flow {c.id}: missing from server capture")
        if s.n_packets != c.n_packets:
            raise DatasetError(
                f"packet-count mismatch for {c.id}: client {c.n_packets}, server {s.n_packets}"
            )
        if c.n_packets >= 2:
            chunks.append(np.diff(s.times) - np.diff(c.times))
    if server_by_id:
        leftover = next(iter(server_by_id))
        raise DatasetError(f"unpaired flow {leftover}: missing from client capture")
    if not chunks:
        raise DatasetError("paired captures contain no flows with >= 2 packets")
    return EmpiricalIpdv(np.concatenate(chunks))


# ---------------------------------------------------------------------------
# Synthetic corpus generation.


@dataclass(frozen=True)
class BurstModelParams:
    """Knobs for the bursty synthetic-flow generator.

    Each site gets a latent template (burst count, per-burst sizes, gaps);
    instances of the site are mildly jittered variants of that template, so
    flows of one site stay more alike than flows of different sites.
    """

    n_bursts: tuple[int, int] = (8, 16)
    outgoing_per_burst: tuple[int, int] = (1, 3)
    burst_size: tuple[int, int] = (15, 50)
    gap_seconds: tuple[float, float] = (0.3, 1.5)
    intra_gap_seconds: tuple[float, float] = (0.002, 0.015)
    time_jitter: float = 0.08
    size_jitter: float = 0.12


def _site_template(params: BurstModelParams, rng: np.random.Generator) -> list[dict]:
    bursts = []
    n_bursts = int(rng.integers(params.n_bursts[0], params.n_bursts[1] + 1))
    for _ in range(n_bursts):
        bursts.append({
            "n_out": int(rng.integers(params.outgoing_per_burst[0],
                                      params.outgoing_per_burst[1] + 1)),
            "n_in": int(rng.integers(params.burst_size[0], params.burst_size[1] + 1)),
            "spacing": float(rng.uniform(*params.intra_gap_seconds)),
            "gap": float(rng.uniform(*params.gap_seconds)),
        })
    return bursts


def _instance_trace(id: FlowId, template: list[dict], params: BurstModelParams,
                    rng: np.random.Generator) -> Trace:
    times: list[float] = []
    dirs: list[int] = []
    t = 0.0
    for burst in template:
        n_out = max(1, round(burst["n_out"] * (1.0 + rng.normal(0.0, params.size_jitter))))
        n_in = max(1, round(burst["n_in"] * (1.0 + rng.normal(0.0, params.size_jitter))))
        spacing = burst["spacing"] * max(0.1, 1.0 + rng.normal(0.0, params.time_jitter))
        for _ in range(n_out):
            times.append(t)
            dirs.append(int(Direction.OUTGOING))
            t += spacing * max(0.1, 1.0 + rng.normal(0.0, params.time_jitter))
        for _ in range(n_in):
            times.append(t)
            dirs.append(int(Direction.INCOMING))
            t += spacing * max(0.1, 1.0 + rng.normal(0.0, params.time_jitter))
        t += burst["gap"] * max(0.1, 1.0 + rng.normal(0.0, params.time_jitter))
    return build_trace(id, np.array(times), np.array(dirs))


def generate_synthetic_corpus(n_sites: int, n_instances: int,
                              params: BurstModelParams | None = None,
                              seed: int = 0) -> FlowSet:
    """Deterministic bursty stand-in corpus: `n_sites * n_instances` flows.

    Pure function of its arguments; the same (sites, instances, params, seed)
    always yields bit-identical traces.
    """
    if n_sites < 1 or n_instances < 1:
        raise ValueError("n_sites and n_instances must be >= 1")
    params = params or BurstModelParams()
    traces = []
    for site in range(n_sites):
        template = _site_template(params, rng_for(seed, "synth-site", site))
        for inst in range(n_instances):
            traces.append(_instance_trace(
                FlowId(site, inst), template, params,
                rng_for(seed, "synth-instance", site, inst),
            ))
    return FlowSet(tuple(traces))

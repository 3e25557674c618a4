"""Experiment orchestration: impairment grids, ROC tables, nearest-neighbor
sweeps, padded-flow matching cells, and result persistence.

Every run is fully reproducible from its config: per-cell seeds derive from
the master seed and the cell descriptor, so adding grid cells never perturbs
existing cells' randomness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import impair
from .flows import (BurstModelParams, DEFAULT_IPDV_MAX, DEFAULT_IPDV_MIN,
                    FlowSet, NormalIpdv, Trace, Direction, generate_synthetic_corpus,
                    load_dataset, load_ipdv_file)
from .hashing import BasisSet, FlowDiscarded, FlowHash, HashConfig, compute_hash
from .impair import (ApConfig, ImpairmentConfig, adaptive_pad, build_histograms,
                     calibrate_padding_rate, padding_rate)
from .matching import (HashLibrary, MatchKind, MatchOutcome, RocPoint, SccConfig,
                       SccMatcher, roc_auc, roc_curve)
from .seeds import derive_seed, rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    n_sites: int = 10
    n_instances: int = 10
    params: BurstModelParams = field(default_factory=BurstModelParams)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to regenerate a full experiment byte-for-byte."""

    out_dir: str = "results"
    dataset_dir: str | None = None
    synthetic: SyntheticSpec | None = None
    # hashing
    n_windows: int = 256
    hash_bits: int = 256
    basis_seed: int = 0
    # unpadded impairment grid
    drop_rates: tuple[float, ...] = (0.01, 0.05, 0.10, 0.30)
    ipdv_file: str | None = None
    ipdv_mean: float = 0.021
    ipdv_stddev: float = 0.150
    ipdv_min: float = DEFAULT_IPDV_MIN
    ipdv_max: float = DEFAULT_IPDV_MAX
    impostors_per_query: int = 1
    subset_sites: tuple[int, ...] = (10, 25, 50, 100)
    # adaptive padding + count-agreement grid
    ap_target_rate: float = 0.54
    ap_rate_scale: float | None = None  # None: calibrate
    ap_split_threshold: float = 0.1
    ap_burst_inject_prob: float = 0.5
    ap_rate_basis: str = "real"
    ap_calibration_flows: int = 100
    scc_k_grid: tuple[float, ...] = (0.05, 0.1, 0.2)
    scc_ipdv_means: tuple[float, ...] = (0.021, 0.1, 0.2)
    scc_ipdv_sd_ratio: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        if (self.dataset_dir is None) == (self.synthetic is None):
            raise ValueError("configure exactly one of dataset_dir or synthetic")
        for name in ("drop_rates", "subset_sites", "scc_k_grid", "scc_ipdv_means"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def hash_config(self) -> HashConfig:
        return HashConfig(self.n_windows, self.hash_bits, self.basis_seed)

    def ipdv_distribution(self):
        if self.ipdv_file:
            return load_ipdv_file(self.ipdv_file)
        return NormalIpdv(self.ipdv_mean, self.ipdv_stddev, self.ipdv_min, self.ipdv_max)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("synthetic") is not None:
            syn = dict(d["synthetic"])
            if syn.get("params") is not None:
                params = {k: tuple(v) if isinstance(v, list) else v
                          for k, v in syn["params"].items()}
                syn["params"] = BurstModelParams(**params)
            d["synthetic"] = SyntheticSpec(**syn)
        for name in ("drop_rates", "subset_sites", "scc_k_grid", "scc_ipdv_means"):
            if name in d and d[name] is not None:
                d[name] = tuple(d[name])
        return cls(**d)

    @classmethod
    def from_file(cls, path: Path | str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class CellResult:
    """One grid cell's outputs (whatever subset of fields applies)."""

    name: str
    roc: list[RocPoint] | None = None
    auc: float | None = None
    mean_true_distance: float | None = None
    nn_rates: dict | None = None           # subset label -> rates dict
    outcomes: list[tuple] | None = None    # (query_id, MatchOutcome) rows
    rates: dict | None = None              # scc cells: aggregate rates
    discarded: int = 0
    error: str | None = None
    seconds: float = 0.0


@dataclass
class ExperimentReport:
    kind: str
    config: ExperimentConfig
    cells: list[CellResult] = field(default_factory=list)
    n_flows: int = 0
    discarded_originals: int = 0
    ap_rate_scale: float | None = None
    ap_measured_rate: float | None = None

    @property
    def failed_cells(self) -> list[str]:
        return [c.name for c in self.cells if c.error]

    def summary_dict(self) -> dict:
        cells = {}
        for c in self.cells:
            entry: dict = {"discarded": c.discarded}
            if c.error:
                entry["error"] = c.error
            if c.auc is not None:
                entry["auc"] = round(c.auc, 6)
            if c.mean_true_distance is not None:
                entry["mean_true_distance"] = round(c.mean_true_distance, 4)
            if c.nn_rates is not None:
                entry["nearest_neighbor"] = c.nn_rates
            if c.rates is not None:
                entry["rates"] = c.rates
            cells[c.name] = entry
        out = {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "n_flows": self.n_flows,
            "discarded_originals": self.discarded_originals,
            "cells": cells,
            "timings": {c.name: round(c.seconds, 3) for c in self.cells},
        }
        if self.ap_rate_scale is not None:
            out["ap_rate_scale"] = self.ap_rate_scale
            out["ap_measured_rate"] = round(self.ap_measured_rate, 4)
        return out

    def save(self, out_dir: Path | str) -> None:
        """Write roc_/match_/scc_ CSVs plus summary.json under `out_dir`."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = f"# config_hash={self.config.config_hash()}"
        for c in self.cells:
            if c.error:
                continue
            if c.roc is not None:
                lines = [header, "tau,tpr,fpr"]
                lines += [f"{p.tau},{p.tpr:.6f},{p.fpr:.6f}" for p in c.roc]
                (out / f"roc_{c.name}.csv").write_text("\n".join(lines) + "\n")
            if c.outcomes is not None:
                prefix = "scc" if c.rates is not None else "match"
                lines = [header, "query_site,query_instance,outcome,matched_ids,score"]
                for qid, o in c.outcomes:
                    ids = ";".join(str(i) for i in o.matched_ids)
                    lines.append(f"{qid.site},{qid.instance},{o.kind.value},{ids},{o.score:g}")
                (out / f"{prefix}_{c.name}.csv").write_text("\n".join(lines) + "\n")
        (out / "summary.json").write_text(
            json.dumps(self.summary_dict(), indent=2, sort_keys=True) + "\n"
        )


def load_corpus(cfg: ExperimentConfig) -> FlowSet:
    if cfg.dataset_dir is not None:
        return load_dataset(cfg.dataset_dir)
    syn = cfg.synthetic
    return generate_synthetic_corpus(syn.n_sites, syn.n_instances, syn.params,
                                     seed=derive_seed(cfg.master_seed, "synthetic"))


def _hash_corpus(flows: FlowSet, hcfg: HashConfig, basis: BasisSet) -> tuple[dict, int]:
    hashes = {}
    discarded = 0
    for t in flows:
        try:
            hashes[t.id] = compute_hash(t, hcfg, basis)
        except (FlowDiscarded, ValueError):
            discarded += 1
    return hashes, discarded


def _outcome_rates(outcomes: list[MatchOutcome]) -> dict:
    n = len(outcomes)
    count = {k: sum(1 for o in outcomes if o.kind == k) for k in MatchKind}
    rates = {
        "perfect": count[MatchKind.PERFECT] / n,
        "website": (count[MatchKind.PERFECT] + count[MatchKind.WEBSITE]) / n,
        "miss": count[MatchKind.MISS] / n,
        "no_prediction": count[MatchKind.NO_PREDICTION] / n,
        "n_queries": n,
    }
    predictions = n - count[MatchKind.NO_PREDICTION]
    rates["false_match"] = (
        (count[MatchKind.WEBSITE] + count[MatchKind.MISS]) / predictions
        if predictions else 0.0
    )
    return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in rates.items()}


def run_unpadded_experiment(cfg: ExperimentConfig, with_nn: bool = True) -> ExperimentReport:
    """Per drop rate: impair (drop then jitter), hash both sides, emit the
    threshold ROC and (unless `with_nn` is off) nearest-neighbor match rates
    over library-size subsets."""
    corpus = load_corpus(cfg)
    hcfg = cfg.hash_config()
    basis = BasisSet.from_seed(cfg.basis_seed, cfg.hash_bits)
    ipdv = cfg.ipdv_distribution()
    report = ExperimentReport("unpadded", cfg, n_flows=len(corpus))
    orig_hashes, report.discarded_originals = _hash_corpus(corpus, hcfg, basis)
    sites = corpus.sites()
    for p in cfg.drop_rates:
        name = f"drop{int(round(p * 100)):02d}"
        started = time.perf_counter()
        cell = CellResult(name=name)
        try:
            cell_seed = derive_seed(cfg.master_seed, "unpadded", name)
            icfg = ImpairmentConfig(p, ipdv, seed=cell_seed)
            impaired = impair.impair_flowset(corpus, icfg)
            imp_hashes, cell.discarded = _hash_corpus(impaired, hcfg, basis)
            paired = [fid for fid in orig_hashes if fid in imp_hashes]
            if not paired:
                raise RuntimeError("no flow survived hashing on both sides")
            true_pairs = [(orig_hashes[f], imp_hashes[f]) for f in paired]
            rng = rng_for(cell_seed, "impostors")
            impostor_pairs = []
            for fid in paired:
                for _ in range(cfg.impostors_per_query):
                    while True:
                        other = paired[int(rng.integers(len(paired)))]
                        if other != fid or len(paired) == 1:
                            break
                    impostor_pairs.append((orig_hashes[fid], imp_hashes[other]))
            cell.roc = roc_curve(true_pairs, impostor_pairs)
            cell.auc = roc_auc(cell.roc)
            cell.mean_true_distance = float(np.mean([
                np.count_nonzero(a.bits != b.bits) for a, b in true_pairs
            ]))
            if with_nn:
                cell.nn_rates = {}
                for n_sites in cfg.subset_sites:
                    chosen = set(sites[:n_sites])
                    subset = [f for f in paired if f.site in chosen]
                    if not subset:
                        continue
                    lib = HashLibrary([imp_hashes[f] for f in subset])
                    outcomes = [lib.nearest(orig_hashes[f]) for f in subset]
                    cell.nn_rates[f"sites{n_sites}"] = _outcome_rates(outcomes)
                    if n_sites == max(cfg.subset_sites):
                        cell.outcomes = list(zip(subset, outcomes))
        except Exception as exc:  # cell isolation: record, move on
            logger.exception("cell %s failed", name)
            cell.error = f"{type(exc).__name__}: {exc}"
        cell.seconds = time.perf_counter() - started
        report.cells.append(cell)
    return report


def _split_directions(flows: FlowSet) -> tuple[FlowSet, FlowSet]:
    inc = FlowSet(tuple(t.filter_direction(Direction.INCOMING) for t in flows))
    out = FlowSet(tuple(t.filter_direction(Direction.OUTGOING) for t in flows))
    return inc, out


def run_padded_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Pad every flow, then for each (window length, jitter mean) cell match
    jittered unpadded flows against the padded library."""
    corpus = load_corpus(cfg)
    report = ExperimentReport("padded", cfg, n_flows=len(corpus))
    hists = build_histograms(corpus, split_threshold=cfg.ap_split_threshold)
    apcfg = ApConfig(
        histograms=hists,
        target_padding_rate=cfg.ap_target_rate,
        seed=derive_seed(cfg.master_seed, "ap"),
        burst_inject_prob=cfg.ap_burst_inject_prob,
        rate_basis=cfg.ap_rate_basis,
    )
    if cfg.ap_rate_scale is not None:
        scale = cfg.ap_rate_scale
    else:
        calib = FlowSet(corpus.traces[:cfg.ap_calibration_flows])
        scale = calibrate_padding_rate(calib, apcfg)
    apcfg = replace(apcfg, rate_scale=scale)
    padded = impair.pad_flowset(corpus, apcfg)
    report.ap_rate_scale = scale
    report.ap_measured_rate = float(np.mean([
        padding_rate(t, cfg.ap_rate_basis) for t in padded
    ]))
    padded_in, padded_out = _split_directions(padded)
    for k in cfg.scc_k_grid:
        matcher = None
        for mu in cfg.scc_ipdv_means:
            name = f"k{int(round(k * 1000))}ms_ipdv{int(round(mu * 1000))}ms"
            started = time.perf_counter()
            cell = CellResult(name=name)
            try:
                if matcher is None:
                    matcher = SccMatcher(padded_in, padded_out, SccConfig(k))
                sd = cfg.scc_ipdv_sd_ratio * mu
                dist = NormalIpdv(mu, sd, mu - 6 * sd, mu + 6 * sd)
                cell_seed = derive_seed(cfg.master_seed, "padded", name)
                outcomes = []
                for t in corpus:
                    q = impair.apply_jitter(t, dist, rng_for(cell_seed, "jitter", t.id))
                    o = matcher.match(q.filter_direction(Direction.INCOMING),
                                      q.filter_direction(Direction.OUTGOING), t.id)
                    outcomes.append((t.id, o))
                cell.outcomes = outcomes
                cell.rates = _outcome_rates([o for _, o in outcomes])
            except Exception as exc:
                logger.exception("cell %s failed", name)
                cell.error = f"{type(exc).__name__}: {exc}"
            cell.seconds = time.perf_counter() - started
            report.cells.append(cell)
    return report

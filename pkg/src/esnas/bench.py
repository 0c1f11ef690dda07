"""Rank-correlation study between training-free metrics and benchmark accuracy.

Benchmark tables are user-supplied CSV files; no benchmark data ships with
the package.  Two row layouts are accepted:

    arch_json,accuracy            genome JSON per row, scored on ingestion
    id,score_<metric>,accuracy    precomputed metric columns
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import archspace, metrics


class CorrelationError(ValueError):
    """Degenerate or mismatched inputs to a correlation coefficient."""


@dataclass
class BenchmarkEntry:
    arch: object = None  # ArchGenome or opaque descriptor
    accuracy: float = 0.0
    precomputed_scores: dict = field(default_factory=dict)


@dataclass
class CorrelationReport:
    metric_name: str
    kendall_tau: float
    spearman_rho: float
    n: int
    ties_policy: str = "tau-b / average-rank"
    skipped_rows: int = 0

    def to_dict(self):
        return {
            "metric_name": self.metric_name,
            "kendall_tau": self.kendall_tau,
            "spearman_rho": self.spearman_rho,
            "n": self.n,
            "ties_policy": self.ties_policy,
            "skipped_rows": self.skipped_rows,
        }


def _check_vectors(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise CorrelationError(
            f"length mismatch: {xs.shape} vs {ys.shape}")
    if xs.size < 2:
        raise CorrelationError("need at least 2 observations")
    return xs, ys


def kendall_tau(xs, ys):
    """Tie-corrected tau-b via exact pair counting."""
    xs, ys = _check_vectors(xs, ys)
    n = xs.size
    iu = np.triu_indices(n, k=1)
    sx = np.sign(xs[:, None] - xs[None, :])[iu]
    sy = np.sign(ys[:, None] - ys[None, :])[iu]
    concord_minus_discord = float(np.sum(sx * sy))
    n0 = n * (n - 1) // 2
    n1 = int(np.sum(sx == 0))
    n2 = int(np.sum(sy == 0))
    denom = math.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        raise CorrelationError("kendall tau undefined: a vector is constant")
    return concord_minus_discord / denom


def spearman_rho(xs, ys):
    """Pearson correlation of average-ranked data (ties share the mean rank)."""
    xs, ys = _check_vectors(xs, ys)
    rx = rankdata(xs, method="average")
    ry = rankdata(ys, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0:
        raise CorrelationError("spearman rho undefined: a vector is constant")
    return float(np.sum(dx * dy)) / denom


def correlate_benchmark(table, metric_name, config=None, entropic_cfg=None,
                        base_seed=0):
    """Correlate one metric against accuracy over the benchmark entries.

    Entries with a precomputed score for the metric are used directly;
    otherwise the architecture is instantiated and scored.  Rows that can do
    neither are skipped and counted.
    """
    if not table:
        raise CorrelationError("benchmark table is empty")
    scores, accs = [], []
    skipped = 0
    for entry in table:
        if metric_name in entry.precomputed_scores:
            scores.append(float(entry.precomputed_scores[metric_name]))
            accs.append(entry.accuracy)
            continue
        try:
            genome = entry.arch
            if not isinstance(genome, archspace.ArchGenome):
                genome = archspace.ArchGenome.from_json(genome)
            report = metrics.score_genome(genome, config,
                                          entropic_cfg, base_seed=base_seed)
            scores.append(getattr(report, metric_name))
            accs.append(entry.accuracy)
        except Exception:
            skipped += 1
    if len(scores) < 2:
        raise CorrelationError(
            f"fewer than 2 usable rows ({skipped} skipped)")
    return CorrelationReport(
        metric_name=metric_name,
        kendall_tau=kendall_tau(scores, accs),
        spearman_rho=spearman_rho(scores, accs),
        n=len(scores),
        skipped_rows=skipped,
    ), list(zip(scores, accs))


def load_benchmark_csv(path):
    """Parse a benchmark CSV into BenchmarkEntry rows."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CorrelationError(f"{path}: empty benchmark file")
        cols = reader.fieldnames
        if "accuracy" not in cols:
            raise CorrelationError(f"{path}: missing 'accuracy' column")
        score_cols = [c for c in cols if c.startswith("score_")]
        for i, row in enumerate(reader):
            acc = float(row["accuracy"])
            if not 0.0 <= acc <= 100.0:
                raise CorrelationError(
                    f"{path} row {i + 1}: accuracy {acc} outside [0, 100]")
            pre = {c[len("score_"):]: float(row[c])
                   for c in score_cols if row.get(c) not in (None, "")}
            entries.append(BenchmarkEntry(
                arch=row.get("arch_json"), accuracy=acc,
                precomputed_scores=pre))
    return entries


def sample_entries(entries, n, seed):
    """Uniform sample without replacement for partial-benchmark studies."""
    if n >= len(entries):
        return list(entries)
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(entries), size=n, replace=False))
    return [entries[i] for i in idx]

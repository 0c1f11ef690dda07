"""Training-free proxies: activation-entropy expressivity and log-damped gradient flow."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import netgraph
from .archspace import genome_hash


@dataclass
class EntropicConfig:
    epsilon: float = 1e-8
    repeats: int = 3
    input_low: float = -0.5
    input_high: float = 0.5
    norm_axis: str = "across_channels"  # or "per_channel"

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.input_low >= self.input_high:
            raise ValueError("input_low must be < input_high")
        if self.norm_axis not in ("across_channels", "per_channel"):
            raise ValueError(f"unknown norm_axis {self.norm_axis!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


@dataclass
class ScoreReport:
    entropic: float
    entropic_per_repeat: list[float]
    logsynflow: float
    params: int
    macs: int
    seeds: list[int]
    eval_millis: int

    def to_dict(self):
        return {
            "entropic": self.entropic,
            "entropic_per_repeat": list(self.entropic_per_repeat),
            "logsynflow": self.logsynflow,
            "params": self.params,
            "macs": self.macs,
            "seeds": list(self.seeds),
            "eval_millis": self.eval_millis,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(entropic=d["entropic"],
                   entropic_per_repeat=list(d["entropic_per_repeat"]),
                   logsynflow=d["logsynflow"], params=d["params"],
                   macs=d["macs"], seeds=list(d["seeds"]),
                   eval_millis=d["eval_millis"])


def normalize_activations(tap, cfg):
    """Divide a non-negative tap by its reduction-group maximum (axis 0 = channels).

    Groups whose maximum is zero stay zero; the result lies in [0, 1].
    """
    tap = np.asarray(tap, dtype=float)
    if cfg.norm_axis == "across_channels":
        m = tap.max(axis=0, keepdims=True)
    else:
        m = tap.max(axis=tuple(range(1, tap.ndim)), keepdims=True) \
            if tap.ndim > 1 else tap.copy()
    return np.divide(tap, m, out=np.zeros_like(tap), where=m > 0)


def layer_entropy(normalized, epsilon):
    """Mean of -a*ln(a+eps) over all elements, clamped to be non-negative."""
    a = np.asarray(normalized, dtype=float)
    if epsilon > 0:
        val = float(np.mean(-a * np.log(a + epsilon)))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(a > 0, -a * np.log(np.where(a > 0, a, 1.0)), 0.0)
        val = float(np.mean(terms))
    return max(val, 0.0)


def entropic_score(graph, cfg, seeds, return_per_repeat=False):
    """Average over repeats of the summed per-tap entropy of a scoring pass.

    Each repeat re-initialises the weights and redraws the input from its own
    seed; preparation (normalisation suppression, ReLU substitution, absolute
    weights) is applied after re-initialisation.
    """
    cfg.validate()
    if len(seeds) != cfg.repeats:
        raise ValueError(f"expected {cfg.repeats} seeds, got {len(seeds)}")
    per_repeat = []
    for seed in seeds:
        wseed, xseed = np.random.SeedSequence(seed).spawn(2)
        g = netgraph.prepare_for_scoring(netgraph.reinit(graph, wseed))
        x = np.random.default_rng(xseed).uniform(
            cfg.input_low, cfg.input_high, graph.input_shape)
        _, taps = netgraph.forward(g, x)
        per_repeat.append(
            float(sum(layer_entropy(normalize_activations(t, cfg), cfg.epsilon)
                      for t in taps)))
    score = float(np.mean(per_repeat))
    if return_per_repeat:
        return score, per_repeat
    return score


def logsynflow(graph):
    """Sum over parameters of |theta| * ln(1 + |dR/dtheta|) on the prepared graph.

    R is the sum of the output elements under an all-ones input.
    """
    g = netgraph.prepare_for_scoring(graph)
    out, _ = netgraph.forward(g, np.ones(g.input_shape))
    r = float(out.sum())
    if not np.isfinite(r):
        raise FloatingPointError("non-finite scoring output sum")
    grads = netgraph.backward_param_grads(g)
    score = 0.0
    for (nid, _, theta), grad in zip(g.iter_params(), grads):
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient at node {nid}")
        score += float(np.sum(np.abs(theta) * np.log1p(np.abs(grad))))
    return score


def derive_seeds(genome, base_seed, n):
    """Per-candidate scoring seeds: a pure function of (genome, base_seed)."""
    mixed = hashlib.sha256(
        f"{genome_hash(genome)}:{base_seed}".encode()).digest()
    root = np.random.SeedSequence(int.from_bytes(mixed[:16], "big"))
    return [int(s.generate_state(1)[0]) for s in root.spawn(n)]


def score_genome(genome, config, cfg=None, base_seed=0):
    """Full proxy report for one candidate; deterministic in (genome, base_seed)."""
    cfg = (cfg or EntropicConfig()).validate()
    t0 = time.perf_counter()
    seeds = derive_seeds(genome, base_seed, cfg.repeats + 1)
    ent_seeds, graph_seed = seeds[:-1], seeds[-1]
    graph = netgraph.build_graph(genome, config, seed=graph_seed)
    entropic, per_repeat = entropic_score(graph, cfg, ent_seeds,
                                          return_per_repeat=True)
    lsf = logsynflow(graph)
    report = ScoreReport(
        entropic=entropic,
        entropic_per_repeat=per_repeat,
        logsynflow=lsf,
        params=netgraph.count_graph_params(graph),
        macs=netgraph.count_graph_macs(graph),
        seeds=seeds,
        eval_millis=int((time.perf_counter() - t0) * 1000),
    )
    return report

"""Searchable architecture space: genome encoding, operators, analytic counting.

A genome describes one hybrid conv/attention candidate as a list of stages,
each stage a list of block genes.  Gene fields are split into two disjoint
roles -- topology (block type, kernel size, head count) and size (output
channels, expansion ratio, head dimension) -- so that mutation can be
restricted to one role during a search phase.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

SCHEMA_VERSION = 1

FFN_IBN = "ibn"
FFN_CONVNEXT = "convnext"

PHASE_TOPOLOGY = "topology"
PHASE_SIZE = "size"

# Role split of the searchable gene fields.
TOPOLOGY_FIELDS = ("ffn_type", "kernel_size", "num_heads")
SIZE_FIELDS = ("out_channels", "expansion_ratio", "head_dim")


class ConfigError(ValueError):
    """Raised for an internally inconsistent SearchSpaceConfig."""


class InvalidGenomeError(ValueError):
    """Raised when an operation receives a genome that fails validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class SearchSpaceConfig:
    """Domains and fixed structure of the architecture space.

    channel_domain holds one ordered value list per stage.  Overlapping
    regions of consecutive stage domains must share the same grid points so
    that the channel-monotonicity repair (a global sort of the channel
    multiset) can never move a value into a stage that does not allow it.
    """

    num_stages: int = 4
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 6, 4])
    attention_stages: set[int] = field(default_factory=lambda: {3, 4})  # 1-based
    stem_channels: int = 16
    channel_domain: list[list[int]] = field(
        default_factory=lambda: [
            [16, 24, 32],
            [32, 48, 64],
            [64, 96, 128],
            [128, 176, 224],
        ]
    )
    kernel_domain: list[int] = field(default_factory=lambda: [3, 5, 7])
    expansion_domain: list[int] = field(default_factory=lambda: [2, 3, 4])
    heads_domain: list[int] = field(default_factory=lambda: [2, 4, 8])
    head_dim_domain: list[int] = field(default_factory=lambda: [8, 16, 32])
    ffn_types: list[str] = field(default_factory=lambda: [FFN_IBN, FFN_CONVNEXT])
    attention_probability: float = 0.5
    input_resolution: int = 224
    input_channels: int = 3
    max_params: int = 3_500_000

    def validate(self):
        problems = []
        if self.num_stages < 1:
            problems.append("num_stages must be >= 1")
        if len(self.blocks_per_stage) != self.num_stages:
            problems.append(
                f"blocks_per_stage has {len(self.blocks_per_stage)} entries, "
                f"expected {self.num_stages}"
            )
        if any(b < 1 for b in self.blocks_per_stage):
            problems.append("blocks_per_stage entries must be >= 1")
        if len(self.channel_domain) != self.num_stages:
            problems.append(
                f"channel_domain has {len(self.channel_domain)} stage lists, "
                f"expected {self.num_stages}"
            )
        for name, dom in [
            ("kernel_domain", self.kernel_domain),
            ("expansion_domain", self.expansion_domain),
            ("heads_domain", self.heads_domain),
            ("head_dim_domain", self.head_dim_domain),
            *[(f"channel_domain[{i}]", d) for i, d in enumerate(self.channel_domain)],
        ]:
            if not dom:
                problems.append(f"{name} is empty")
            elif any(b <= a for a, b in zip(dom, dom[1:])):
                problems.append(f"{name} is not strictly increasing: {dom}")
        if any(k < 3 or k % 2 == 0 for k in self.kernel_domain):
            problems.append(f"kernel_domain must hold odd values >= 3: {self.kernel_domain}")
        for s in self.attention_stages:
            if not 1 <= s <= self.num_stages:
                problems.append(f"attention stage {s} out of range 1..{self.num_stages}")
        if not self.ffn_types or any(t not in (FFN_IBN, FFN_CONVNEXT) for t in self.ffn_types):
            problems.append(f"ffn_types must be a non-empty subset of "
                            f"['{FFN_IBN}', '{FFN_CONVNEXT}']: {self.ffn_types}")
        if not 0.0 <= self.attention_probability <= 1.0:
            problems.append("attention_probability must be in [0, 1]")
        if self.input_resolution < 4:
            problems.append("input_resolution must be >= 4")
        if self.stem_channels < 1 or self.input_channels < 1:
            problems.append("stem_channels and input_channels must be >= 1")
        if self.max_params < 1:
            problems.append("max_params must be >= 1")
        # Shared grid on domain overlaps keeps sort-repair closed over the space.
        for i in range(self.num_stages):
            for j in range(self.num_stages):
                if i == j or not self.channel_domain[i] or not self.channel_domain[j]:
                    continue
                lo, hi = self.channel_domain[j][0], self.channel_domain[j][-1]
                for v in self.channel_domain[i]:
                    if lo <= v <= hi and v not in self.channel_domain[j]:
                        problems.append(
                            f"channel value {v} of stage {i + 1} falls inside the "
                            f"range of stage {j + 1} but is not in its domain"
                        )
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        return {
            "num_stages": self.num_stages,
            "blocks_per_stage": list(self.blocks_per_stage),
            "attention_stages": sorted(self.attention_stages),
            "stem_channels": self.stem_channels,
            "channel_domain": [list(d) for d in self.channel_domain],
            "kernel_domain": list(self.kernel_domain),
            "expansion_domain": list(self.expansion_domain),
            "heads_domain": list(self.heads_domain),
            "head_dim_domain": list(self.head_dim_domain),
            "ffn_types": list(self.ffn_types),
            "attention_probability": self.attention_probability,
            "input_resolution": self.input_resolution,
            "input_channels": self.input_channels,
            "max_params": self.max_params,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "attention_stages" in kwargs:
            kwargs["attention_stages"] = set(kwargs["attention_stages"])
        return cls(**kwargs).validate()

    def ref(self):
        """Stable short identifier of this configuration."""
        payload = json.dumps(self.to_dict(), separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class FfnGene:
    ffn_type: str
    out_channels: int
    kernel_size: int
    expansion_ratio: int

    kind = "ffn"

    def to_dict(self):
        return {
            "type": "ffn",
            "ffn_type": self.ffn_type,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "expansion_ratio": self.expansion_ratio,
        }


@dataclass
class AttnGene:
    """Attention block gene.  The kernel of its trailing FFN is fixed to 3."""

    ffn_type: str
    out_channels: int
    expansion_ratio: int
    num_heads: int
    head_dim: int

    kind = "attn"

    def to_dict(self):
        return {
            "type": "attn",
            "ffn_type": self.ffn_type,
            "out_channels": self.out_channels,
            "expansion_ratio": self.expansion_ratio,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
        }


@dataclass
class ArchGenome:
    stages: list[list]
    config_ref: str = ""

    def blocks(self):
        """Yield (stage_index, block_index, gene) in network order (0-based)."""
        for si, stage in enumerate(self.stages):
            for bi, gene in enumerate(stage):
                yield si, bi, gene

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "config_ref": self.config_ref,
            "stages": [[g.to_dict() for g in stage] for stage in self.stages],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        stages = []
        for stage in d["stages"]:
            genes = []
            for g in stage:
                if g["type"] == "ffn":
                    genes.append(FfnGene(g["ffn_type"], g["out_channels"],
                                         g["kernel_size"], g["expansion_ratio"]))
                elif g["type"] == "attn":
                    genes.append(AttnGene(g["ffn_type"], g["out_channels"],
                                          g["expansion_ratio"], g["num_heads"],
                                          g["head_dim"]))
                else:
                    raise ValueError(f"unknown gene type {g['type']!r}")
            stages.append(genes)
        return cls(stages=stages, config_ref=d.get("config_ref", ""))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def genome_hash(genome):
    """Stable integer digest of the canonical genome JSON."""
    h = hashlib.sha256(genome.to_json().encode()).digest()
    return int.from_bytes(h[:8], "big")


def _field_domain(config, stage_idx, name):
    if name == "ffn_type":
        return config.ffn_types
    if name == "kernel_size":
        return config.kernel_domain
    if name == "num_heads":
        return config.heads_domain
    if name == "out_channels":
        return config.channel_domain[stage_idx]
    if name == "expansion_ratio":
        return config.expansion_domain
    if name == "head_dim":
        return config.head_dim_domain
    raise KeyError(name)


def repair_channels(genome):
    """Sort the out_channels sequence non-decreasing in network order.

    Preserves the channel multiset; identity on already-monotone genomes.
    """
    chans = sorted(g.out_channels for _, _, g in genome.blocks())
    stages = []
    it = iter(chans)
    for stage in genome.stages:
        stages.append([replace(g, out_channels=next(it)) for g in stage])
    return ArchGenome(stages=stages, config_ref=genome.config_ref)


def random_genome(config, seed):
    """Draw a uniform genome; channels are drawn then sorted non-decreasing."""
    rng = np.random.default_rng(seed)
    cref = config.ref()
    stages = []
    for si in range(config.num_stages):
        genes = []
        attn_ok = (si + 1) in config.attention_stages
        for _ in range(config.blocks_per_stage[si]):
            is_attn = attn_ok and rng.random() < config.attention_probability
            ffn_type = config.ffn_types[rng.integers(len(config.ffn_types))]
            out_ch = int(rng.choice(config.channel_domain[si]))
            exp = int(rng.choice(config.expansion_domain))
            if is_attn:
                genes.append(AttnGene(
                    ffn_type=ffn_type,
                    out_channels=out_ch,
                    expansion_ratio=exp,
                    num_heads=int(rng.choice(config.heads_domain)),
                    head_dim=int(rng.choice(config.head_dim_domain)),
                ))
            else:
                genes.append(FfnGene(
                    ffn_type=ffn_type,
                    out_channels=out_ch,
                    kernel_size=int(rng.choice(config.kernel_domain)),
                    expansion_ratio=exp,
                ))
        stages.append(genes)
    return repair_channels(ArchGenome(stages=stages, config_ref=cref))


def validate(genome, config):
    """Return the list of invariant violations (empty list means valid)."""
    violations = []
    if len(genome.stages) != config.num_stages:
        violations.append(
            f"genome has {len(genome.stages)} stages, expected {config.num_stages}")
        return violations
    for si, stage in enumerate(genome.stages):
        if len(stage) != config.blocks_per_stage[si]:
            violations.append(
                f"stage {si + 1} has {len(stage)} blocks, "
                f"expected {config.blocks_per_stage[si]}")
    net_idx = 0
    prev_ch = None
    for si, bi, g in genome.blocks():
        net_idx += 1
        where = f"stage {si + 1} block {bi + 1}"
        if isinstance(g, AttnGene) and (si + 1) not in config.attention_stages:
            violations.append(f"{where}: attention block outside attention stages "
                              f"{sorted(config.attention_stages)}")
        if g.ffn_type not in config.ffn_types:
            violations.append(f"{where}: ffn_type {g.ffn_type!r} not in {config.ffn_types}")
        if g.out_channels not in config.channel_domain[si]:
            violations.append(f"{where}: channels {g.out_channels} not in domain "
                              f"{config.channel_domain[si]}")
        if g.expansion_ratio not in config.expansion_domain:
            violations.append(f"{where}: expansion {g.expansion_ratio} not in domain "
                              f"{config.expansion_domain}")
        if isinstance(g, FfnGene):
            if g.kernel_size not in config.kernel_domain:
                violations.append(f"{where}: kernel {g.kernel_size} not in domain "
                                  f"{config.kernel_domain}")
        else:
            if g.num_heads not in config.heads_domain:
                violations.append(f"{where}: heads {g.num_heads} not in domain "
                                  f"{config.heads_domain}")
            if g.head_dim not in config.head_dim_domain:
                violations.append(f"{where}: head_dim {g.head_dim} not in domain "
                                  f"{config.head_dim_domain}")
        if prev_ch is not None and g.out_channels < prev_ch:
            violations.append(f"decreasing channels at block {net_idx} "
                              f"({prev_ch} -> {g.out_channels})")
        prev_ch = g.out_channels
    return violations


def _mutable_slots(genome, phase):
    """All (stage, block, field) slots whose role matches the phase."""
    wanted = TOPOLOGY_FIELDS if phase == PHASE_TOPOLOGY else SIZE_FIELDS
    slots = []
    for si, bi, g in genome.blocks():
        present = ("ffn_type", "out_channels", "expansion_ratio")
        present += ("kernel_size",) if isinstance(g, FfnGene) else ("num_heads", "head_dim")
        slots.extend((si, bi, f) for f in present if f in wanted)
    return slots


def mutate(genome, config, phase, n_mutations, seed):
    """Resample n gene fields of the given role uniformly from their domains."""
    if phase not in (PHASE_TOPOLOGY, PHASE_SIZE):
        raise ValueError(f"unknown phase {phase!r}")
    rng = np.random.default_rng(seed)
    slots = _mutable_slots(genome, phase)
    n = min(n_mutations, len(slots))
    chosen = [slots[i] for i in rng.choice(len(slots), size=n, replace=False)] if n else []
    stages = [[replace(g) for g in stage] for stage in genome.stages]
    for si, bi, fname in chosen:
        dom = _field_domain(config, si, fname)
        val = dom[rng.integers(len(dom))]
        stages[si][bi] = replace(stages[si][bi], **{fname: val})
    return repair_channels(ArchGenome(stages=stages, config_ref=genome.config_ref))


def crossover(parent_a, parent_b, config, seed):
    """Uniform crossover: each gene field comes from either parent with p=1/2.

    At positions where the parents carry different block kinds the whole gene
    is inherited from one parent (fields of the two kinds do not align).
    """
    rng = np.random.default_rng(seed)
    stages = []
    for stage_a, stage_b in zip(parent_a.stages, parent_b.stages):
        genes = []
        for ga, gb in zip(stage_a, stage_b):
            if type(ga) is not type(gb):
                genes.append(replace(ga if rng.random() < 0.5 else gb))
                continue
            fields = ("ffn_type", "out_channels", "expansion_ratio")
            fields += ("kernel_size",) if isinstance(ga, FfnGene) else ("num_heads", "head_dim")
            picks = {f: getattr(ga if rng.random() < 0.5 else gb, f) for f in fields}
            genes.append(replace(ga, **picks))
        stages.append(genes)
    child = ArchGenome(stages=stages, config_ref=parent_a.config_ref)
    return repair_channels(child)


def count_params(genome, config):
    """Exact scalar parameter count of the instantiated graph."""
    from . import netgraph

    g = netgraph.build_graph(genome, config, seed=0)
    return netgraph.count_graph_params(g)


def count_macs(genome, config):
    """Multiply-accumulate count of one forward pass at the configured resolution."""
    from . import netgraph

    g = netgraph.build_graph(genome, config, seed=0)
    return netgraph.count_graph_macs(g)

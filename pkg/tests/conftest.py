import itertools

import pytest

from esnas import archspace


@pytest.fixture
def tiny_config():
    """Two conv blocks at 16px, no attention; cheap enough for heavy loops."""
    return archspace.SearchSpaceConfig(
        num_stages=1,
        blocks_per_stage=[2],
        attention_stages=set(),
        stem_channels=8,
        channel_domain=[[8, 16]],
        kernel_domain=[3, 5],
        expansion_domain=[2],
        heads_domain=[2],
        head_dim_domain=[8],
        input_resolution=16,
        input_channels=3,
        max_params=10_000_000,
    ).validate()


@pytest.fixture
def attn_config():
    """Two stages with attention permitted in the second one."""
    return archspace.SearchSpaceConfig(
        num_stages=2,
        blocks_per_stage=[1, 2],
        attention_stages={2},
        stem_channels=8,
        channel_domain=[[8, 16], [16, 24]],
        kernel_domain=[3, 5],
        expansion_domain=[2, 3],
        heads_domain=[2, 4],
        head_dim_domain=[4, 8],
        input_resolution=16,
        input_channels=3,
        max_params=10_000_000,
    ).validate()


@pytest.fixture
def singleton_config():
    """One-point search space: every domain is a singleton."""
    return archspace.SearchSpaceConfig(
        num_stages=1,
        blocks_per_stage=[1],
        attention_stages=set(),
        stem_channels=8,
        channel_domain=[[8]],
        kernel_domain=[3],
        expansion_domain=[2],
        heads_domain=[2],
        head_dim_domain=[8],
        ffn_types=["ibn"],
        input_resolution=16,
        input_channels=3,
        max_params=10_000_000,
    ).validate()


def enumerate_space(config):
    """Exhaustively enumerate every valid genome of a small conv-only space."""
    per_block = []
    for si in range(config.num_stages):
        for _ in range(config.blocks_per_stage[si]):
            per_block.append([
                archspace.FfnGene(ft, ch, k, e)
                for ft in config.ffn_types
                for ch in config.channel_domain[si]
                for k in config.kernel_domain
                for e in config.expansion_domain
            ])
    cref = config.ref()
    genomes = []
    for combo in itertools.product(*per_block):
        stages, it = [], iter(combo)
        for si in range(config.num_stages):
            stages.append([next(it) for _ in range(config.blocks_per_stage[si])])
        g = archspace.ArchGenome(stages=stages, config_ref=cref)
        if not archspace.validate(g, config):
            genomes.append(g)
    return genomes

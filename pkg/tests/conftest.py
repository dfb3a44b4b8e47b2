from pathlib import Path

import numpy as np
import pytest

from decnas.search_space import (
    ActionSequence,
    DecoderGenome,
    FpnSpace,
    HeadSpace,
    Stage,
    decode_fpn,
    decode_head,
)

FIXTURES = Path(__file__).parent / "fixtures"


def random_fpn_tokens(rng: np.random.Generator, space: FpnSpace) -> tuple[int, ...]:
    return tuple(int(rng.integers(space.action_space_at(p)))
                 for p in range(space.seq_len))


def random_head_tokens(rng: np.random.Generator, space: HeadSpace,
                       valid: bool = True) -> tuple[int, ...]:
    toks = [int(rng.integers(space.action_space_at(p)))
            for p in range(space.seq_len)]
    if valid:
        i = int(rng.integers(space.n_layers + 1))
        j = int(rng.integers(i, space.n_layers + 1))
        toks[-2], toks[-1] = i, j
    return tuple(toks)


def random_fpn(rng, space=None):
    space = space or FpnSpace()
    return decode_fpn(ActionSequence(Stage.FPN, random_fpn_tokens(rng, space)), space)


def random_head(rng, space=None):
    space = space or HeadSpace()
    return decode_head(ActionSequence(Stage.HEAD, random_head_tokens(rng, space)), space)


def random_decoder(rng, fpn_space=None, head_space=None) -> DecoderGenome:
    return DecoderGenome(fpn=random_fpn(rng, fpn_space),
                         head=random_head(rng, head_space))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)

"""Search engine for object-detection decoder architectures."""

from .search_space import (
    ActionSequence,
    AggOp,
    BasicBlock,
    DecoderGenome,
    FpnGenome,
    FpnSpace,
    HeadGenome,
    HeadSpace,
    Stage,
    UnaryOp,
    action_space_at,
    canonical_json,
    decode_fpn,
    decode_head,
    encode_fpn,
    encode_head,
    enumerate_space,
    find_dangling,
    genome_from_dict,
    genome_hash,
    genome_to_dict,
)

__version__ = "0.1.0"

"""Genome grammar for the detection-decoder search space.

The decoder has two searchable parts. The pyramid stage is built from a
fixed number of basic blocks, each sampling two entries from a growing
pool of feature layers (seeded with the three backbone features c3, c4,
c5), transforming them with unary ops and merging them with an
aggregation op. The head stage is a straight sequence of unary ops plus
two sharing indices: ``i`` marks where per-level weights end and
globally shared weights begin, ``j`` marks where the shared region
splits into independent classification / regression branches.

Genomes are immutable values. Encoding to and from flat token sequences
is bijective, which the controller and the test suite both rely on.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Union

BACKBONE_POOL_SIZE = 3  # c3, c4, c5
TOKENS_PER_BLOCK = 5    # id1, id2, op1, op2, agg


class Stage(Enum):
    FPN = "fpn"
    HEAD = "head"


class UnaryOp(Enum):
    SEP3X3 = "sep3x3"
    SEP3X3_D3 = "sep3x3d3"
    SEP5X5_D6 = "sep5x5d6"
    SKIP = "skip"
    DCONV3X3 = "dconv3x3"
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"


class AggOp(Enum):
    SUM = "sum"
    CAT = "cat"  # concatenation followed by a 1x1 projection


# Token value -> op, in pool order. The pyramid pool is the first five
# ops; plain convolutions are legal only in the head pool.
FPN_OP_POOL: tuple[UnaryOp, ...] = (
    UnaryOp.SEP3X3,
    UnaryOp.SEP3X3_D3,
    UnaryOp.SEP5X5_D6,
    UnaryOp.SKIP,
    UnaryOp.DCONV3X3,
)
HEAD_OP_POOL: tuple[UnaryOp, ...] = FPN_OP_POOL + (UnaryOp.CONV1X1, UnaryOp.CONV3X3)
AGG_POOL: tuple[AggOp, ...] = (AggOp.SUM, AggOp.CAT)


class SpaceError(ValueError):
    """Invalid space parameters or an out-of-range query."""


class DecodeError(ValueError):
    """A token sequence cannot be decoded into a genome."""

    def __init__(self, message: str, position: int | None = None,
                 bound: int | None = None, token: int | None = None):
        super().__init__(message)
        self.position = position
        self.bound = bound
        self.token = token


class InvalidShareIndicesError(DecodeError):
    """Head share indices violate i <= j."""


class SpaceTooLargeError(SpaceError):
    """Refusing to enumerate a combinatorially large space."""


@dataclass(frozen=True)
class FpnSpace:
    """Token layout of the pyramid stage.

    ``n_blocks`` basic blocks, each encoded as [id1, id2, op1, op2, agg].
    The id bound at block t (1-based) is 3 + t - 1: the pool starts with
    the three backbone features and grows by one per block.
    """

    n_blocks: int = 7
    n_ops: int = 5
    n_agg: int = 2

    def __post_init__(self):
        if not (1 <= self.n_ops <= len(FPN_OP_POOL)):
            raise SpaceError(f"n_ops must be in [1, {len(FPN_OP_POOL)}]")
        if not (1 <= self.n_agg <= len(AGG_POOL)):
            raise SpaceError(f"n_agg must be in [1, {len(AGG_POOL)}]")
        if self.n_blocks < 1:
            raise SpaceError("n_blocks must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.n_blocks * TOKENS_PER_BLOCK

    @property
    def ops(self) -> tuple[UnaryOp, ...]:
        return FPN_OP_POOL[: self.n_ops]

    @property
    def aggs(self) -> tuple[AggOp, ...]:
        return AGG_POOL[: self.n_agg]

    def action_space_at(self, position: int) -> int:
        """Number of legal token values at a flat sequence position."""
        if not 0 <= position < self.seq_len:
            raise SpaceError(f"invalid position {position} for fpn stage")
        block, slot = divmod(position, TOKENS_PER_BLOCK)
        if slot in (0, 1):
            return BACKBONE_POOL_SIZE + block
        if slot in (2, 3):
            return self.n_ops
        return self.n_agg

    def vocab(self) -> tuple[int, ...]:
        return tuple(self.action_space_at(p) for p in range(self.seq_len))

    def cardinality(self) -> int:
        total = 1
        for p in range(self.seq_len):
            total *= self.action_space_at(p)
        return total


@dataclass(frozen=True)
class HeadSpace:
    """Token layout of the head stage: n_layers op tokens, then i, then j."""

    n_layers: int = 6
    n_ops: int = 7

    def __post_init__(self):
        if not (1 <= self.n_ops <= len(HEAD_OP_POOL)):
            raise SpaceError(f"n_ops must be in [1, {len(HEAD_OP_POOL)}]")
        if self.n_layers < 1:
            raise SpaceError("n_layers must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.n_layers + 2

    @property
    def ops(self) -> tuple[UnaryOp, ...]:
        return HEAD_OP_POOL[: self.n_ops]

    def action_space_at(self, position: int) -> int:
        if not 0 <= position < self.seq_len:
            raise SpaceError(f"invalid position {position} for head stage")
        if position < self.n_layers:
            return self.n_ops
        # i and j slots both range over [0, n_layers]; j < i is rejected
        # at decode time so the controller's token space stays rectangular.
        return self.n_layers + 1

    def vocab(self) -> tuple[int, ...]:
        return tuple(self.action_space_at(p) for p in range(self.seq_len))

    def cardinality(self) -> int:
        total = 1
        for p in range(self.seq_len):
            total *= self.action_space_at(p)
        return total


DEFAULT_FPN_SPACE = FpnSpace()
DEFAULT_HEAD_SPACE = HeadSpace()


def action_space_at(stage: Stage, position: int) -> int:
    """Token cardinality at ``position`` in the default space of ``stage``."""
    space = DEFAULT_FPN_SPACE if stage is Stage.FPN else DEFAULT_HEAD_SPACE
    return space.action_space_at(position)


@dataclass(frozen=True)
class ActionSequence:
    """Flat token list emitted by the controller for one stage."""

    stage: Stage
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass(frozen=True)
class BasicBlock:
    """One pyramid block: two pool picks, two unary ops, one aggregation."""

    id1: int
    id2: int
    op1: UnaryOp
    op2: UnaryOp
    agg: AggOp

    def __post_init__(self):
        if self.id1 < 0 or self.id2 < 0:
            raise ValueError("pool indices must be non-negative")


@dataclass(frozen=True)
class FpnGenome:
    """Ordered basic blocks; block t may only sample pool entries < 3+t-1."""

    blocks: tuple[BasicBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for k, b in enumerate(self.blocks):
            bound = BACKBONE_POOL_SIZE + k
            if b.id1 >= bound or b.id2 >= bound:
                raise ValueError(
                    f"block {k + 1}: pool index out of range (bound {bound})")
            if b.op1 not in FPN_OP_POOL or b.op2 not in FPN_OP_POOL:
                raise ValueError(f"block {k + 1}: op not in the fpn pool")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class HeadGenome:
    """Head op sequence plus sharing indices.

    Layers < share_start own per-level weights, layers in
    [share_start, branch_split) are shared across levels and branches,
    layers in [branch_split, n) are shared across levels but keep
    separate classification / regression weights.
    """

    ops: tuple[UnaryOp, ...]
    share_start: int   # i
    branch_split: int  # j

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        n = len(self.ops)
        if not (0 <= self.share_start <= self.branch_split <= n):
            raise ValueError("require 0 <= i <= j <= n_layers")

    @property
    def n_layers(self) -> int:
        return len(self.ops)


@dataclass(frozen=True)
class DecoderGenome:
    """A complete sampled decoder: pyramid genome plus head genome."""

    fpn: FpnGenome
    head: HeadGenome


Genome = Union[FpnGenome, HeadGenome, DecoderGenome]


def decode_fpn(seq: ActionSequence, space: FpnSpace | None = None) -> FpnGenome:
    """Decode a pyramid token sequence; raises DecodeError with the
    offending position and bound on any out-of-range token."""
    space = space or DEFAULT_FPN_SPACE
    if seq.stage is not Stage.FPN:
        raise DecodeError(f"expected fpn stage, got {seq.stage.value}")
    if len(seq.tokens) != space.seq_len:
        raise DecodeError(
            f"expected {space.seq_len} tokens, got {len(seq.tokens)}")
    blocks = []
    for k in range(space.n_blocks):
        base = k * TOKENS_PER_BLOCK
        vals = []
        for slot in range(TOKENS_PER_BLOCK):
            pos = base + slot
            tok = seq.tokens[pos]
            bound = space.action_space_at(pos)
            if not 0 <= tok < bound:
                raise DecodeError(
                    f"token {tok} out of range at position {pos} (bound {bound})",
                    position=pos, bound=bound, token=tok)
            vals.append(tok)
        blocks.append(BasicBlock(
            id1=vals[0], id2=vals[1],
            op1=space.ops[vals[2]], op2=space.ops[vals[3]],
            agg=space.aggs[vals[4]]))
    return FpnGenome(tuple(blocks))


def encode_fpn(genome: FpnGenome, space: FpnSpace | None = None) -> ActionSequence:
    """Inverse of decode_fpn for genomes valid in ``space``."""
    space = space or DEFAULT_FPN_SPACE
    if genome.n_blocks != space.n_blocks:
        raise ValueError(
            f"genome has {genome.n_blocks} blocks, space expects {space.n_blocks}")
    tokens: list[int] = []
    for b in genome.blocks:
        try:
            tokens.extend([b.id1, b.id2,
                           space.ops.index(b.op1), space.ops.index(b.op2),
                           space.aggs.index(b.agg)])
        except ValueError as exc:
            raise ValueError(f"genome op outside the space's pool: {exc}") from exc
    seq = ActionSequence(Stage.FPN, tuple(tokens))
    for pos, tok in enumerate(tokens):
        if tok >= space.action_space_at(pos):
            raise ValueError(f"genome token {tok} invalid at position {pos}")
    return seq


def decode_head(seq: ActionSequence, space: HeadSpace | None = None) -> HeadGenome:
    """Decode a head token sequence; j < i raises InvalidShareIndicesError."""
    space = space or DEFAULT_HEAD_SPACE
    if seq.stage is not Stage.HEAD:
        raise DecodeError(f"expected head stage, got {seq.stage.value}")
    if len(seq.tokens) != space.seq_len:
        raise DecodeError(
            f"expected {space.seq_len} tokens, got {len(seq.tokens)}")
    for pos, tok in enumerate(seq.tokens):
        bound = space.action_space_at(pos)
        if not 0 <= tok < bound:
            raise DecodeError(
                f"token {tok} out of range at position {pos} (bound {bound})",
                position=pos, bound=bound, token=tok)
    ops = tuple(space.ops[t] for t in seq.tokens[: space.n_layers])
    i, j = seq.tokens[space.n_layers], seq.tokens[space.n_layers + 1]
    if j < i:
        raise InvalidShareIndicesError(
            f"invalid share indices: j={j} < i={i}",
            position=space.n_layers + 1, bound=space.n_layers + 1, token=j)
    return HeadGenome(ops=ops, share_start=i, branch_split=j)


def encode_head(genome: HeadGenome, space: HeadSpace | None = None) -> ActionSequence:
    space = space or DEFAULT_HEAD_SPACE
    if genome.n_layers != space.n_layers:
        raise ValueError(
            f"genome has {genome.n_layers} layers, space expects {space.n_layers}")
    try:
        tokens = [space.ops.index(op) for op in genome.ops]
    except ValueError as exc:
        raise ValueError(f"genome op outside the space's pool: {exc}") from exc
    tokens += [genome.share_start, genome.branch_split]
    return ActionSequence(Stage.HEAD, tuple(tokens))


def find_dangling(genome: FpnGenome) -> frozenset[int]:
    """Block numbers (1-based) whose output no later block samples.

    Only blocks that do not feed the pyramid outputs directly can
    dangle: the last three block outputs become the decoder outputs, so
    candidates are t in [1, n_blocks - 3]. Dangling outputs are merged
    into every pyramid output by element-wise addition downstream.
    """
    n = genome.n_blocks
    dangling = set()
    for t in range(1, max(0, n - 3) + 1):
        pool_index = BACKBONE_POOL_SIZE + t - 1  # where block t's output sits
        referenced = any(
            genome.blocks[s - 1].id1 == pool_index or genome.blocks[s - 1].id2 == pool_index
            for s in range(t + 1, n + 1))
        if not referenced:
            dangling.add(t)
    return frozenset(dangling)


MAX_ENUMERABLE_BLOCKS = 4


def enumerate_space(n_blocks: int, n_ops: int, n_agg: int) -> Iterator[FpnGenome]:
    """Yield every genome of a reduced pyramid space, in deterministic
    lexicographic token order. Guarded to small block counts."""
    if n_blocks > MAX_ENUMERABLE_BLOCKS:
        raise SpaceTooLargeError(
            f"space too large to enumerate (n_blocks {n_blocks} > {MAX_ENUMERABLE_BLOCKS})")
    space = FpnSpace(n_blocks=n_blocks, n_ops=n_ops, n_agg=n_agg)
    ranges = [range(space.action_space_at(p)) for p in range(space.seq_len)]
    for tokens in itertools.product(*ranges):
        yield decode_fpn(ActionSequence(Stage.FPN, tokens), space)


# --- JSON schema -----------------------------------------------------------
#
# {"fpn": {"blocks": [{"id1": int, "id2": int, "op1": str, "op2": str,
#                      "agg": str} x n]},
#  "head": {"ops": [str x n], "i": int, "j": int}}
#
# Op names are the enum values ("sep3x3", "sep3x3d3", "sep5x5d6", "skip",
# "dconv3x3", "conv1x1", "conv3x3"); agg names are "sum" and "cat".
# Partial genomes serialize as {"fpn": ...} or {"head": ...} alone.
# The canonical form is the compact dump (no whitespace) with keys in
# exactly the order above; hashes are computed over that form.

def _fpn_body(g: FpnGenome) -> dict:
    return {"blocks": [
        {"id1": b.id1, "id2": b.id2, "op1": b.op1.value,
         "op2": b.op2.value, "agg": b.agg.value}
        for b in g.blocks]}


def _head_body(g: HeadGenome) -> dict:
    return {"ops": [op.value for op in g.ops],
            "i": g.share_start, "j": g.branch_split}


def genome_to_dict(genome: Genome) -> dict:
    if isinstance(genome, DecoderGenome):
        return {"fpn": _fpn_body(genome.fpn), "head": _head_body(genome.head)}
    if isinstance(genome, FpnGenome):
        return {"fpn": _fpn_body(genome)}
    if isinstance(genome, HeadGenome):
        return {"head": _head_body(genome)}
    raise TypeError(f"not a genome: {type(genome).__name__}")


def _fpn_from_body(body: dict) -> FpnGenome:
    ops_by_name = {op.value: op for op in UnaryOp}
    aggs_by_name = {a.value: a for a in AggOp}
    blocks = []
    for b in body["blocks"]:
        blocks.append(BasicBlock(
            id1=int(b["id1"]), id2=int(b["id2"]),
            op1=ops_by_name[b["op1"]], op2=ops_by_name[b["op2"]],
            agg=aggs_by_name[b["agg"]]))
    return FpnGenome(tuple(blocks))


def _head_from_body(body: dict) -> HeadGenome:
    ops_by_name = {op.value: op for op in UnaryOp}
    return HeadGenome(
        ops=tuple(ops_by_name[name] for name in body["ops"]),
        share_start=int(body["i"]), branch_split=int(body["j"]))


def genome_from_dict(data: dict) -> Genome:
    """Parse a genome dict; returns the narrowest matching genome type."""
    has_fpn, has_head = "fpn" in data, "head" in data
    if not has_fpn and not has_head:
        raise ValueError("genome dict has neither 'fpn' nor 'head'")
    if has_fpn and has_head:
        return DecoderGenome(fpn=_fpn_from_body(data["fpn"]),
                             head=_head_from_body(data["head"]))
    if has_fpn:
        return _fpn_from_body(data["fpn"])
    return _head_from_body(data["head"])


def canonical_json(genome: Genome | dict) -> str:
    """Bit-exact canonical serialization; the basis of genome hashes."""
    if isinstance(genome, dict):
        genome = genome_from_dict(genome)
    return json.dumps(genome_to_dict(genome), separators=(",", ":"))


def genome_hash(genome: Genome | dict) -> str:
    """SHA-256 hex digest of the canonical JSON form."""
    return hashlib.sha256(canonical_json(genome).encode("utf-8")).hexdigest()

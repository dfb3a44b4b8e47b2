"""Genome-dict parsing against the published JSON schema.

The worker deliberately re-implements this instead of importing the
search engine: the wire format and the genome schema are the contract
between the two processes, and an independent reading of them is what
the cross-checks in both test suites lean on.

Schema:
  {"fpn": {"blocks": [{"id1", "id2", "op1", "op2", "agg"} x N]},
   "head": {"ops": [str x M], "i": int, "j": int}}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

FPN_OPS = ("sep3x3", "sep3x3d3", "sep5x5d6", "skip", "dconv3x3")
HEAD_OPS = FPN_OPS + ("conv1x1", "conv3x3")
AGG_OPS = ("sum", "cat")

# The hand-designed fallback head attached to pyramid-only requests:
# four shared 3x3 convs per branch, fully branch-independent (i=j=0).
DEFAULT_HEAD = {"ops": ["conv3x3", "conv3x3", "conv3x3", "conv3x3",
                        "skip", "skip"], "i": 0, "j": 0}


class GenomeError(ValueError):
    pass


@dataclass(frozen=True)
class FpnPart:
    blocks: tuple[dict, ...]   # validated block dicts


@dataclass(frozen=True)
class HeadPart:
    ops: tuple[str, ...]
    share_start: int
    branch_split: int


@dataclass(frozen=True)
class Decoder:
    fpn: FpnPart
    head: HeadPart


def parse_fpn(body: dict) -> FpnPart:
    blocks = body.get("blocks")
    if not isinstance(blocks, list) or not blocks:
        raise GenomeError("fpn.blocks must be a non-empty list")
    out = []
    for t, blk in enumerate(blocks, start=1):
        bound = 3 + t - 1
        id1, id2 = int(blk["id1"]), int(blk["id2"])
        if not (0 <= id1 < bound and 0 <= id2 < bound):
            raise GenomeError(f"block {t}: pool index out of range (bound {bound})")
        if blk["op1"] not in FPN_OPS or blk["op2"] not in FPN_OPS:
            raise GenomeError(f"block {t}: unknown pyramid op")
        if blk["agg"] not in AGG_OPS:
            raise GenomeError(f"block {t}: unknown aggregation")
        out.append({"id1": id1, "id2": id2, "op1": blk["op1"],
                    "op2": blk["op2"], "agg": blk["agg"]})
    return FpnPart(blocks=tuple(out))


def parse_head(body: dict) -> HeadPart:
    ops = body.get("ops")
    if not isinstance(ops, list) or not ops:
        raise GenomeError("head.ops must be a non-empty list")
    for op in ops:
        if op not in HEAD_OPS:
            raise GenomeError(f"unknown head op {op!r}")
    i, j = int(body["i"]), int(body["j"])
    if not (0 <= i <= j <= len(ops)):
        raise GenomeError("head share indices must satisfy 0 <= i <= j <= n")
    return HeadPart(ops=tuple(ops), share_start=i, branch_split=j)


def parse_decoder(genome: dict, stage: str) -> Decoder:
    """Assemble a full decoder for the given request stage, attaching
    the default head to pyramid-only requests."""
    if stage not in ("fpn", "head", "full"):
        raise GenomeError(f"unknown stage {stage!r}")
    if "fpn" not in genome:
        raise GenomeError(f"stage {stage!r} requires the pyramid genome")
    fpn = parse_fpn(genome["fpn"])
    if stage == "fpn" and "head" not in genome:
        head = parse_head(DEFAULT_HEAD)
    else:
        if "head" not in genome:
            raise GenomeError(f"stage {stage!r} requires the head genome")
        head = parse_head(genome["head"])
    return Decoder(fpn=fpn, head=head)


def dangling_blocks(fpn: FpnPart) -> list[int]:
    """1-based numbers of blocks whose output no later block samples
    and which do not feed the pyramid outputs directly."""
    n = len(fpn.blocks)
    referenced = set()
    for blk in fpn.blocks:
        referenced.add(blk["id1"])
        referenced.add(blk["id2"])
    return [t for t in range(1, max(0, n - 3) + 1)
            if (3 + t - 1) not in referenced]


def hash_reward(genome: dict) -> float:
    """Echo-mode pseudo-reward shared with the search engine:
    sha256 of the compact genome JSON, as an integer, mod 1000 / 1000."""
    canon = json.dumps(genome, separators=(",", ":"))
    digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()
    return (int(digest, 16) % 1000) / 1000

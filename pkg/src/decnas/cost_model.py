"""Dataflow-graph construction and FLOPs / parameter accounting.

A genome decodes into an explicit acyclic graph with shape propagation:
1x1 input projections, the pyramid blocks with bilinear resampling
wherever aggregated inputs disagree on stride, global merging of
dangling block outputs into every pyramid output, stride-2 convolutions
producing the two coarsest levels, and the head replicated over the
five levels with weight groups assigned by the sharing indices.

Counting conventions (also stated in every report):
- ``flops`` counts multiply-accumulates (one MAC = one FLOP), the
  convention used by the reference decoder-cost tables this module is
  checked against; double it for separate multiply + add counting.
- Parametric ops carry a 2*C normalization affine term (group-norm
  affine in the head, batch-norm equivalent in the pyramid).
- Predictor convolutions carry a bias and no normalization.
- A deformable 3x3 conv is costed as a standard 3x3 conv plus its
  18-channel offset-predictor conv (weights only); the bilinear
  sampling arithmetic is ignored.
- Resampling and element-wise addition contribute no MACs.
Parameters are counted once per weight group, FLOPs once per node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .search_space import (
    BACKBONE_POOL_SIZE,
    AggOp,
    DecoderGenome,
    FpnGenome,
    HeadGenome,
    UnaryOp,
    find_dangling,
)

PYRAMID_STRIDES = (8, 16, 32, 64, 128)
BACKBONE_STRIDES = (8, 16, 32)

FLOP_CONVENTION = ("flops are multiply-accumulate counts (1 MAC = 1 FLOP); "
                   "multiply by 2 for separate multiply+add accounting")


class GraphError(ValueError):
    """Invalid width, channel count or op kind while building a graph."""


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int
    stride: int


def _shape(channels: int, image: tuple[int, int], stride: int) -> TensorShape:
    h, w = image
    return TensorShape(channels, math.ceil(h / stride), math.ceil(w / stride), stride)


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str                 # unary/agg op value or one of the structural kinds
    inputs: tuple[int, ...]
    in_channels: int
    out_shape: TensorShape
    weight_group: str | None  # None for parameter-free nodes
    section: str              # "fpn" | "head" | "predictors"


STRUCTURAL_KINDS = ("proj1x1", "stride_conv", "resample", "global_merge", "pred")


@dataclass
class DecoderGraph:
    nodes: list[GraphNode]
    output_ids: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        """Check topological ordering and weight-group consistency."""
        group_sig: dict[str, tuple] = {}
        for idx, node in enumerate(self.nodes):
            if node.id != idx:
                raise GraphError(f"node ids must be topologically ordered, got {node.id} at {idx}")
            for src in node.inputs:
                if src >= node.id:
                    raise GraphError(f"node {node.id} consumes non-earlier node {src}")
            if node.weight_group is not None:
                sig = (node.kind, node.in_channels, node.out_shape.channels)
                prev = group_sig.setdefault(node.weight_group, sig)
                if prev != sig:
                    raise GraphError(
                        f"weight group {node.weight_group} mixes signatures {prev} and {sig}")


def op_cost(kind: UnaryOp | AggOp | str, in_ch: int, out_ch: int,
            h: int, w: int) -> tuple[int, int]:
    """(flops, params) of one op at the given output resolution.

    Separable convs: depthwise in*k^2 + pointwise in*out weights.
    Plain convs: in*out*k^2. Concat-project: 1x1 conv over 2*in
    channels. Every parametric op adds a 2*out norm affine except
    predictors, which add an out-channel bias instead.
    """
    if in_ch <= 0 or out_ch <= 0 or h <= 0 or w <= 0:
        raise GraphError("op_cost requires positive dimensions")
    name = kind.value if isinstance(kind, (UnaryOp, AggOp)) else kind
    if name in ("skip", "sum", "resample", "global_merge"):
        return 0, 0
    if name in ("sep3x3", "sep3x3d3"):
        mults = in_ch * 9 + in_ch * out_ch
        params = mults + 2 * out_ch
    elif name == "sep5x5d6":
        mults = in_ch * 25 + in_ch * out_ch
        params = mults + 2 * out_ch
    elif name == "dconv3x3":
        mults = in_ch * out_ch * 9 + in_ch * 18 * 9
        params = in_ch * out_ch * 9 + 2 * out_ch + in_ch * 18 * 9
    elif name == "conv1x1" or name == "proj1x1":
        mults = in_ch * out_ch
        params = mults + 2 * out_ch
    elif name in ("conv3x3", "stride_conv"):
        mults = in_ch * out_ch * 9
        params = mults + 2 * out_ch
    elif name == "cat":
        mults = 2 * in_ch * out_ch
        params = mults + 2 * out_ch
    elif name == "pred":
        mults = in_ch * out_ch * 9
        params = mults + out_ch
    else:
        raise GraphError(f"unknown op kind: {name}")
    return mults * h * w, params


@dataclass(frozen=True)
class SectionCost:
    flops: int
    params: int


@dataclass(frozen=True)
class CostReport:
    flops: int
    params: int
    per_section: dict[str, SectionCost]
    convention: str = FLOP_CONVENTION

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "params": self.params,
            "gflops": self.gflops,
            "params_m": self.params_m,
            "per_section": {
                name: {"flops": s.flops, "params": s.params}
                for name, s in self.per_section.items()},
            "convention": self.convention,
        }

    def format_table(self) -> str:
        lines = [f"# {self.convention}",
                 f"{'section':<12}{'GFLOPs':>12}{'Params(M)':>12}"]
        for name in ("fpn", "head", "predictors"):
            s = self.per_section.get(name, SectionCost(0, 0))
            lines.append(f"{name:<12}{s.flops / 1e9:>12.3f}{s.params / 1e6:>12.3f}")
        lines.append(f"{'total':<12}{self.gflops:>12.3f}{self.params_m:>12.3f}")
        return "\n".join(lines)


class _GraphBuilder:
    def __init__(self, image: tuple[int, int]):
        self.nodes: list[GraphNode] = []
        self.image = image

    def add(self, kind: str, inputs: tuple[int, ...], in_channels: int,
            out_channels: int, stride: int, weight_group: str | None,
            section: str) -> int:
        node = GraphNode(
            id=len(self.nodes), kind=kind, inputs=inputs,
            in_channels=in_channels,
            out_shape=_shape(out_channels, self.image, stride),
            weight_group=weight_group, section=section)
        self.nodes.append(node)
        return node.id

    def shape(self, node_id: int) -> TensorShape:
        return self.nodes[node_id].out_shape

    def resample_to(self, node_id: int, stride: int, section: str) -> int:
        """Insert a bilinear resample unless the stride already matches."""
        shp = self.shape(node_id)
        if shp.stride == stride:
            return node_id
        return self.add("resample", (node_id,), shp.channels, shp.channels,
                        stride, None, section)


def build_graph(genome: DecoderGenome,
                backbone_channels: tuple[int, int, int] = (512, 1024, 2048),
                fpn_width: int = 256,
                head_width: int = 256,
                image: tuple[int, int] = (1088, 800),
                num_classes: int = 80) -> DecoderGraph:
    """Decode a genome into a shape-annotated dataflow graph.

    The three backbone features are projected to ``fpn_width`` with 1x1
    convolutions and seed the block pool. Block outputs aggregate at the
    finer of their two input strides (the coarser input is bilinearly
    upsampled). The last three block outputs are resampled to strides
    8/16/32, dangling block outputs are added into each of them, and two
    stride-2 3x3 convolutions derive the 64- and 128-stride levels. The
    head runs on all five levels; parametric head ops emit
    ``head_width`` channels while skips pass channels through, and the
    classification branch ends in class + centerness predictors, the
    regression branch in a 4-channel predictor.
    """
    if fpn_width <= 0 or head_width <= 0:
        raise GraphError("widths must be positive")
    if any(c <= 0 for c in backbone_channels):
        raise GraphError("backbone channels must be positive")
    if len(backbone_channels) != 3:
        raise GraphError("expected exactly three backbone channel widths")
    fpn, head = genome.fpn, genome.head

    b = _GraphBuilder(image)
    pool: list[int] = []
    for k, ch in enumerate(backbone_channels):
        pool.append(b.add("proj1x1", (), ch, fpn_width, BACKBONE_STRIDES[k],
                          f"fpn.proj{k}", "fpn"))

    for t, blk in enumerate(fpn.blocks, start=1):
        branch_ids = []
        for side, (pick, op) in enumerate(((blk.id1, blk.op1), (blk.id2, blk.op2))):
            src = pool[pick]
            shp = b.shape(src)  # pool entries are all at fpn_width
            group = None if op is UnaryOp.SKIP else f"fpn.b{t}.op{side + 1}"
            branch_ids.append(b.add(op.value, (src,), shp.channels, fpn_width,
                                    shp.stride, group, "fpn"))
        s1, s2 = b.shape(branch_ids[0]).stride, b.shape(branch_ids[1]).stride
        target = min(s1, s2)
        left = b.resample_to(branch_ids[0], target, "fpn")
        right = b.resample_to(branch_ids[1], target, "fpn")
        agg_group = None if blk.agg is AggOp.SUM else f"fpn.b{t}.agg"
        pool.append(b.add(blk.agg.value, (left, right), fpn_width, fpn_width,
                          target, agg_group, "fpn"))

    # Pyramid outputs: last three blocks at strides 8/16/32, then the
    # dangling-block merge, then the two derived coarse levels.
    out_ids = []
    for which, stride in enumerate((8, 16, 32)):
        src = pool[-3 + which]
        out_ids.append(b.resample_to(src, stride, "fpn"))
    dangling = sorted(find_dangling(fpn))
    if dangling:
        merged = []
        for src, stride in zip(out_ids, (8, 16, 32)):
            extra = tuple(b.resample_to(pool[BACKBONE_POOL_SIZE + t - 1], stride, "fpn")
                          for t in dangling)
            merged.append(b.add("global_merge", (src,) + extra, fpn_width,
                                fpn_width, stride, None, "fpn"))
        out_ids = merged
    p6 = b.add("stride_conv", (out_ids[2],), fpn_width, fpn_width, 64,
               "fpn.p6", "fpn")
    p7 = b.add("stride_conv", (p6,), fpn_width, fpn_width, 128, "fpn.p7", "fpn")
    levels = out_ids + [p6, p7]

    i, j, n_layers = head.share_start, head.branch_split, head.n_layers
    for lvl, level_node in enumerate(levels):
        stride = b.shape(level_node).stride
        cur, cur_ch = level_node, fpn_width
        for k in range(j):
            op = head.ops[k]
            if op is UnaryOp.SKIP:
                cur = b.add("skip", (cur,), cur_ch, cur_ch, stride, None, "head")
                continue
            group = f"head.l{k}.level{lvl}" if k < i else f"head.l{k}.shared"
            cur = b.add(op.value, (cur,), cur_ch, head_width, stride, group, "head")
            cur_ch = head_width
        branch_ends = {}
        for branch in ("cls", "reg"):
            bcur, bch = cur, cur_ch
            for k in range(j, n_layers):
                op = head.ops[k]
                if op is UnaryOp.SKIP:
                    bcur = b.add("skip", (bcur,), bch, bch, stride, None, "head")
                    continue
                bcur = b.add(op.value, (bcur,), bch, head_width, stride,
                             f"head.l{k}.{branch}", "head")
                bch = head_width
            branch_ends[branch] = (bcur, bch)
        cls_src, cls_ch = branch_ends["cls"]
        reg_src, reg_ch = branch_ends["reg"]
        b.add("pred", (cls_src,), cls_ch, num_classes, stride, "pred.cls",
              "predictors")
        b.add("pred", (cls_src,), cls_ch, 1, stride, "pred.ctr", "predictors")
        b.add("pred", (reg_src,), reg_ch, 4, stride, "pred.reg", "predictors")

    graph = DecoderGraph(nodes=b.nodes,
                         output_ids={f"p{k + 3}": n for k, n in enumerate(levels)})
    graph.validate()
    return graph


def count(graph: DecoderGraph) -> CostReport:
    """Sum FLOPs over all nodes and parameters once per weight group."""
    graph.validate()
    flops = {"fpn": 0, "head": 0, "predictors": 0}
    params = {"fpn": 0, "head": 0, "predictors": 0}
    seen_groups: set[str] = set()
    for node in graph.nodes:
        shp = node.out_shape
        f, p = op_cost(node.kind, node.in_channels, shp.channels,
                       shp.height, shp.width)
        flops[node.section] += f
        if node.weight_group is not None and node.weight_group not in seen_groups:
            seen_groups.add(node.weight_group)
            params[node.section] += p
    sections = {name: SectionCost(flops[name], params[name]) for name in flops}
    return CostReport(flops=sum(flops.values()), params=sum(params.values()),
                      per_section=sections)


def cost_of(genome: DecoderGenome, **kwargs) -> CostReport:
    """Convenience wrapper: build the graph and count it."""
    return count(build_graph(genome, **kwargs))


def baseline_head_genome(n_convs: int = 4, n_layers: int = 6) -> HeadGenome:
    """The hand-designed anchor-free baseline head in this grammar:
    branch-independent towers of 3x3 convs shared across levels,
    padded with skips to fill the fixed layer count (i=0, j=0)."""
    if n_convs > n_layers:
        raise ValueError("n_convs must be <= n_layers")
    ops = (UnaryOp.CONV3X3,) * n_convs + (UnaryOp.SKIP,) * (n_layers - n_convs)
    return HeadGenome(ops=ops, share_start=0, branch_split=0)

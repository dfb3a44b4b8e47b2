"""Trainable decoder materialized from a genome.

Mirrors the search engine's cost-graph semantics op for op so that
parameter counts line up exactly under the shared convention:
convolutions are bias-free and followed by a group-norm affine (2*C
params), predictors carry a bias and no norm, and a deformable 3x3 conv
is substituted by a standard 3x3 conv plus its 18-channel offset conv
(offset weights present and counted, output unused; the substitution is
reported to the caller). Group norm stands in for every normalization
at this scale since toy batches make batch statistics meaningless.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .genome import Decoder, dangling_blocks

PYRAMID_STRIDES = (8, 16, 32, 64, 128)


def _gn(channels: int) -> nn.GroupNorm:
    # >= 2 channels per group, or torch rejects 1x1 maps at the
    # coarsest pyramid level; the affine param count is 2*C regardless
    for groups in (8, 4, 2, 1):
        if channels % groups == 0 and channels // groups >= 2:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ConvGN(nn.Module):
    """conv (no bias) + group norm + relu; the basic parametric unit."""

    def __init__(self, in_ch, out_ch, kernel, dilation=1, stride=1,
                 depthwise=False, relu=True):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride,
                              padding=pad, dilation=dilation,
                              groups=in_ch if depthwise else 1, bias=False)
        self.norm = _gn(out_ch)
        self.relu = relu

    def forward(self, x):
        x = self.norm(self.conv(x))
        return F.relu(x) if self.relu else x


class SepConv(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, dilation):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.depthwise = nn.Conv2d(in_ch, in_ch, kernel, padding=pad,
                                   dilation=dilation, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.norm = _gn(out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.pointwise(self.depthwise(x))))


class DeformSubstitute(nn.Module):
    """Cost-equivalent stand-in for a deformable 3x3 conv: the main conv
    plus the offset-predictor conv whose output is discarded."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.offset = nn.Conv2d(in_ch, 18, 3, padding=1, bias=False)
        self.norm = _gn(out_ch)

    def forward(self, x):
        _ = self.offset(x)  # kept for cost parity; sampling not modeled
        return F.relu(self.norm(self.conv(x)))


def make_op(kind: str, in_ch: int, out_ch: int) -> tuple[nn.Module, int]:
    """Module for a unary op plus its output channel count."""
    if kind == "skip":
        return nn.Identity(), in_ch
    if kind == "sep3x3":
        return SepConv(in_ch, out_ch, 3, 1), out_ch
    if kind == "sep3x3d3":
        return SepConv(in_ch, out_ch, 3, 3), out_ch
    if kind == "sep5x5d6":
        return SepConv(in_ch, out_ch, 5, 6), out_ch
    if kind == "dconv3x3":
        return DeformSubstitute(in_ch, out_ch), out_ch
    if kind == "conv1x1":
        return ConvGN(in_ch, out_ch, 1), out_ch
    if kind == "conv3x3":
        return ConvGN(in_ch, out_ch, 3), out_ch
    raise ValueError(f"unknown op kind {kind!r}")


def _resize_like(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == torch.Size(hw):
        return x
    return F.interpolate(x, size=hw, mode="bilinear", align_corners=False)


class DecoderNet(nn.Module):
    """The decoder as a network: projection convs, pyramid blocks with
    bilinear alignment, dangling-output merge, two stride-2 convs for
    the coarse levels, and the partially shared two-branch head."""

    def __init__(self, decoder: Decoder, feature_channels: tuple[int, int, int],
                 fpn_width: int, head_width: int, image_hw: tuple[int, int],
                 num_classes: int):
        super().__init__()
        self.decoder = decoder
        self.image_hw = image_hw
        self.num_classes = num_classes
        self.substituted = sorted({
            op for op in
            [b["op1"] for b in decoder.fpn.blocks]
            + [b["op2"] for b in decoder.fpn.blocks]
            + list(decoder.head.ops)
            if op == "dconv3x3"})

        self.projs = nn.ModuleList(
            [ConvGN(c, fpn_width, 1, relu=False) for c in feature_channels])

        self.block_ops = nn.ModuleList()
        self.block_aggs = nn.ModuleList()
        for blk in decoder.fpn.blocks:
            op1, _ = make_op(blk["op1"], fpn_width, fpn_width)
            op2, _ = make_op(blk["op2"], fpn_width, fpn_width)
            self.block_ops.append(nn.ModuleList([op1, op2]))
            if blk["agg"] == "cat":
                self.block_aggs.append(ConvGN(2 * fpn_width, fpn_width, 1))
            else:
                self.block_aggs.append(nn.Identity())

        self.p6_conv = ConvGN(fpn_width, fpn_width, 3, stride=2, relu=False)
        self.p7_conv = ConvGN(fpn_width, fpn_width, 3, stride=2, relu=False)

        head = decoder.head
        i, j = head.share_start, head.branch_split
        self.head_modules = nn.ModuleDict()
        ch = fpn_width
        self.head_plan: list[tuple[str, list[str]]] = []  # (kind, group keys)
        for k, kind in enumerate(head.ops):
            if k < j:
                keys = ([f"l{k}_lvl{lvl}" for lvl in range(5)] if k < i
                        else [f"l{k}_shared"])
            else:
                keys = [f"l{k}_cls", f"l{k}_reg"]
            if kind != "skip":
                for key in keys:
                    module, _ = make_op(kind, ch, head_width)
                    self.head_modules[key] = module
                ch = head_width
            self.head_plan.append((kind, keys))
        self.head_out_channels = ch

        self.pred_cls = nn.Conv2d(ch, num_classes, 3, padding=1, bias=True)
        self.pred_ctr = nn.Conv2d(ch, 1, 3, padding=1, bias=True)
        self.pred_reg = nn.Conv2d(ch, 4, 3, padding=1, bias=True)

    # -- structure ----------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def init_weights(self, seed: int) -> None:
        """Deterministic re-init of every tensor, not touching global rng."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                module.weight.data.normal_(0.0, 0.05, generator=gen)
                if module.bias is not None:
                    module.bias.data.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()

    def level_sizes(self) -> list[tuple[int, int]]:
        h, w = self.image_hw
        return [(math.ceil(h / s), math.ceil(w / s)) for s in PYRAMID_STRIDES]

    # -- forward ------------------------------------------------------------

    def _run_head_layer(self, k: int, lvl: int, branch: str | None,
                        x: torch.Tensor) -> torch.Tensor:
        kind, keys = self.head_plan[k]
        if kind == "skip":
            return x
        head = self.decoder.head
        if k < head.share_start:
            key = f"l{k}_lvl{lvl}"
        elif k < head.branch_split:
            key = f"l{k}_shared"
        else:
            key = f"l{k}_{branch}"
        return self.head_modules[key](x)

    def forward(self, c3, c4, c5):
        sizes = self.level_sizes()
        pool = [proj(c) for proj, c in zip(self.projs, (c3, c4, c5))]
        for blk, ops, agg in zip(self.decoder.fpn.blocks, self.block_ops,
                                 self.block_aggs):
            x1 = ops[0](pool[blk["id1"]])
            x2 = ops[1](pool[blk["id2"]])
            if x1.shape[-2:] != x2.shape[-2:]:
                # upsample the coarser input to the finer grid
                if x1.shape[-1] * x1.shape[-2] < x2.shape[-1] * x2.shape[-2]:
                    x1 = _resize_like(x1, x2.shape[-2:])
                else:
                    x2 = _resize_like(x2, x1.shape[-2:])
            if blk["agg"] == "cat":
                merged = agg(torch.cat([x1, x2], dim=1))
            else:
                merged = x1 + x2
            pool.append(merged)

        levels = [_resize_like(pool[-3 + k], sizes[k]) for k in range(3)]
        for t in dangling_blocks(self.decoder.fpn):
            extra = pool[3 + t - 1]
            levels = [lvl + _resize_like(extra, lvl.shape[-2:])
                      for lvl in levels]
        p6 = self.p6_conv(levels[2])
        p7 = self.p7_conv(p6)
        levels = levels + [p6, p7]

        outputs = []
        n_layers = len(self.decoder.head.ops)
        j = self.decoder.head.branch_split
        for lvl, feat in enumerate(levels):
            x = feat
            for k in range(j):
                x = self._run_head_layer(k, lvl, None, x)
            branch_out = {}
            for branch in ("cls", "reg"):
                bx = x
                for k in range(j, n_layers):
                    bx = self._run_head_layer(k, lvl, branch, bx)
                branch_out[branch] = bx
            outputs.append((self.pred_cls(branch_out["cls"]),
                            self.pred_ctr(branch_out["cls"]),
                            self.pred_reg(branch_out["reg"])))
        return outputs

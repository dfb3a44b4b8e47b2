import math
from collections import Counter

import numpy as np
import pytest

from decnas.cost_model import (
    CostReport,
    GraphError,
    baseline_head_genome,
    build_graph,
    cost_of,
    count,
    op_cost,
)
from decnas.search_space import (
    AggOp,
    BasicBlock,
    DecoderGenome,
    FpnGenome,
    HeadGenome,
    UnaryOp,
    find_dangling,
)
from conftest import random_decoder, random_fpn, random_head


def simple_fpn(n_blocks: int = 7) -> FpnGenome:
    return FpnGenome(tuple(
        BasicBlock(k % 3, 0, UnaryOp.SEP3X3, UnaryOp.SKIP, AggOp.SUM)
        for k in range(n_blocks)))


def baseline_decoder() -> DecoderGenome:
    return DecoderGenome(fpn=simple_fpn(), head=baseline_head_genome())


class TestOpCost:
    def test_sep3x3_hand_arithmetic(self):
        flops, params = op_cost(UnaryOp.SEP3X3, 64, 64, 100, 100)
        assert params == 64 * 9 + 64 * 64 + 2 * 64 == 4800
        assert flops == (64 * 9 + 64 * 64) * 100 * 100

    def test_skip_is_free(self):
        assert op_cost(UnaryOp.SKIP, 256, 256, 50, 50) == (0, 0)

    def test_conv3x3_hand_arithmetic(self):
        _, params = op_cost(UnaryOp.CONV3X3, 256, 256, 10, 10)
        assert params == 589824 + 512

    def test_dconv_includes_offset_conv(self):
        flops, params = op_cost(UnaryOp.DCONV3X3, 64, 64, 10, 10)
        assert params == 64 * 64 * 9 + 2 * 64 + 64 * 18 * 9
        assert flops == (64 * 64 * 9 + 64 * 18 * 9) * 100

    def test_concat_projection(self):
        flops, params = op_cost(AggOp.CAT, 128, 128, 10, 10)
        assert params == 2 * 128 * 128 + 2 * 128
        assert flops == 2 * 128 * 128 * 100

    def test_predictor_carries_bias_not_norm(self):
        _, params = op_cost("pred", 256, 80, 10, 10)
        assert params == 256 * 80 * 9 + 80

    def test_rejects_bad_dims(self):
        with pytest.raises(GraphError):
            op_cost(UnaryOp.SEP3X3, 0, 64, 10, 10)


class TestBaselineHeadAnchor:
    """Reference numbers for the hand-designed head: four 3x3 convs at
    width 256 per branch plus predictors, measured at 1088x800 over the
    five pyramid levels."""

    @staticmethod
    def head_cost(report: CostReport) -> tuple[float, float]:
        h = report.per_section["head"]
        p = report.per_section["predictors"]
        return (h.params + p.params) / 1e6, (h.flops + p.flops) / 1e9

    def test_params_within_5pct(self):
        params_m, _ = self.head_cost(cost_of(baseline_decoder()))
        assert params_m == pytest.approx(4.92, rel=0.05)

    def test_flops_within_5pct(self):
        _, gflops = self.head_cost(cost_of(baseline_decoder()))
        assert gflops == pytest.approx(89.16, rel=0.05)

    def test_structure_matches_hand_built_reference(self):
        """Node-level diff against the expected baseline head layout:
        per level, two branches of four 3x3 convs and two skips, then
        three predictors; branch weights shared across levels."""
        graph = build_graph(baseline_decoder())
        got = Counter((n.kind, n.weight_group) for n in graph.nodes
                      if n.section in ("head", "predictors"))
        expected = Counter()
        for _ in range(5):  # levels
            for branch in ("cls", "reg"):
                for layer in range(4):
                    expected[("conv3x3", f"head.l{layer}.{branch}")] += 1
                for layer in (4, 5):
                    expected[("skip", None)] += 1
            expected[("pred", "pred.cls")] += 1
            expected[("pred", "pred.ctr")] += 1
            expected[("pred", "pred.reg")] += 1
        assert got == expected


class TestSharingGroups:
    @staticmethod
    def head_params(head: HeadGenome) -> int:
        g = DecoderGenome(fpn=simple_fpn(), head=head)
        return cost_of(g).per_section["head"].params

    def test_fully_shared_counts_once(self):
        head = HeadGenome(ops=(UnaryOp.CONV3X3,) * 6, share_start=0,
                          branch_split=6)
        single_copy = 6 * (256 * 256 * 9 + 512)
        assert self.head_params(head) == single_copy

    def test_level_independent_counts_five_times(self):
        shared = HeadGenome(ops=(UnaryOp.CONV3X3,) * 6, share_start=0,
                            branch_split=6)
        independent = HeadGenome(ops=(UnaryOp.CONV3X3,) * 6, share_start=6,
                                 branch_split=6)
        assert self.head_params(independent) == 5 * self.head_params(shared)

    def test_share_monotonicity(self, rng):
        for _ in range(100):
            ops = tuple(random_head(rng).ops)
            p_indep = self.head_params(HeadGenome(ops=ops, share_start=6,
                                                  branch_split=6))
            p_shared = self.head_params(HeadGenome(ops=ops, share_start=0,
                                                   branch_split=0))
            assert p_indep >= p_shared
            if all(op is UnaryOp.SKIP for op in ops):
                assert p_indep == p_shared == 0
            else:
                assert p_indep > p_shared

    def test_dedup_equals_single_copy_plus_predictors(self):
        """Independent oracle: hand-sum the op costs of one shared head
        copy and the predictors; must equal the 5-level graph count."""
        head = HeadGenome(ops=(UnaryOp.SEP3X3, UnaryOp.DCONV3X3, UnaryOp.SKIP,
                               UnaryOp.CONV1X1, UnaryOp.SEP5X5_D6,
                               UnaryOp.CONV3X3),
                          share_start=0, branch_split=6)
        report = cost_of(DecoderGenome(fpn=simple_fpn(), head=head))
        expected_head = 0
        ch = 256
        for op in head.ops:
            if op is UnaryOp.SKIP:
                continue
            expected_head += op_cost(op, ch, 256, 1, 1)[1]
            ch = 256
        assert report.per_section["head"].params == expected_head
        expected_preds = (op_cost("pred", 256, 80, 1, 1)[1]
                          + op_cost("pred", 256, 1, 1, 1)[1]
                          + op_cost("pred", 256, 4, 1, 1)[1])
        assert report.per_section["predictors"].params == expected_preds


class TestGraphShape:
    def test_width_doubling_laws(self):
        lo = build_graph(baseline_decoder(), fpn_width=128, head_width=128)
        hi = build_graph(baseline_decoder(), fpn_width=256, head_width=256)

        def group_params(graph, prefix):
            seen = {}
            for n in graph.nodes:
                if n.weight_group and n.weight_group.startswith(prefix):
                    seen[n.weight_group] = op_cost(
                        n.kind, n.in_channels, n.out_shape.channels, 1, 1)[1]
            return seen

        lo_blocks = group_params(lo, "fpn.b")
        hi_blocks = group_params(hi, "fpn.b")
        for key in lo_blocks:
            # quadratic in width up to the linear depthwise/affine terms
            ratio = hi_blocks[key] / lo_blocks[key]
            assert abs(ratio - 4.0) < 0.25
        lo_proj = group_params(lo, "fpn.proj")
        hi_proj = group_params(hi, "fpn.proj")
        for key in lo_proj:
            ratio = hi_proj[key] / lo_proj[key]
            assert abs(ratio - 2.0) < 0.01

    def test_params_invariant_to_resolution(self, rng):
        g = random_decoder(rng)
        a = cost_of(g, image=(512, 512))
        b = cost_of(g, image=(1333, 800))
        assert a.params == b.params

    def test_flops_scale_with_area(self, rng):
        # power-of-two sizes divide every stride exactly, so the scaling
        # law has no ceil() slack
        g = random_decoder(rng)
        a = cost_of(g, image=(512, 512))
        b = cost_of(g, image=(1024, 1024))
        assert b.flops == 4 * a.flops

    def test_totals_equal_breakdown(self, rng):
        report = cost_of(random_decoder(rng))
        assert report.flops == sum(s.flops for s in report.per_section.values())
        assert report.params == sum(s.params for s in report.per_section.values())

    def test_global_merge_nodes_follow_dangling(self, rng):
        for _ in range(50):
            g = random_decoder(rng)
            graph = build_graph(g)
            merges = [n for n in graph.nodes if n.kind == "global_merge"]
            if find_dangling(g.fpn):
                assert len(merges) == 3
                for node in merges:
                    assert len(node.inputs) == 1 + len(find_dangling(g.fpn))
            else:
                assert not merges

    def test_head_channel_flow_with_leading_skip(self):
        head = HeadGenome(ops=(UnaryOp.SKIP, UnaryOp.CONV3X3) + (UnaryOp.SKIP,) * 4,
                          share_start=0, branch_split=6)
        graph = build_graph(DecoderGenome(fpn=simple_fpn(), head=head),
                            fpn_width=64, head_width=128)
        convs = [n for n in graph.nodes
                 if n.section == "head" and n.kind == "conv3x3"]
        assert all(n.in_channels == 64 and n.out_shape.channels == 128
                   for n in convs)
        preds = [n for n in graph.nodes if n.section == "predictors"]
        assert all(n.in_channels == 128 for n in preds)

    def test_skip_only_head_leaves_predictors_on_pyramid(self):
        head = HeadGenome(ops=(UnaryOp.SKIP,) * 6, share_start=0, branch_split=0)
        report = cost_of(DecoderGenome(fpn=simple_fpn(), head=head),
                         fpn_width=64, head_width=128)
        assert report.per_section["head"].params == 0
        graph = build_graph(DecoderGenome(fpn=simple_fpn(), head=head),
                            fpn_width=64, head_width=128)
        assert all(n.in_channels == 64 for n in graph.nodes
                   if n.section == "predictors")

    def test_pyramid_levels_have_expected_strides(self, rng):
        graph = build_graph(random_decoder(rng), image=(1088, 800))
        strides = [graph.nodes[nid].out_shape.stride
                   for nid in graph.output_ids.values()]
        assert strides == [8, 16, 32, 64, 128]
        p3 = graph.nodes[graph.output_ids["p3"]].out_shape
        assert (p3.height, p3.width) == (math.ceil(1088 / 8), math.ceil(800 / 8))

    def test_rejects_bad_widths(self, rng):
        with pytest.raises(GraphError):
            build_graph(random_decoder(rng), fpn_width=0)
        with pytest.raises(GraphError):
            build_graph(random_decoder(rng), backbone_channels=(0, 8, 8))

    def test_topological_order_random_graphs(self, rng):
        for _ in range(10_000):
            graph = build_graph(random_decoder(rng), image=(64, 64),
                                backbone_channels=(8, 8, 8), fpn_width=8,
                                head_width=8, num_classes=4)
            graph.validate()  # raises on cycles or group mismatches

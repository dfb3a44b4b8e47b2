import json
import math

import numpy as np
import pytest

from decnas.search_space import (
    ActionSequence,
    AggOp,
    BasicBlock,
    DecoderGenome,
    DecodeError,
    FpnGenome,
    FpnSpace,
    HeadGenome,
    HeadSpace,
    InvalidShareIndicesError,
    SpaceError,
    SpaceTooLargeError,
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
from conftest import random_fpn_tokens, random_head_tokens, random_fpn, random_head


class TestActionSpace:
    def test_first_block_id_slot(self):
        assert action_space_at(Stage.FPN, 0) == 3  # pool is exactly {c3, c4, c5}

    def test_last_block_id_slot(self):
        # id2 of block 7: 3 inputs + 6 prior block outputs
        assert action_space_at(Stage.FPN, 6 * 5 + 1) == 9

    def test_op_and_agg_slots(self):
        assert action_space_at(Stage.FPN, 2) == 5
        assert action_space_at(Stage.FPN, 4) == 2

    def test_head_slots(self):
        for p in range(6):
            assert action_space_at(Stage.HEAD, p) == 7
        assert action_space_at(Stage.HEAD, 6) == 7  # i
        assert action_space_at(Stage.HEAD, 7) == 7  # j

    def test_invalid_position(self):
        with pytest.raises(SpaceError, match="invalid position"):
            action_space_at(Stage.FPN, 35)
        with pytest.raises(SpaceError, match="invalid position"):
            action_space_at(Stage.HEAD, 8)
        with pytest.raises(SpaceError, match="invalid position"):
            action_space_at(Stage.FPN, -1)

    def test_pool_growth_law(self):
        space = FpnSpace()
        for t in range(1, 8):
            base = (t - 1) * 5
            assert space.action_space_at(base) == 3 + t - 1
            assert space.action_space_at(base + 1) == 3 + t - 1

    def test_full_space_cardinality_formula(self):
        space = FpnSpace()
        expected = 1
        for t in range(1, 8):
            expected *= (3 + t - 1) ** 2 * 5 * 5 * 2
        assert space.cardinality() == expected
        assert math.prod(space.action_space_at(p) for p in range(35)) == expected


class TestFpnCodec:
    def test_decode_first_block_example(self):
        tokens = (0, 2, 3, 3, 0) + tuple(0 for _ in range(30))
        g = decode_fpn(ActionSequence(Stage.FPN, tokens))
        b1 = g.blocks[0]
        assert (b1.id1, b1.id2) == (0, 2)  # c3 and c5
        assert b1.op1 is UnaryOp.SKIP and b1.op2 is UnaryOp.SKIP
        assert b1.agg is AggOp.SUM

    def test_decode_bound_violation(self):
        tokens = [0] * 35
        tokens[10] = 9  # id1 of block 3, bound is 5
        with pytest.raises(DecodeError) as err:
            decode_fpn(ActionSequence(Stage.FPN, tuple(tokens)))
        assert err.value.position == 10
        assert err.value.bound == 5
        assert err.value.token == 9

    def test_sequence_roundtrip_random(self, rng):
        space = FpnSpace()
        for _ in range(1000):
            seq = ActionSequence(Stage.FPN, random_fpn_tokens(rng, space))
            assert encode_fpn(decode_fpn(seq, space), space) == seq

    def test_genome_roundtrip_random(self, rng):
        space = FpnSpace()
        for _ in range(1000):
            g = random_fpn(rng, space)
            assert decode_fpn(encode_fpn(g, space), space) == g

    def test_roundtrip_all_zeros_and_all_max(self):
        space = FpnSpace()
        zeros = ActionSequence(Stage.FPN, tuple(0 for _ in range(35)))
        assert encode_fpn(decode_fpn(zeros)) == zeros
        top = ActionSequence(Stage.FPN, tuple(
            space.action_space_at(p) - 1 for p in range(35)))
        assert encode_fpn(decode_fpn(top)) == top

    def test_wrong_stage_and_length(self):
        with pytest.raises(DecodeError):
            decode_fpn(ActionSequence(Stage.HEAD, tuple(0 for _ in range(35))))
        with pytest.raises(DecodeError):
            decode_fpn(ActionSequence(Stage.FPN, (0, 0, 0)))


class TestHeadCodec:
    def test_all_zero_tokens(self):
        g = decode_head(ActionSequence(Stage.HEAD, (0,) * 8))
        assert all(op is UnaryOp.SEP3X3 for op in g.ops)
        assert g.share_start == 0 and g.branch_split == 0

    def test_fully_level_independent(self):
        g = decode_head(ActionSequence(Stage.HEAD, (0, 0, 0, 0, 0, 0, 6, 6)))
        assert g.share_start == 6 and g.branch_split == 6

    def test_invalid_share_indices(self):
        with pytest.raises(InvalidShareIndicesError, match="invalid share indices"):
            decode_head(ActionSequence(Stage.HEAD, (0, 0, 0, 0, 0, 0, 4, 2)))

    def test_roundtrip_random(self, rng):
        space = HeadSpace()
        for _ in range(1000):
            g = random_head(rng, space)
            assert decode_head(encode_head(g, space), space) == g

    def test_sharing_partition(self, rng):
        # [0, i), [i, j), [j, 6) partition the layer indices
        for _ in range(300):
            g = random_head(rng)
            i, j = g.share_start, g.branch_split
            ranges = list(range(0, i)) + list(range(i, j)) + list(range(j, 6))
            assert ranges == list(range(6))

    def test_head_only_ops_rejected_in_fpn(self):
        with pytest.raises(ValueError, match="not in the fpn pool"):
            FpnGenome(tuple(
                BasicBlock(0, 0, UnaryOp.CONV3X3, UnaryOp.SKIP, AggOp.SUM)
                for _ in range(7)))


class TestDangling:
    @staticmethod
    def _chain_genome():
        # block 2 samples block 1; blocks 5, 6, 7 sample blocks 2, 3, 4
        ids = {2: 3, 5: 4, 6: 5, 7: 6}
        blocks = []
        for t in range(1, 8):
            pick = ids.get(t, 0)
            blocks.append(BasicBlock(pick, 0, UnaryOp.SEP3X3, UnaryOp.SKIP,
                                     AggOp.SUM))
        return FpnGenome(tuple(blocks))

    def test_no_dangling_chain(self):
        assert find_dangling(self._chain_genome()) == frozenset()

    def test_all_early_blocks_dangle(self):
        g = FpnGenome(tuple(
            BasicBlock(0, 0, UnaryOp.SEP3X3, UnaryOp.SKIP, AggOp.SUM)
            for _ in range(7)))
        assert find_dangling(g) == frozenset({1, 2, 3, 4})

    @staticmethod
    def _oracle(genome: FpnGenome) -> frozenset:
        # reachability over the raw id tokens: a pool slot can only be
        # referenced after the block that created it
        referenced = set()
        for b in genome.blocks:
            referenced.add(b.id1)
            referenced.add(b.id2)
        n = genome.n_blocks
        return frozenset(t for t in range(1, n - 2)
                         if (3 + t - 1) not in referenced)

    def test_matches_reachability_oracle(self, rng):
        space = FpnSpace()
        for _ in range(10_000):
            g = random_fpn(rng, space)
            assert find_dangling(g) == self._oracle(g)


class TestEnumerate:
    def test_single_block_count(self):
        assert sum(1 for _ in enumerate_space(1, 2, 1)) == 36

    def test_two_block_count(self):
        assert sum(1 for _ in enumerate_space(2, 1, 1)) == 144

    def test_guard(self):
        with pytest.raises(SpaceTooLargeError, match="too large"):
            list(enumerate_space(5, 1, 1))

    def test_count_matches_cardinality(self):
        space = FpnSpace(3, 2, 2)
        n = sum(1 for _ in enumerate_space(3, 2, 2))
        assert n == space.cardinality()
        assert n == math.prod(space.action_space_at(p)
                              for p in range(space.seq_len))

    def test_unique_and_deterministic(self):
        first = [canonical_json(g) for g in enumerate_space(2, 2, 2)]
        second = [canonical_json(g) for g in enumerate_space(2, 2, 2)]
        assert first == second
        assert len(set(first)) == len(first)


class TestJson:
    def test_exact_schema(self):
        g = DecoderGenome(
            fpn=FpnGenome(tuple(
                BasicBlock(0, 1, UnaryOp.SEP3X3, UnaryOp.DCONV3X3, AggOp.CAT)
                for _ in range(7))),
            head=HeadGenome(ops=(UnaryOp.CONV1X1,) * 6, share_start=2,
                            branch_split=5))
        block = '{"id1":0,"id2":1,"op1":"sep3x3","op2":"dconv3x3","agg":"cat"}'
        expected = ('{"fpn":{"blocks":[' + ",".join([block] * 7) + ']},'
                    '"head":{"ops":["conv1x1","conv1x1","conv1x1","conv1x1",'
                    '"conv1x1","conv1x1"],"i":2,"j":5}}')
        assert canonical_json(g) == expected

    def test_roundtrip(self, rng):
        for _ in range(50):
            g = DecoderGenome(fpn=random_fpn(rng), head=random_head(rng))
            assert genome_from_dict(genome_to_dict(g)) == g
        f = random_fpn(rng)
        assert genome_from_dict(genome_to_dict(f)) == f
        h = random_head(rng)
        assert genome_from_dict(genome_to_dict(h)) == h

    def test_structural_equality_hashes_identically(self, rng):
        g1 = random_fpn(rng)
        g2 = FpnGenome(tuple(BasicBlock(b.id1, b.id2, b.op1, b.op2, b.agg)
                             for b in g1.blocks))
        assert g1 == g2
        assert genome_hash(g1) == genome_hash(g2)
        assert hash(g1) == hash(g2)

    def test_canonical_json_normalizes_dict_key_order(self):
        h = HeadGenome(ops=(UnaryOp.SKIP,) * 6, share_start=1, branch_split=3)
        scrambled = {"head": {"j": 3, "i": 1, "ops": ["skip"] * 6}}
        assert canonical_json(scrambled) == canonical_json(h)

    def test_dict_rejects_garbage(self):
        with pytest.raises(ValueError):
            genome_from_dict({})
        with pytest.raises(KeyError):
            genome_from_dict({"head": {"ops": ["nope"] * 6, "i": 0, "j": 0}})

"""Transformer activation: attention normalization, cycle masking, symmetry."""

import logging

import torch

from fewseg.attention import (
    MultiheadAttention,
    TransformerActivation,
    _drop_dead_heads,
    cycle_consistency_bias,
    sincos_position_encoding,
)


class TestCycleConsistencyBias:
    def test_inconsistent_column_gets_minus_inf(self):
        # single query row: every column's best row is row 0, whose own best
        # support is column 0 (label 1).  Column 1 carries label 0, so its
        # round trip disagrees and it is masked; column 0 self-agrees.
        affinity = torch.tensor([[[9.0, 2.0]]])
        labels = torch.tensor([1.0, 0.0])
        bias = cycle_consistency_bias(affinity, labels)
        assert bias[0, 0].item() == 0.0
        assert bias[0, 1].item() == float("-inf")

    def test_consistent_tokens_unmasked(self):
        # each support's best query row points straight back at it
        affinity = torch.tensor([[[5.0, 0.0], [0.0, 5.0]]])
        labels = torch.tensor([1.0, 0.0])
        assert torch.all(cycle_consistency_bias(affinity, labels) == 0)

    def test_same_labels_are_never_masked(self):
        affinity = torch.randn(2, 6, 5)
        labels = torch.ones(5)
        assert torch.all(cycle_consistency_bias(affinity, labels) == 0)

    def test_per_head_independence(self):
        # single-row affinities: every column round-trips to the row's best
        # column.  Head 0's best is column 0, so column 1 (other label) is
        # masked; head 1's best is column 1, masking column 0 instead.
        head0 = torch.tensor([[9.0, 2.0]])
        head1 = torch.tensor([[2.0, 9.0]])
        affinity = torch.stack([head0, head1])
        labels = torch.tensor([1.0, 0.0])
        bias = cycle_consistency_bias(affinity, labels)
        assert bias[0, 0].item() == 0.0
        assert bias[0, 1].item() == float("-inf")
        assert bias[1, 0].item() == float("-inf")
        assert bias[1, 1].item() == 0.0

    def test_global_argmax_column_always_survives(self):
        # the column holding the largest affinity entry round-trips to itself,
        # whatever the labels, so at least one column is always unmasked
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            affinity = torch.randn(3, 7, 6, generator=g)
            labels = (torch.rand(6, generator=g) < 0.5).float()
            bias = cycle_consistency_bias(affinity, labels)
            assert bool((bias == 0).any(dim=1).all())

    def test_dead_head_guard_unmasks_and_warns(self, caplog):
        # cannot occur for real affinities (see above); the defensive guard
        # is exercised directly
        all_masked = torch.ones(2, 4, dtype=torch.bool)
        with caplog.at_level(logging.WARNING, logger="fewseg.attention"):
            out = _drop_dead_heads(all_masked)
        assert not out.any()
        assert "falling back" in caplog.text

    def test_guard_leaves_live_heads_alone(self):
        partial = torch.tensor([[True, False], [True, True]])
        out = _drop_dead_heads(partial)
        assert out[0].tolist() == [True, False]
        assert out[1].tolist() == [False, False]


class TestAttentionMechanics:
    def test_rows_sum_to_one_every_head_and_layer(self):
        torch.manual_seed(0)
        net = TransformerActivation(dim=32, layers=2, heads=4)
        q = torch.randn(32, 6, 6)
        s = torch.randn(50, 32)
        labels = (torch.rand(50) < 0.5).float()
        net(q, s, labels, store_attention=True)
        assert len(net.last_self_attention) == 2
        assert len(net.last_cross_attention) == 2
        for maps in (net.last_self_attention, net.last_cross_attention):
            for attn in maps:
                sums = attn.sum(dim=-1)
                torch.testing.assert_close(sums, torch.ones_like(sums),
                                           atol=1e-5, rtol=0)

    def test_cross_attention_is_convex_combination(self):
        torch.manual_seed(1)
        mha = MultiheadAttention(16, 1)
        torch.nn.init.eye_(mha.v_proj.weight)
        torch.nn.init.zeros_(mha.v_proj.bias)
        torch.nn.init.eye_(mha.out_proj.weight)
        torch.nn.init.zeros_(mha.out_proj.bias)
        q = torch.randn(5, 16)
        s = torch.randn(7, 16)
        out, attn = mha(q, s)
        # identity value/output projections: each output row is its attention
        # row (non-negative, summing to 1) applied to the support rows
        assert torch.all(attn >= 0)
        torch.testing.assert_close(out, attn[0] @ s, atol=1e-5, rtol=1e-5)

    def test_masking_never_touches_self_attention(self):
        torch.manual_seed(2)
        q = torch.randn(16, 4, 4)
        s = torch.randn(20, 16)
        labels = (torch.rand(20) < 0.5).float()
        masked = TransformerActivation(dim=16, layers=1, heads=2, cycle_mask=True)
        unmasked = TransformerActivation(dim=16, layers=1, heads=2, cycle_mask=False)
        unmasked.load_state_dict(masked.state_dict())
        masked(q, s, labels, store_attention=True)
        unmasked(q, s, labels, store_attention=True)
        torch.testing.assert_close(masked.last_self_attention[0],
                                   unmasked.last_self_attention[0])

    def test_permutation_invariance_over_support_tokens(self):
        torch.manual_seed(3)
        net = TransformerActivation(dim=16, layers=2, heads=2, cycle_mask=False)
        q = torch.randn(16, 4, 4)
        s = torch.randn(30, 16)
        labels = (torch.rand(30) < 0.5).float()
        out = net(q, s, labels)
        perm = torch.randperm(30)
        out_perm = net(q, s[perm], labels[perm])
        torch.testing.assert_close(out, out_perm, atol=1e-5, rtol=1e-5)

    def test_output_shape_matches_input(self):
        net = TransformerActivation(dim=16, layers=1, heads=2)
        q = torch.randn(16, 5, 7)
        out = net(q, torch.randn(9, 16), torch.ones(9))
        assert out.shape == (16, 5, 7)


class TestMaskedAttentionIntegration:
    def test_masked_column_attention_is_exactly_zero(self):
        """A support token that cycles to a conflicting label gets zero
        attention weight in every row after the softmax."""
        dim = 8
        mha = MultiheadAttention(dim, 1)
        for proj in (mha.q_proj, mha.k_proj):
            torch.nn.init.eye_(proj.weight)
            torch.nn.init.zeros_(proj.bias)
        e0 = torch.zeros(dim)
        e0[0] = 4.0
        e1 = torch.zeros(dim)
        e1[1] = 4.0
        queries = torch.stack([e0, e1])
        # support token 0 matches query 0; support token 1 is a weak mixture
        # whose best query (q0) prefers support 0, and the labels disagree
        supports = torch.stack([e0, 0.5 * e0 + 0.2 * e1])
        labels = torch.tensor([1.0, 0.0])
        _, attn = mha(queries, supports, labels)
        assert torch.all(attn[0, :, 1] == 0.0)
        sums = attn.sum(-1)
        torch.testing.assert_close(sums, torch.ones_like(sums))


def test_position_encoding_shape_and_distinctness():
    enc = sincos_position_encoding(5, 7, 32)
    assert enc.shape == (35, 32)
    assert enc.abs().max() <= 1.0
    assert not torch.allclose(enc[0], enc[1])
    assert not torch.allclose(enc[0], enc[7])

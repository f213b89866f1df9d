import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewlm.errors import CapacityError, ContractError
from viewlm.masking import (SegmentLayout, additive_mask, block_causal_mask, causal_mask,
                            pack_views)
from viewlm.tokenizer import PRED

NEG = -np.inf


class TestAdditiveMask:
    def test_k1(self):
        np.testing.assert_array_equal(additive_mask(1), [[0.0]])

    def test_k2(self):
        np.testing.assert_array_equal(additive_mask(2), [[0.0, NEG], [0.0, 0.0]])

    def test_k4_strict_upper_triangle(self):
        m = additive_mask(4)
        assert np.isneginf(m).sum() == 6
        assert (m[np.tril_indices(4)] == 0.0).all()

    def test_k0_rejected(self):
        with pytest.raises(ContractError):
            additive_mask(0)

    def test_cache_returns_equal_mask(self):
        np.testing.assert_array_equal(causal_mask(5), additive_mask(5))
        assert not causal_mask(5).flags.writeable


class TestBlockCausalMask:
    def test_two_by_two_blocks(self):
        """text=2, k=0, code=2: zeros exactly at the two in-block triangles."""
        _, _, layout = pack_views([65, 66], [67, 68], k=0)
        m = block_causal_mask(layout, 4)
        zeros = {(0, 0), (1, 0), (1, 1), (2, 2), (3, 2), (3, 3)}
        for i in range(4):
            for j in range(4):
                if (i, j) in zeros:
                    assert m[i, j] == 0.0
                else:
                    assert np.isneginf(m[i, j])

    def test_cross_block_always_masked(self):
        _, _, layout = pack_views([65, 66, 67], [68, 69], k=2)
        m = block_causal_mask(layout, layout.total_length)
        b1_end = layout.block1[1]
        assert np.isneginf(m[b1_end:, :b1_end]).all()
        assert np.isneginf(m[:b1_end, b1_end:]).all()

    def test_padding_rows_self_attend(self):
        _, _, layout = pack_views([65], [66], k=0)
        m = block_causal_mask(layout, 4)
        assert m[2, 2] == 0.0 and m[3, 3] == 0.0
        assert np.isneginf(m[2, :2]).all() and np.isneginf(m[3, :3]).all()

    def test_layout_longer_than_sequence_rejected(self):
        _, _, layout = pack_views([65, 66], [67, 68], k=1)
        with pytest.raises(ContractError):
            block_causal_mask(layout, 3)

    def test_block_interior_equals_causal_mask(self):
        """Inside one block the mask is exactly the plain causal triangle."""
        _, _, layout = pack_views([65], [66, 67, 68], k=0)
        m = block_causal_mask(layout, 4)
        np.testing.assert_array_equal(m[1:, 1:], additive_mask(3))
        np.testing.assert_array_equal(m[:1, :1], additive_mask(1))


class TestPackViews:
    def test_k0_append(self):
        tokens, positions, layout = pack_views([65], [66, 67], k=0)
        np.testing.assert_array_equal(tokens, [65, 66, 67])
        np.testing.assert_array_equal(positions, [0, 0, 1])
        assert (layout.text_size, layout.code_size) == (1, 2)

    def test_k2_append_pred_offsets(self):
        tokens, _, layout = pack_views([65], [66, 67], k=2)
        np.testing.assert_array_equal(tokens[1:3], [PRED, PRED])
        assert layout.block1 == (0, 3)
        assert layout.predictor_read_index == 2

    def test_prepend_pred_at_offset_zero(self):
        tokens, _, layout = pack_views([65, 66], [67], k=1, placement="prepend")
        assert tokens[0] == PRED
        assert layout.text_start == 1
        assert layout.predictor_read_index == 2  # last text token, causally complete

    def test_direction_swaps_blocks(self):
        tokens, positions, layout = pack_views([65, 66], [67, 68, 69], k=1,
                                               direction="code_to_text")
        np.testing.assert_array_equal(tokens, [67, 68, 69, PRED, 65, 66])
        assert layout.code_start == 0 and layout.text_start == 4
        assert layout.source_view == "code" and layout.target_view == "text"
        np.testing.assert_array_equal(positions, [0, 1, 2, 3, 0, 1])

    def test_length_preserving(self):
        tokens, _, layout = pack_views([65, 66, 67], [68, 69], k=3)
        assert len(tokens) == 3 + 3 + 2 == layout.total_length

    def test_overflow_rejected(self):
        with pytest.raises(CapacityError):
            pack_views([65] * 10, [66] * 10, k=2, max_seq_len=20)

    def test_empty_view_rejected(self):
        with pytest.raises(ContractError):
            pack_views([], [66], k=0)

    def test_positions_restart_per_block(self):
        _, positions, layout = pack_views([65, 66], [67, 68, 69], k=2)
        np.testing.assert_array_equal(positions, [0, 1, 2, 3, 0, 1, 2])
        assert positions[layout.block2[0]] == 0

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 4),
           st.sampled_from(["append", "prepend"]),
           st.sampled_from(["text_to_code", "code_to_text"]))
    @settings(max_examples=60, deadline=None)
    def test_layout_invariants_property(self, nt, nc, k, placement, direction):
        text, code = list(range(65, 65 + nt)), list(range(97, 97 + nc))
        tokens, positions, layout = pack_views(text, code, k, placement, direction)
        assert len(tokens) == nt + nc + k
        assert layout.block1[1] == layout.block2[0]
        assert layout.block2[1] == len(tokens)
        # the two view spans recover the original ids
        ts, te = layout.view_span("text")
        cs, ce = layout.view_span("code")
        assert list(tokens[ts:te]) == text
        assert list(tokens[cs:ce]) == code
        assert (tokens == PRED).sum() == k


class TestSegmentLayoutValidation:
    def test_overlapping_spans_rejected(self):
        positions = np.array([0, 1, 0, 1])
        with pytest.raises(ContractError):
            SegmentLayout(text_start=0, text_size=3, pred_size=0, code_start=2,
                          code_size=2, positions=positions)

    def test_positions_must_restart(self):
        with pytest.raises(ContractError):
            SegmentLayout(text_start=0, text_size=2, pred_size=0, code_start=2,
                          code_size=2, positions=np.arange(4))

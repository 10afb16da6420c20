import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import streamvqa.autograd as ag
from streamvqa.clip_encoder import MlpProjector, PrefixMaskSpec, build_prefix_mask, \
    encode_clip, init_summarization, merge_adjacent_tokens, split_merged_tokens
from streamvqa.lm import LmConfig, MiniLm

RNG = np.random.default_rng(21)


# -- adjacent token merging ----------------------------------------------------------


def test_merge_shape_at_paper_scale():
    raw = RNG.normal(size=(2, 256, 32))  # stand-in channel count
    merged = merge_adjacent_tokens(raw)
    assert merged.shape == (2, 64, 128)  # 75% fewer tokens, 4x channels


def test_merge_four_tokens_concatenate_in_order():
    raw = np.arange(4 * 3, dtype=float).reshape(1, 4, 3)
    merged = merge_adjacent_tokens(raw)
    np.testing.assert_array_equal(merged[0, 0], np.arange(12))


@given(t=st.integers(1, 4), groups=st.integers(1, 8), c=st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_merge_split_roundtrip_identity(t, groups, c):
    raw = np.random.default_rng(0).normal(size=(t, 4 * groups, c))
    merged = merge_adjacent_tokens(raw)
    assert merged.size == raw.size
    np.testing.assert_array_equal(split_merged_tokens(merged, c), raw)


def test_merge_grid_window_variant():
    raw = RNG.normal(size=(1, 16, 2))  # 4x4 grid
    merged = merge_adjacent_tokens(raw, grid_window=True)
    assert merged.shape == (1, 4, 8)
    # first merged token = tokens (0, 1, 4, 5) of the row-major grid
    np.testing.assert_array_equal(merged[0, 0],
                                  np.concatenate([raw[0, 0], raw[0, 1], raw[0, 4], raw[0, 5]]))
    with pytest.raises(ValueError):
        merge_adjacent_tokens(RNG.normal(size=(1, 12, 2)), grid_window=True)  # not a grid


def test_merge_rejects_indivisible_tokens():
    with pytest.raises(ValueError):
        merge_adjacent_tokens(RNG.normal(size=(2, 10, 3)))


# -- summarization tokens -------------------------------------------------------------


def test_summarization_p1_is_per_frame_mean():
    f = RNG.normal(size=(3, 8, 5))
    s, s_hat = init_summarization(f, 1)
    np.testing.assert_allclose(s[:, 0], f.mean(axis=1))
    np.testing.assert_allclose(s_hat, f.reshape(-1, 5).mean(axis=0, keepdims=True))


def test_summarization_constant_input():
    f = np.full((2, 8, 3), 2.5)
    s, s_hat = init_summarization(f, 2)
    np.testing.assert_allclose(s, np.full((2, 2, 3), 2.5))
    np.testing.assert_allclose(s_hat, np.full((1, 3), 2.5))


def test_summarization_bins_n64_p4():
    f = RNG.normal(size=(1, 64, 2))
    s, _ = init_summarization(f, 4)
    for j in range(4):
        np.testing.assert_allclose(s[0, j], f[0, 16 * j:16 * (j + 1)].mean(axis=0))


def test_summarization_commutes_with_frame_permutation():
    f = RNG.normal(size=(5, 8, 3))
    perm = [3, 0, 4, 1, 2]
    s, _ = init_summarization(f, 2)
    s_p, _ = init_summarization(f[perm], 2)
    np.testing.assert_array_equal(s[perm], s_p)


def test_summarization_excludes_padding_from_global_mean():
    f = RNG.normal(size=(4, 8, 3))
    _, s_hat = init_summarization(f, 2, valid_frames=2)
    np.testing.assert_allclose(s_hat, f[:2].reshape(-1, 3).mean(axis=0, keepdims=True))


def test_summarization_p_out_of_range():
    f = RNG.normal(size=(2, 8, 3))
    with pytest.raises(ValueError):
        init_summarization(f, 8)  # P must stay below N
    with pytest.raises(ValueError):
        init_summarization(f, 0)


# -- prefix mask -----------------------------------------------------------------------


def test_prefix_mask_reduces_to_causal_without_text():
    spec = PrefixMaskSpec(tn=4, tp=2, tt=0)
    np.testing.assert_array_equal(build_prefix_mask(spec).matrix,
                                  np.tril(np.ones((6, 6), dtype=np.uint8)))


def test_prefix_mask_small_example():
    mask = build_prefix_mask(PrefixMaskSpec(tn=2, tp=1, tt=1))
    np.testing.assert_array_equal(mask.matrix[3], [0, 0, 1, 1])


@given(tn=st.integers(0, 12), tp=st.integers(1, 6), tt=st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_prefix_mask_row_counts(tn, tp, tt):
    m = build_prefix_mask(PrefixMaskSpec(tn=tn, tp=tp, tt=tt)).matrix
    for i in range(tn + tp):
        assert m[i].sum() == i + 1  # purely causal rows
    for j in range(tt):
        row = tn + tp + j
        assert m[row].sum() == tp + j + 1  # summaries + causal text prefix + self
        assert m[row, :tn].sum() == 0


# -- projector and clip condensation ----------------------------------------------------


def test_projector_widths():
    proj = MlpProjector(12, 8, RNG)
    out = proj(RNG.normal(size=(5, 12)))
    assert out.shape == (5, 8)
    assert proj.params()["w1"].shape == (12, 8)   # hidden width equals out width
    assert proj.params()["w2"].shape == (8, 8)
    with pytest.raises(ValueError):
        proj(RNG.normal(size=(5, 11)))


def make_encoder(tap=1, layers=2, dim=16):
    cfg = LmConfig(vocab_size=7, dim=dim, n_layers=layers, n_heads=2, mlp_ratio=2,
                   max_seq_len=128, tap_layer=tap)
    return MiniLm(cfg, np.random.default_rng(5))


def test_encode_clip_shapes():
    t, n, c, p = 4, 8, 6, 2
    lm = make_encoder()
    proj = MlpProjector(c, 16, np.random.default_rng(6))
    f = RNG.normal(size=(t, n, c))
    s, _ = init_summarization(f, p)
    h = encode_clip(f, s, proj, lm)
    assert h.shape == (t * p, 16)
    # compression ratio versus the clip feature tokens
    assert (t * n) // (t * p) == n // p


def test_encode_clip_single_row():
    lm = make_encoder()
    proj = MlpProjector(6, 16, np.random.default_rng(6))
    f = RNG.normal(size=(1, 4, 6))
    s, _ = init_summarization(f, 1)
    assert encode_clip(f, s, proj, lm).shape == (1, 16)


def test_encode_clip_depends_on_summaries_not_text():
    lm = make_encoder()
    proj = MlpProjector(6, 16, np.random.default_rng(6))
    f = RNG.normal(size=(2, 8, 6))
    s, _ = init_summarization(f, 2)
    h1 = encode_clip(f, s, proj, lm)
    h2 = encode_clip(f, s, proj, lm)
    np.testing.assert_array_equal(h1.data, h2.data)  # no hidden state, pure function
    h3 = encode_clip(f, s + 0.1, proj, lm)
    assert np.any(h3.data != h1.data)


def test_prefix_guarantee_on_packed_clip():
    # under the prefix mask with one attention layer, text rows are exactly
    # invariant to feature-span perturbations
    t, n, c, p = 2, 8, 6, 2
    lm = make_encoder(tap=1, layers=1)
    proj = MlpProjector(c, 16, np.random.default_rng(6))
    f = RNG.normal(size=(t, n, c))
    s, _ = init_summarization(f, p)
    ids = RNG.integers(0, 7, size=3)
    from streamvqa.lm import PackedSequence, Segment
    mask = build_prefix_mask(PrefixMaskSpec(tn=t * n, tp=t * p, tt=3))

    def run(features):
        seq = PackedSequence([
            Segment("clip-features", vectors=proj(features.reshape(t * n, c))),
            Segment("summarization", vectors=proj(s.reshape(t * p, c))),
            Segment("text", tokens=ids),
        ])
        return lm.forward(seq, mask).logits.data

    base = run(f)
    for trial in range(10):
        noisy = f + np.random.default_rng(trial).normal(size=f.shape) * 5.0
        out = run(noisy)
        np.testing.assert_array_equal(base[t * n + t * p:], out[t * n + t * p:])

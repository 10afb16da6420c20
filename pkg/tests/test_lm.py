import numpy as np
import pytest

import streamvqa.autograd as ag
from streamvqa.lm import AttentionMask, LmConfig, MiniLm, PackedSequence, Segment, \
    build_causal_mask

RNG = np.random.default_rng(7)


def small_lm(n_layers=2, tap=None, dim=16, heads=2, vocab=11):
    cfg = LmConfig(vocab_size=vocab, dim=dim, n_layers=n_layers, n_heads=heads,
                   mlp_ratio=2, max_seq_len=64, tap_layer=tap or n_layers)
    return MiniLm(cfg, np.random.default_rng(3))


# -- masks -------------------------------------------------------------------------


def test_causal_mask_small_cases():
    np.testing.assert_array_equal(build_causal_mask(3).matrix,
                                  [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
    np.testing.assert_array_equal(build_causal_mask(1).matrix, [[1]])


@pytest.mark.parametrize("length", [1, 2, 5, 17])
def test_causal_mask_row_counts(length):
    m = build_causal_mask(length).matrix
    np.testing.assert_array_equal(m.sum(axis=1), np.arange(1, length + 1))


def test_mask_validation():
    with pytest.raises(ValueError):
        AttentionMask(np.ones((3, 2)))
    anticausal = np.tril(np.ones((3, 3)))
    anticausal[0, 2] = 1
    with pytest.raises(ValueError):
        AttentionMask(anticausal)
    no_diag = np.tril(np.ones((3, 3)))
    no_diag[1, 1] = 0
    with pytest.raises(ValueError):
        AttentionMask(no_diag)
    with pytest.raises(ValueError):
        AttentionMask(np.tril(np.full((3, 3), 2.0)))


# -- config ------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, dim=15, n_layers=2, n_heads=2)
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, dim=16, n_layers=2, n_heads=2, tap_layer=3)


# -- forward -----------------------------------------------------------------------


def test_tap_at_top_equals_prelogit_hidden():
    lm_top = small_lm(n_layers=3, tap=3)
    ids = RNG.integers(0, 11, size=9)
    seq = PackedSequence.of_tokens(ids)
    res = lm_top.forward(seq, build_causal_mask(9))
    # re-derive the logits from the tap output through the final norm + head
    p = lm_top.params()
    relogits = ag.add(ag.matmul(
        ag.layer_norm(res.hidden_at_tap, p["ln_f.g"], p["ln_f.b"]), p["head"]),
        p["head_b"])
    np.testing.assert_array_equal(relogits.data, res.logits.data)


def test_empty_vector_segment_is_degenerate_packing():
    lm = small_lm()
    ids = RNG.integers(0, 11, size=6)
    plain = lm.forward(PackedSequence.of_tokens(ids), build_causal_mask(6))
    empty = ag.tensor(np.zeros((0, 16)))
    seq = PackedSequence([
        Segment("memory", vectors=empty),
        Segment("text", tokens=ids),
    ])
    packed = lm.forward(seq, build_causal_mask(6))
    np.testing.assert_array_equal(plain.logits.data, packed.logits.data)


def test_single_layer_mask_blocks_segment_exactly():
    # one attention layer: rows that cannot see a segment are bit-identical
    # under arbitrary perturbations of that segment's injected vectors
    lm = small_lm(n_layers=1, tap=1)
    ids = RNG.integers(0, 11, size=4)
    vec = RNG.normal(size=(5, 16))

    length = 9
    mask = np.tril(np.ones((length, length), dtype=np.uint8))
    mask[5:, :5] = 0  # text rows cannot see the injected block

    def run(v):
        seq = PackedSequence([
            Segment("memory", vectors=ag.tensor(v)),
            Segment("text", tokens=ids),
        ])
        return lm.forward(seq, AttentionMask(mask))

    base = run(vec)
    for trial in range(20):
        perturbed = run(vec + np.random.default_rng(trial).normal(size=vec.shape) * 10.0)
        np.testing.assert_array_equal(base.logits.data[5:], perturbed.logits.data[5:])
        assert np.any(base.logits.data[:5] != perturbed.logits.data[:5])


def test_causality_logits_invariant_to_future():
    lm = small_lm(n_layers=2)
    ids = RNG.integers(0, 11, size=8)
    res = lm.forward(PackedSequence.of_tokens(ids), build_causal_mask(8))
    mutated = ids.copy()
    mutated[5:] = (mutated[5:] + 3) % 11
    res2 = lm.forward(PackedSequence.of_tokens(mutated), build_causal_mask(8))
    np.testing.assert_array_equal(res.logits.data[:5], res2.logits.data[:5])


def test_batch_permutation_equivariance():
    lm = small_lm()
    x = ag.tensor(RNG.normal(size=(3, 7, 16)))
    mask = build_causal_mask(7)
    out = lm.forward_embedded(x, mask).logits.data
    perm = [2, 0, 1]
    out_p = lm.forward_embedded(ag.tensor(x.data[perm]), mask).logits.data
    np.testing.assert_array_equal(out[perm], out_p)


def test_gradient_flows_into_injected_vectors():
    lm = small_lm()
    vec = ag.tensor(RNG.normal(size=(4, 16)), requires_grad=True)
    seq = PackedSequence([
        Segment("memory", vectors=vec),
        Segment("text", tokens=RNG.integers(0, 11, size=3)),
    ])
    res = lm.forward(seq, build_causal_mask(7))
    ag.tsum(ag.mul(res.logits, res.logits)).backward()
    assert vec.grad is not None
    assert np.isfinite(vec.grad).all()
    assert np.any(vec.grad != 0)


def test_sequence_too_long_and_bad_mask_raise():
    lm = small_lm()
    with pytest.raises(ValueError):
        lm.forward(PackedSequence.of_tokens(RNG.integers(0, 11, size=65)),
                   build_causal_mask(65))
    with pytest.raises(ValueError):
        lm.forward(PackedSequence.of_tokens(RNG.integers(0, 11, size=5)),
                   build_causal_mask(6))


# -- generation ---------------------------------------------------------------------


def test_generate_zero_budget_is_empty():
    lm = small_lm()
    seq = PackedSequence.of_tokens(RNG.integers(0, 11, size=4))
    assert lm.generate(seq, max_new=0) == []


def test_generate_greedy_is_deterministic():
    lm = small_lm()
    seq = PackedSequence.of_tokens(RNG.integers(0, 11, size=4))
    a = lm.generate(seq, max_new=5)
    b = lm.generate(seq, max_new=5)
    assert a == b and len(a) == 5


def test_generate_stops_at_eos():
    lm = small_lm()
    seq = PackedSequence.of_tokens(RNG.integers(0, 11, size=4))
    first = lm.generate(seq, max_new=1)[0]
    out = lm.generate(seq, max_new=8, eos_id=first)
    assert out == [first]


def test_generate_does_not_mutate_input():
    lm = small_lm()
    seq = PackedSequence.of_tokens(RNG.integers(0, 11, size=4))
    lm.generate(seq, max_new=3)
    assert len(seq) == 4


def test_checkpoint_state_roundtrip(tmp_path):
    from streamvqa.autograd import load_checkpoint, save_checkpoint
    lm = small_lm()
    path = tmp_path / "lm.vstt"
    save_checkpoint(path, lm.params())
    lm2 = small_lm()
    lm2.load_state(load_checkpoint(path))
    ids = RNG.integers(0, 11, size=5)
    r1 = lm.forward(PackedSequence.of_tokens(ids), build_causal_mask(5))
    r2 = lm2.forward(PackedSequence.of_tokens(ids), build_causal_mask(5))
    np.testing.assert_array_equal(r1.logits.data, r2.logits.data)

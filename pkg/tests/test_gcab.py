import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedcil.autodiff import Linear, ShapeError, Tensor, ops
from gatedcil.gcab import (
    ClassAttention,
    Gcab,
    MaskEmbedding,
    TaskMaskSet,
    classify,
    compute_mask,
    gcab_forward,
    multi_pass_predict,
    task_slices,
)
from oracles import gcab_weights, straight_gcab


def _random_block(rng, dim=4, heads=1, ratio=2.0, act="none"):
    blk = ClassAttention(dim, heads, ratio, rng, act)
    for _, t in blk.named_tensors():
        t.data += rng.normal(0.0, 0.3, size=t.shape)
    return blk


def test_mask_half_at_zero_embedding():
    emb = Tensor(np.zeros((2, 3)))
    np.testing.assert_array_equal(compute_mask(emb, 2, 1.0).data, [0.5, 0.5])


def test_mask_closed_form_ln3():
    emb = Tensor(np.array([[np.log(3.0)], [-np.log(3.0)]]))
    np.testing.assert_allclose(compute_mask(emb, 1, 1.0).data, [0.75, 0.25], rtol=0, atol=1e-12)


def test_mask_saturation_at_smax():
    emb = Tensor(np.array([[0.01], [-0.01]]))
    expected = 1.0 / (1.0 + np.exp(-8.0))
    np.testing.assert_allclose(compute_mask(emb, 1, 800.0).data, [expected, 1 - expected], rtol=0, atol=1e-12)
    np.testing.assert_allclose(expected, 0.99966, atol=5e-6)


def test_mask_errors():
    emb = Tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        compute_mask(emb, 4, 1.0)
    with pytest.raises(ValueError):
        compute_mask(emb, 1, 0.0)


def test_embedding_gives_two_physical_masks():
    me = MaskEmbedding(4, 8, 3, np.random.default_rng(0))
    masks = me.masks(2, 5.0)
    assert masks.m_i.shape == (4,) and masks.m_2.shape == (8,)
    assert masks.m_qk is masks.m_i and masks.m_v is masks.m_i and masks.m_1 is masks.m_i and masks.m_o is masks.m_i


@pytest.mark.parametrize("seed", range(50))
def test_gcab_forward_matches_straight_line(seed):
    rng = np.random.default_rng([seed, 21])
    dim, heads = (4, 1) if seed % 2 == 0 else (8, 2)
    blk = _random_block(rng, dim, heads, 1.5, "gelu" if seed % 5 == 0 else "none")
    n = int(rng.integers(1, 5))
    feats = rng.normal(size=(2, n, dim))
    m_i, m_2 = rng.uniform(size=dim), rng.uniform(size=blk.hidden)
    out = gcab_forward(Tensor(feats), TaskMaskSet.constant(m_i, m_2), blk).data
    w = gcab_weights(blk)
    for i in range(2):
        np.testing.assert_allclose(out[i], straight_gcab(feats[i], m_i, m_2, w), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_all_ones_masks_equal_unmasked_block_exactly(seed):
    rng = np.random.default_rng(seed)
    blk = _random_block(rng, 8, 2)
    feats = Tensor(rng.normal(size=(3, 4, 8)))
    gated = gcab_forward(feats, TaskMaskSet.constant(np.ones(8), np.ones(blk.hidden)), blk).data
    np.testing.assert_array_equal(gated, gcab_forward(feats, None, blk).data)


def test_zero_input_mask_hand_trace():
    rng = np.random.default_rng(4)
    blk = _random_block(rng, 4, 1)
    for lin in (blk.q, blk.k, blk.v, blk.o, blk.fc1, blk.fc2):
        lin.bias.data[...] = 0.0
    feats = rng.normal(size=(1, 3, 4))
    m_2 = rng.uniform(size=blk.hidden)
    out = gcab_forward(Tensor(feats), TaskMaskSet.constant(np.zeros(4), m_2), blk).data[0]
    # Q = K = V = 0: attention is uniform over zero values, so O = 0 and b' = theta;
    # the masked theta feeds nothing into the MLP, so f = 0.
    theta = blk.class_token.data[0]
    o = np.zeros(4)
    u = (theta * 0.0) @ blk.fc1.weight.data
    expected = (u * m_2) @ blk.fc2.weight.data + o
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out, np.zeros(4))


def test_mask_shape_mismatch_raises():
    blk = _random_block(np.random.default_rng(0), 4, 1)
    with pytest.raises(ShapeError):
        gcab_forward(Tensor(np.zeros((1, 2, 4))), TaskMaskSet.constant(np.ones(3), np.ones(blk.hidden)), blk)
    with pytest.raises(ShapeError):
        gcab_forward(Tensor(np.zeros((1, 2, 5))), None, blk)


def test_classify_identity_head():
    head = Linear(4, 3, np.random.default_rng(0))
    head.weight.data = np.eye(4)[:, :3].copy()
    f = Tensor(np.array([[1.0, -2.0, 3.0, 4.0]]))
    np.testing.assert_array_equal(classify(f, Tensor(np.ones(4)), head).data, [[1.0, -2.0, 3.0]])


def test_classify_zero_mask_zero_logits():
    head = Linear(4, 3, np.random.default_rng(0))
    f = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
    np.testing.assert_array_equal(classify(f, Tensor(np.zeros(4)), head).data, np.zeros((2, 3)))
    np.testing.assert_array_equal(classify(f, Tensor(np.zeros(4)), head, layernorm=True).data, np.zeros((2, 3)))


def test_classify_hand_product():
    rng = np.random.default_rng(3)
    head = Linear(4, 3, rng)
    head.bias.data = rng.normal(size=3)
    f, m = rng.normal(size=(1, 4)), rng.uniform(size=4)
    expected = (f * m) @ head.weight.data + head.bias.data
    np.testing.assert_allclose(classify(Tensor(f), Tensor(m), head).data, expected, rtol=0, atol=1e-14)


def test_classify_missing_head():
    with pytest.raises(KeyError):
        classify(Tensor(np.zeros((1, 4))), None, None)
    g = Gcab(4, 1, 2.0, 2, np.random.default_rng(0))
    with pytest.raises(KeyError):
        g.head(1)


def test_layernorm_classifier_keeps_masked_channels_inert():
    rng = np.random.default_rng(2)
    head = Linear(4, 2, rng)
    f = Tensor(rng.normal(size=(3, 4)))
    m = np.array([1.0, 0.0, 1.0, 0.0])
    before = classify(f, Tensor(m), head, layernorm=True).data
    head.weight.data[[1, 3]] += 10.0
    np.testing.assert_array_equal(classify(f, Tensor(m), head, layernorm=True).data, before)


def _two_task_gcab(rng):
    g = Gcab(4, 1, 2.0, 3, rng, classifier_layernorm=False)
    for _, t in g.named_tensors():
        t.data += rng.normal(0.0, 0.3, size=t.shape)
    g.add_head(2, rng)
    g.add_head(3, rng)
    return g


def test_multi_pass_equals_stitched_single_passes():
    rng = np.random.default_rng(7)
    g = _two_task_gcab(rng)
    feats = {1: Tensor(rng.normal(size=(2, 3, 4))), 2: Tensor(rng.normal(size=(2, 3, 4)))}
    masks = {t: g.mask_embedding.masks(t, 800.0) for t in (1, 2)}
    out, per_task = multi_pass_predict(lambda t: feats[t], g, lambda t: masks[t], 2)
    stitched = np.concatenate([g.task_logits(feats[t], t, masks[t])[0].data for t in (1, 2)], axis=-1)
    np.testing.assert_array_equal(out.data, stitched)
    assert out.shape == (2, 5)
    single, _ = multi_pass_predict(lambda t: feats[t], g, lambda t: masks[t], 1)
    np.testing.assert_array_equal(single.data, per_task[0].data)


def test_multi_pass_width_three_tasks():
    rng = np.random.default_rng(8)
    g = _two_task_gcab(rng)
    g.add_head(4, rng)
    feats = Tensor(rng.normal(size=(1, 2, 4)))
    out, _ = multi_pass_predict(lambda t: feats, g, lambda t: g.mask_embedding.masks(t, 800.0), 3)
    assert out.shape == (1, 9)


def test_task_slices():
    assert task_slices([2, 3, 1]) == [slice(0, 2), slice(2, 5), slice(5, 6)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1000.0))
def test_mask_entries_in_unit_interval(seed, s):
    me = MaskEmbedding(4, 6, 2, np.random.default_rng(seed))
    masks = me.masks(1, s)
    for m in (masks.m_i.data, masks.m_2.data):
        assert ((m >= 0) & (m <= 1)).all()
        if s <= 100:  # |s * a| <= 10 here, far from float saturation
            assert ((m > 0) & (m < 1)).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_zeroed_hidden_channels_do_not_affect_output(seed):
    rng = np.random.default_rng(seed)
    blk = _random_block(rng, 4, 1)
    feats = Tensor(rng.normal(size=(1, 3, 4)))
    m_2 = (rng.uniform(size=blk.hidden) > 0.5).astype(float)
    masks = TaskMaskSet.constant(np.ones(4), m_2)
    before = gcab_forward(feats, masks, blk).data
    blk.fc2.weight.data[m_2 == 0] += rng.normal(size=(int((m_2 == 0).sum()), 4))
    np.testing.assert_array_equal(gcab_forward(feats, masks, blk).data, before)

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from stlayout.correspondence import pos_neg_values
from stlayout.errors import BoundsError, ShapeError, ValidationError
from stlayout.layout import LayoutVideo, TokenAttributeMap, compute_areas
from stlayout.st_attention import (
    ConditionMap,
    LambdaSchedule,
    SizeRegularizer,
    build_cross_condition_map,
    build_self_condition_map,
    build_size_regularizer,
    modulated_attention,
    modulation_term,
    sliced_modulated_attention,
    vanilla_attention,
)
from strategies import layouts, random_layout


def random_instance(rng, queries=5, keys=9, dim=4):
    q = rng.standard_normal((queries, dim))
    k = rng.standard_normal((keys, dim))
    v = rng.standard_normal((keys, 3))
    r = (rng.random((queries, keys)) < 0.4).astype(float)
    s = rng.random((queries, keys)) * 0.9
    return q, k, v, r, s


# condition maps ----------------------------------------------------------------


def test_single_attribute_self_map_all_ones():
    lay = LayoutVideo(np.ones((2, 2, 3), int))
    assert (build_self_condition_map(lay, 1).values == 1).all()


def test_two_frame_self_map_by_enumeration():
    lay = LayoutVideo(np.array([[[1, 2]], [[1, 2]]]))
    cmap = build_self_condition_map(lay, 0)
    labels = [1, 2]
    keys = [1, 2, 1, 2]
    expected = [[1.0 if a == b else 0.0 for b in keys] for a in labels]
    assert cmap.values.tolist() == expected
    assert cmap.shape == (2, 4) and cmap.kind == "self"


def test_background_query_vs_foreground_key():
    lay = LayoutVideo(np.array([[[0, 1]]]))
    assert build_self_condition_map(lay, 0).values[0, 1] == 0.0
    assert build_self_condition_map(lay, 0).values[0, 0] == 1.0


def test_self_map_frame_out_of_range():
    with pytest.raises(BoundsError):
        build_self_condition_map(LayoutVideo(np.ones((2, 1, 1), int)), 2)


def test_cross_map_token_example():
    lay = random_layout(np.random.default_rng(5), 2, 4, 4, 2)
    k = TokenAttributeMap((0, 1, 1, 0, 0, 2, 2, 2))
    for frame in range(2):
        vals = build_cross_condition_map(lay, frame, k).values
        for b in (0, 3, 4):
            assert (vals[:, b] == 0).all()
        for b in (1, 2):
            assert np.array_equal(vals[:, b], lay.mask(frame, 1))
        for b in (5, 6, 7):
            assert np.array_equal(vals[:, b], lay.mask(frame, 2))


def test_cross_map_single_pixel():
    lay = LayoutVideo(np.ones((1, 1, 1), int))
    assert build_cross_condition_map(lay, 0, TokenAttributeMap((1,))).values.tolist() == [[1.0]]


def test_cross_map_rejects_vacuous_tokens():
    lay = LayoutVideo(np.ones((1, 1, 1), int))
    with pytest.raises(ValidationError):
        build_cross_condition_map(lay, 0, TokenAttributeMap((0, 0)))


@given(layouts(), st.data())
@settings(max_examples=80, deadline=None)
def test_condition_maps_match_pairwise_enumeration(lay, data):
    frame = data.draw(st.integers(0, lay.frames - 1))
    labels = lay.labels.tolist()
    assert build_self_condition_map(lay, frame).values.tolist() == oracles.self_condition_map(labels, frame)
    k = data.draw(st.lists(st.integers(0, lay.num_attributes), min_size=1, max_size=6))
    assume(any(k))
    cmap = build_cross_condition_map(lay, frame, TokenAttributeMap(tuple(k)))
    assert cmap.values.tolist() == oracles.cross_condition_map(labels, frame, k)


@given(layouts(), st.data())
@settings(max_examples=60, deadline=None)
def test_self_map_symmetric_across_frame_pairs(lay, data):
    i = data.draw(st.integers(0, lay.frames - 1))
    j = data.draw(st.integers(0, lay.frames - 1))
    p = lay.height * lay.width
    r_ij = build_self_condition_map(lay, i).values[:, j * p:(j + 1) * p]
    r_ji = build_self_condition_map(lay, j).values[:, i * p:(i + 1) * p]
    assert np.array_equal(r_ij, r_ji.T)


# size regularizer --------------------------------------------------------------


def test_full_video_attribute_cancels_modulation(rng):
    lay = LayoutVideo(np.ones((2, 2, 2), int))
    cmap = build_self_condition_map(lay, 0)
    size = build_size_regularizer(cmap, compute_areas(lay), lay)
    assert (size.values == 1).all()
    sim = rng.standard_normal(cmap.shape)
    assert (modulation_term(sim, cmap, size, 1.0) == 0).all()


def test_quarter_share_columns():
    labels = np.zeros((2, 2, 2), int)
    labels[0, 0, 0] = labels[1, 1, 1] = 1
    lay = LayoutVideo(labels)
    size = build_size_regularizer(build_self_condition_map(lay, 0), compute_areas(lay), lay)
    keys = lay.flat_labels()
    assert (size.values[:, keys == 1] == 0.25).all()
    assert (size.values[:, keys == 0] == 0.75).all()


@given(layouts(), st.data())
@settings(max_examples=60, deadline=None)
def test_size_regularizer_matches_lookup(lay, data):
    frame = data.draw(st.integers(0, lay.frames - 1))
    props = oracles.area_proportions(lay.labels.tolist(), lay.num_attributes + 1)
    keys = lay.flat_labels().tolist()
    queries = lay.frame_labels(frame).tolist()
    areas = compute_areas(lay)
    cmap = build_self_condition_map(lay, frame)
    key_mode = build_size_regularizer(cmap, areas, lay).values
    pair_mode = build_size_regularizer(cmap, areas, lay, mode="pair_min").values
    for i, a in enumerate(queries):
        for j, b in enumerate(keys):
            assert key_mode[i, j] == props[b]
            assert pair_mode[i, j] == min(props[a], props[b])
    k = data.draw(st.lists(st.integers(0, lay.num_attributes), min_size=1, max_size=5))
    assume(any(k))
    tokens = TokenAttributeMap(tuple(k))
    cross = build_cross_condition_map(lay, frame, tokens)
    cross_key = build_size_regularizer(cross, areas, lay, tokens).values
    cross_pair = build_size_regularizer(cross, areas, lay, tokens, mode="pair_min").values
    for i, a in enumerate(queries):
        for b, kb in enumerate(k):
            assert cross_key[i, b] == (props[kb] if kb else 0.0)
            assert cross_pair[i, b] == (min(props[a], props[kb]) if kb else 0.0)


def test_size_regularizer_errors():
    lay = LayoutVideo(np.array([[[0, 1]]]))
    areas = compute_areas(lay)
    cmap = build_self_condition_map(lay, 0)
    with pytest.raises(ValidationError):
        build_size_regularizer(cmap, areas, lay, mode="query")
    with pytest.raises(ValidationError):
        build_size_regularizer(ConditionMap("cross", 0, np.zeros((2, 1))), areas, lay)
    with pytest.raises(ShapeError):
        build_size_regularizer(ConditionMap("self", 0, np.zeros((2, 3))), areas, lay)
    other = compute_areas(LayoutVideo(np.array([[[0, 1, 2]]])))
    with pytest.raises(ShapeError):
        build_size_regularizer(cmap, other, lay)


# modulation term ---------------------------------------------------------------


def test_modulation_zero_lambda():
    m = modulation_term([[1.0, 3.0]], [[1.0, 0.0]], [[0.0, 0.0]], 0.0)
    assert (m == 0).all()


def test_modulation_small_row():
    m = modulation_term([[1.0, 3.0]], [[1.0, 0.0]], [[0.0, 0.0]], 1.0)
    assert m.tolist() == [[2.0, -2.0]]


def test_modulation_matches_scalar_loop(rng):
    _, _, _, r, s = random_instance(rng, 6, 11)
    sim = rng.standard_normal((6, 11))
    lam = 0.7
    expected = np.array(oracles.modulated_logits(sim.tolist(), r.tolist(), s.tolist(), lam)) - sim
    np.testing.assert_allclose(modulation_term(sim, r, s, lam), expected, rtol=0, atol=1e-12)


def test_modulation_accepts_typed_operands(rng):
    sim = rng.standard_normal((2, 3))
    r = np.array([[1.0, 0, 0], [0, 1, 1]])
    a = modulation_term(sim, ConditionMap("self", 0, r), SizeRegularizer(np.zeros((2, 3))), 1.0)
    b = modulation_term(sim, r, np.zeros((2, 3)), 1.0)
    assert np.array_equal(a, b)
    pn = pos_neg_values(sim)
    assert np.array_equal(b, r * pn.m_pos - (1 - r) * pn.m_neg)


@pytest.mark.parametrize(
    "sim, r, s, lam, error",
    [
        ([[1.0, 2.0]], [[1.0, 0.0]], [[0.0, 0.0]], -0.1, ValidationError),
        ([[1.0, 2.0]], [[1.0, 0.0]], [[0.0, 0.0]], math.inf, ValidationError),
        ([[1.0, 2.0]], [[0.5, 0.0]], [[0.0, 0.0]], 1.0, ValidationError),
        ([[1.0, 2.0]], [[1.0]], [[0.0]], 1.0, ShapeError),
    ],
)
def test_modulation_errors(sim, r, s, lam, error):
    with pytest.raises(error):
        modulation_term(sim, r, s, lam)


# attention ---------------------------------------------------------------------


def test_worked_example():
    # q.k = (1, 3) with d = 1
    q = [[1.0]]
    k = [[1.0], [3.0]]
    v = [[1.0, 0.0], [0.0, 1.0]]
    out = modulated_attention(q, k, v, [[1.0, 0.0]], [[0.0, 0.0]], 1.0, d=1)
    _, expected = oracles.modulated_attention(q, k, v, [[1, 0]], [[0, 0]], 1.0, d=1)
    e = math.exp(2.0)
    np.testing.assert_allclose(out.attention_map[0], [e / (1 + e), 1 / (1 + e)], atol=1e-12)
    np.testing.assert_allclose(out.attention_map, expected, atol=1e-12)
    np.testing.assert_allclose(out.attention_map[0], [0.8808, 0.1192], atol=1e-4)


def test_zero_lambda_is_vanilla_bitwise(rng):
    for _ in range(20):
        q, k, v, r, s = random_instance(rng)
        a = modulated_attention(q, k, v, r, s, 0.0)
        b = vanilla_attention(q, k, v)
        assert np.array_equal(a.attended, b.attended)
        assert np.array_equal(a.attention_map, b.attention_map)


def test_all_ones_map_on_constant_rows_is_vanilla(rng):
    q = np.ones((3, 2))
    k = np.tile([[0.5, 0.25]], (6, 1))
    v = rng.standard_normal((6, 2))
    out = modulated_attention(q, k, v, np.ones((3, 6)), rng.random((3, 6)) * 0.5, 2.0)
    base = vanilla_attention(q, k, v)
    np.testing.assert_allclose(out.attention_map, base.attention_map, atol=1e-15)


def test_attention_matches_scalar_oracle(rng):
    q, k, v, r, s = random_instance(rng, 4, 7, 3)
    out = modulated_attention(q, k, v, r, s, 0.8)
    attended, attn = oracles.modulated_attention(q.tolist(), k.tolist(), v.tolist(), r.tolist(), s.tolist(), 0.8)
    np.testing.assert_allclose(out.attention_map, attn, atol=1e-12)
    np.testing.assert_allclose(out.attended, attended, atol=1e-12)


def test_attention_operand_errors(rng):
    q, k, v, r, s = random_instance(rng)
    with pytest.raises(ShapeError):
        modulated_attention(q[:, :3], k, v, r, s, 1.0)
    with pytest.raises(ShapeError):
        modulated_attention(q, k, v[:-1], r, s, 1.0)
    with pytest.raises(ShapeError):
        modulated_attention(q, k, v, r[:, :-1], s, 1.0)
    with pytest.raises(ValidationError):
        modulated_attention(q, k, v, r, s, -1.0)
    with pytest.raises(ValidationError):
        modulated_attention(q, k, v, r, s, 1.0, d=0)


operands = st.integers(1, 6).flatmap(
    lambda n: st.integers(2, 8).flatmap(
        lambda m: st.tuples(
            arrays(np.float64, (n, 3), elements=st.floats(-3, 3)),
            arrays(np.float64, (m, 3), elements=st.floats(-3, 3)),
            arrays(np.float64, (m, 2), elements=st.floats(-3, 3)),
            arrays(np.float64, (n, m), elements=st.sampled_from([0.0, 1.0])),
            arrays(np.float64, (n, m), elements=st.floats(0, 1)),
        )
    )
)


@given(operands, st.floats(0, 3))
@settings(max_examples=100, deadline=None)
def test_attention_rows_sum_to_one(ops, lam):
    out = modulated_attention(*ops, lam)
    np.testing.assert_allclose(out.attention_map.sum(axis=1), 1.0, atol=1e-9)


@given(operands, st.floats(0, 2), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_row_shift_invariance(ops, lam, shift):
    # adding shift to every logit of a row: q gets an extra coordinate paired with a constant key column
    q, k, v, r, s = ops
    q2 = np.hstack([q, np.full((q.shape[0], 1), shift)])
    k2 = np.hstack([k, np.ones((k.shape[0], 1))])
    a = modulated_attention(q, k, v, r, s, lam, d=3)
    b = modulated_attention(q2, k2, v, r, s, lam, d=3)
    np.testing.assert_allclose(a.attention_map, b.attention_map, rtol=0, atol=1e-9)


@given(operands)
@settings(max_examples=150, deadline=None)
def test_positive_mass_increases_with_lambda(ops):
    q, k, v, r, s = ops
    sim = q @ k.T
    pn = pos_neg_values(sim)
    # rows where some entry actually moves by a representable amount
    moving = ((r == 1) & (pn.m_pos * (1 - s) > 1e-3)) | ((r == 0) & (pn.m_neg * (1 - s) > 1e-3))
    mixed = (r == 1).any(axis=1) & (r == 0).any(axis=1) & moving.any(axis=1)
    assume(mixed.any())
    masses = [
        (modulated_attention(q, k, v, r, s, lam).attention_map * r).sum(axis=1)[mixed]
        for lam in (0.0, 0.5, 1.0, 2.0)
    ]
    for lo, hi in zip(masses, masses[1:]):
        assert (hi > lo).all()


@pytest.mark.parametrize("chunk", [1, 2, 3, 7, 100])
def test_sliced_matches_unsliced(rng, chunk):
    q, k, v, r, s = random_instance(rng, queries=7, keys=10)
    a = modulated_attention(q, k, v, r, s, 0.6)
    b = sliced_modulated_attention(q, k, v, r, s, 0.6, chunk_size=chunk)
    np.testing.assert_allclose(b.attention_map, a.attention_map, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.attended, a.attended, rtol=0, atol=1e-12)


def test_sliced_full_chunk_is_identical(rng):
    q, k, v, r, s = random_instance(rng, queries=7, keys=10)
    a = modulated_attention(q, k, v, r, s, 0.6)
    b = sliced_modulated_attention(q, k, v, r, s, 0.6, chunk_size=7)
    assert np.array_equal(a.attention_map, b.attention_map)


def test_sliced_rejects_bad_chunk(rng):
    with pytest.raises(ValidationError):
        sliced_modulated_attention(*random_instance(rng), 1.0, chunk_size=0)


# schedule ----------------------------------------------------------------------


def test_lambda_schedule_profile():
    sched = LambdaSchedule(total_steps=50, active_steps=15, base_strength=1.0)
    vals = sched.values()
    assert vals[0] == 1.0
    assert vals[5] == pytest.approx(1 - 5 / 15)
    assert (vals[15:] == 0).all()
    assert (np.diff(vals[:15]) < 0).all()
    with pytest.raises(BoundsError):
        sched(50)


@pytest.mark.parametrize("kw", [dict(total_steps=0), dict(active_steps=51), dict(base_strength=-1.0),
                                dict(base_strength=math.nan)])
def test_lambda_schedule_validation(kw):
    with pytest.raises(ValidationError):
        LambdaSchedule(**kw)

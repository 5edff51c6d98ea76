import json
import math

import mpmath
import numpy as np
import pytest

from sim4seg.embeddings import EmbeddingMatrix, ProjectionHead, SegEmbedding, SegTokenRaw, project
from sim4seg.exceptions import ContractViolation, GridTooFineError, InvalidInputError
from sim4seg.rvls2m import (AbsoluteThreshold, RegionMask, RegionMatrix, SimilarityMap,
                            SimilarityVector, TopFraction, TopK, apply_tau, block_size, map_shape,
                            normalize, pool_regions, rvls2m, rvls2m_projected, similarity, to_map,
                            validate_strategy)


def mp_softmax(values):
    with mpmath.workdps(50):
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in values]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def pool_loop(m, g):
    b = min(m.shape) // g
    out = np.zeros((g, g))
    for k in range(g):
        for l in range(g):
            acc = 0.0
            for i in range(b):
                for j in range(b):
                    acc += m[b * k + i, b * l + j]
            out[k, l] = acc / (b * b)
    return out


def topk_oracle(values, k):
    flat = values.ravel()
    order = sorted(range(flat.size), key=lambda idx: (-flat[idx], idx))
    bits = np.zeros(flat.size, dtype=bool)
    bits[order[:k]] = True
    return bits.reshape(values.shape)


def test_similarity_basis_rows():
    sim = similarity(EmbeddingMatrix(np.eye(4)), SegEmbedding(np.eye(4)[0]))
    np.testing.assert_array_equal(sim.values, [1, 0, 0, 0])
    assert not sim.normalized


def test_similarity_orthogonal_seg():
    imgs = EmbeddingMatrix(np.array([[1.0, 0, 0], [2.0, 0, 0]]))
    np.testing.assert_array_equal(similarity(imgs, SegEmbedding([0, 1.0, -3.0])).values, 0)


def test_similarity_matches_scalar_loop(rng):
    e, s = rng.normal(size=(6, 8)), rng.normal(size=8)
    loop = [sum(e[i, c] * s[c] for c in range(8)) for i in range(6)]
    np.testing.assert_allclose(similarity(EmbeddingMatrix(e), SegEmbedding(s)).values, loop,
                               rtol=0, atol=1e-12)


def test_similarity_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        similarity(EmbeddingMatrix(np.ones((2, 3))), SegEmbedding(np.ones(4)))


@pytest.mark.parametrize("c", [-700.0, 0.0, 3.5, 900.0])
def test_softmax_of_constant_vector(c):
    np.testing.assert_allclose(normalize(SimilarityVector([c] * 4)).values, 0.25, rtol=0,
                               atol=1e-15)


def test_softmax_ln3():
    np.testing.assert_allclose(normalize(SimilarityVector([0.0, math.log(3)])).values,
                               [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_matches_extended_precision(rng):
    s = rng.normal(scale=5.0, size=10)
    np.testing.assert_allclose(normalize(SimilarityVector(s)).values, mp_softmax(s), rtol=0,
                               atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        normalize(SimilarityVector([0.0, np.inf]))


def test_double_normalization_is_a_contract_violation():
    with pytest.raises(ContractViolation):
        normalize(normalize(SimilarityVector([1.0, 2.0])))


def test_normalized_flag_is_checked():
    with pytest.raises(ContractViolation):
        SimilarityVector([0.5, 0.6], normalized=True)


@pytest.mark.parametrize("n, shape, pad", [(16, (4, 4), 0), (10, (3, 4), 2), (576, (24, 24), 0),
                                           (1, (1, 1), 0), (7, (2, 4), 1)])
def test_map_shape(n, shape, pad):
    smap = to_map(normalize(SimilarityVector(np.zeros(n))))
    assert smap.values.shape == shape
    assert smap.pad_count == pad
    assert np.all(smap.values.ravel()[n:] == 0.0)


def test_to_map_row_major_and_uniform():
    smap = to_map(normalize(SimilarityVector(np.zeros(576))))
    assert np.all(smap.values == 1.0 / 576)
    sim = normalize(SimilarityVector(np.arange(10.0)))
    np.testing.assert_array_equal(to_map(sim).values.ravel()[:10], sim.values)


def test_to_map_requires_normalized():
    with pytest.raises(ContractViolation):
        to_map(SimilarityVector([1.0, 2.0]))


def test_pool_constant_map():
    for g in (1, 2, 3, 6):
        pooled = pool_regions(SimilarityMap(np.full((6, 7), 0.125), 0), g)
        assert np.all(pooled.values == 0.125)


def test_pool_4x4_example():
    m = np.arange(1.0, 17.0).reshape(4, 4)
    np.testing.assert_array_equal(pool_regions(SimilarityMap(m, 0), 2).values,
                                  [[3.5, 5.5], [11.5, 13.5]])


def test_pool_ignores_trailing_rows_and_columns(rng):
    m = rng.random((5, 5))
    spoiled = m.copy()
    spoiled[4, :] = 1e6
    spoiled[:, 4] = 1e6
    a = pool_regions(SimilarityMap(m, 0), 2)
    b = pool_regions(SimilarityMap(spoiled, 0), 2)
    assert a.block == 2
    np.testing.assert_array_equal(a.values, b.values)


def test_pool_matches_double_loop(rng):
    for h, w in [(7, 9), (16, 16), (24, 24), (13, 20)]:
        m = rng.random((h, w))
        for g in range(1, min(h, w) + 1):
            np.testing.assert_array_equal(pool_regions(SimilarityMap(m, 0), g).values,
                                          pool_loop(m, g))


def test_grid_too_fine():
    with pytest.raises(GridTooFineError):
        pool_regions(SimilarityMap(np.zeros((3, 5)), 0), 4)
    with pytest.raises(GridTooFineError):
        block_size(24, 24, 25)


def test_topk_all_cells():
    regions = RegionMatrix(np.random.default_rng(0).random((4, 4)), 1)
    assert apply_tau(regions, TopK(16)).popcount == 16


def test_topk_ties_take_smallest_row_major_index():
    bits = apply_tau(RegionMatrix(np.ones((4, 4)), 1), TopK(3)).bits
    assert list(np.flatnonzero(bits)) == [0, 1, 2]


def test_topk_matches_sort_oracle(rng):
    values = rng.random((16, 16))
    values[3, 3] = values[0, 5] = values[9, 1]  # plant a tie
    for k in (1, 36, 100, 256):
        np.testing.assert_array_equal(apply_tau(RegionMatrix(values, 1), TopK(k)).bits,
                                      topk_oracle(values, k))


def test_topk_out_of_range_rejected():
    regions = RegionMatrix(np.zeros((3, 3)), 1)
    for k in (0, 10):
        with pytest.raises(InvalidInputError):
            apply_tau(regions, TopK(k))


def test_absolute_threshold():
    values = np.array([[0.1, 0.5], [0.49, 0.9]])
    np.testing.assert_array_equal(apply_tau(RegionMatrix(values, 1), AbsoluteThreshold(0.5)).bits,
                                  [[False, True], [False, True]])


@pytest.mark.parametrize("f, g, k", [(36 / 256, 16, 36), (36 / 256, 4, 3), (36 / 256, 64, 576),
                                     (0.1, 10, 10), (1e-6, 4, 1), (1.0, 5, 25)])
def test_top_fraction_resolution(f, g, k):
    assert TopFraction(f).resolve(g) == k


def test_top_fraction_bounds():
    for f in (0.0, 1.5):
        with pytest.raises(InvalidInputError):
            TopFraction(f)


def test_validate_strategy():
    validate_strategy(TopK(36), 16)
    with pytest.raises(InvalidInputError):
        validate_strategy(TopK(36), 4)


def _random_case(rng, n=64, d=16, h_in=8):
    imgs = EmbeddingMatrix(rng.normal(size=(n, d)))
    head = ProjectionHead(in_dim=h_in, mid_dim=12, out_dim=d, seed=int(rng.integers(1 << 30)))
    raw = SegTokenRaw(rng.normal(size=h_in))
    return imgs, raw, head


def test_pipeline_equals_manual_composition(rng):
    imgs, raw, head = _random_case(rng)
    seg = project(raw, head)
    manual = apply_tau(pool_regions(to_map(normalize(similarity(imgs, seg))), 4), TopK(5))
    assert rvls2m(imgs, raw, head, 4, TopK(5)) == manual


def test_default_configuration_popcount(rng):
    imgs, raw, head = _random_case(rng, n=1024)
    assert rvls2m(imgs, raw, head).popcount == 36


def test_uniform_embeddings_select_leading_cells():
    imgs = EmbeddingMatrix(np.ones((64, 4)))
    mask = rvls2m_projected(imgs, SegEmbedding(np.ones(4)), 8, TopK(5))
    assert list(np.flatnonzero(mask.bits)) == [0, 1, 2, 3, 4]


def test_scale_covariance_when_blocks_are_single_cells(rng):
    # b = 1: pooling is the identity, so ordering survives any positive scale
    for _ in range(50):
        imgs = EmbeddingMatrix(rng.normal(size=(64, 6)))
        seg = SegEmbedding(rng.normal(size=6))
        base = rvls2m_projected(imgs, seg, 8, TopK(10))
        for alpha in (0.1, 0.5, 3.0, 20.0):
            assert rvls2m_projected(imgs, seg.scaled(alpha), 8, TopK(10)) == base


def test_scale_covariance_fails_with_block_pooling():
    # block A: four moderate scores; block B: one peak and three low ones.
    scores = np.full((4, 4), -20.0)
    scores[0:2, 0:2] = 1.0
    scores[0, 2], scores[0, 3], scores[1, 2], scores[1, 3] = 2.0, -10.0, -10.0, -10.0
    imgs = EmbeddingMatrix(scores.reshape(16, 1))
    low = rvls2m_projected(imgs, SegEmbedding([1.0]), 2, TopK(1))
    high = rvls2m_projected(imgs, SegEmbedding([3.0]), 2, TopK(1))
    assert low.bits[0, 0] and high.bits[0, 1]


def test_region_mask_json_round_trip(rng):
    mask = RegionMask(rng.random((5, 5)) > 0.5)
    assert RegionMask.from_json(mask.to_json()) == mask
    assert json.loads(mask.to_json())[0] == "".join("1" if b else "0" for b in mask.bits[0])


def test_topk_nested_and_ordered(rng):
    values = rng.integers(0, 4, (6, 6)).astype(float)  # many ties
    prev = np.zeros((6, 6), dtype=bool)
    for k in range(1, 37):
        bits = apply_tau(RegionMatrix(values, 1), TopK(k)).bits
        assert np.all(bits[prev])
        assert values[bits].min() >= (values[~bits].max() if (~bits).any() else -np.inf)
        prev = bits


def test_map_shape_formula():
    for n in range(1, 300):
        h, w = map_shape(n)
        assert h == math.isqrt(n) and h * w >= n > h * (w - 1)

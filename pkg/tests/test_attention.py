import numpy as np
import pytest

from captionattack.attention import (
    AttentionStack,
    CandidateRegion,
    SaliencyMap,
    aggregate_sentence,
    aggregate_word,
    sample_pixels,
    select_region,
    upsample,
)
from captionattack.errors import BudgetExceedsRegionError, EmptyCaptionError
from conftest import make_boundary_image
from reference_impls import bilinear_scalar


def _stack(grids, words=None):
    grids = np.asarray(grids, dtype=np.float64)
    words = tuple(words or [f"w{i}" for i in range(grids.shape[0])])
    return AttentionStack(words=words, grids=grids)


def _uniform_grid(h, w):
    return np.full((h, w), 1.0 / (h * w))


def test_upsample_at_target_size_is_identity_up_to_normalization():
    grid = np.array([[0.5, 0.25], [0.125, 0.125]])
    stack = _stack([grid])
    out = upsample(stack, 2, 2)
    assert np.allclose(out.grids[0], grid)


def test_upsample_constant_1x1_to_2x2():
    out = upsample(_stack([[[1.0]]]), 2, 2)
    assert np.allclose(out.grids[0], 0.25)


def test_upsample_matches_scalar_bilinear():
    grid = np.array([[1.0, 0.0], [0.0, 0.0]])
    out = upsample(_stack([grid]), 4, 4)
    expected = bilinear_scalar(grid, 4, 4)
    expected /= expected.sum()
    assert np.allclose(out.grids[0], expected, atol=1e-12)
    assert out.grids[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_upsample_rejects_downsampling():
    with pytest.raises(ValueError):
        upsample(_stack([_uniform_grid(4, 4)]), 2, 2)


def test_aggregate_sentence_single_word():
    grid = _uniform_grid(4, 4)
    sal = aggregate_sentence(_stack([grid]))
    assert np.allclose(sal.weights, grid)


def test_aggregate_sentence_linearity():
    grid = np.zeros((2, 2))
    grid[0, 0] = 1.0
    sal = aggregate_sentence(_stack([grid, grid]))
    assert np.allclose(sal.weights, 2 * grid)


def test_aggregate_sentence_empty_stack_rejected():
    stack = AttentionStack(words=(), grids=np.zeros((0, 2, 2)))
    with pytest.raises(EmptyCaptionError):
        aggregate_sentence(stack)


def test_aggregate_sentence_matches_loop_oracle(toy_oracle):
    image = make_boundary_image()
    res = toy_oracle.caption(image, want_attention=True)
    stack = upsample(res.attention, image.width, image.height)
    sal = aggregate_sentence(stack)
    brute = np.zeros((image.height, image.width))
    for t in range(len(stack)):
        for y in range(image.height):
            for x in range(image.width):
                brute[y, x] += stack.grids[t, y, x]
    assert np.allclose(sal.weights, brute, atol=1e-12)
    assert sal.weights.sum() == pytest.approx(len(stack.words), abs=1e-6)


def test_select_region_full_image():
    sal = SaliencyMap(4, 4, _uniform_grid(4, 4))
    region = select_region(sal, 1.0)
    assert len(region) == 16


def test_select_region_uniform_tie_break_row_major():
    sal = SaliencyMap(4, 4, _uniform_grid(4, 4))
    region = select_region(sal, 0.5)
    got = {(int(x), int(y)) for x, y in region.pixels}
    assert got == {(x, y) for y in range(2) for x in range(4)}


def test_select_region_bright_blob():
    weights = np.zeros((8, 8))
    weights[2:5, 3:6] = 5.0
    weights += 0.001
    sal = SaliencyMap(8, 8, weights)
    region = select_region(sal, 9 / 64)
    got = set(map(tuple, region.pixels))
    # sorting oracle
    flat = [(-weights[y, x], y * 8 + x, (x, y)) for y in range(8) for x in range(8)]
    expected = {coord for _, _, coord in sorted(flat)[:9]}
    assert got == expected == {(x, y) for y in range(2, 5) for x in range(3, 6)}


def test_select_region_weights_renormalized():
    weights = np.arange(16, dtype=float).reshape(4, 4)
    region = select_region(SaliencyMap(4, 4, weights), 0.25)
    assert region.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_select_region_permutation_stable():
    rng = np.random.default_rng(3)
    weights = rng.random(16) + 0.01
    sal = SaliencyMap(4, 4, weights.reshape(4, 4))
    base = set(map(tuple, select_region(sal, 0.5).pixels))
    perm = rng.permutation(16)
    sal_p = SaliencyMap(4, 4, weights[perm].reshape(4, 4))
    region_p = select_region(sal_p, 0.5)
    unpermuted = set()
    for x, y in region_p.pixels:
        original_flat = perm[y * 4 + x]
        unpermuted.add((int(original_flat % 4), int(original_flat // 4)))
    assert unpermuted == base


def test_region_membership_monotone_in_k():
    rng = np.random.default_rng(5)
    sal = SaliencyMap(6, 6, rng.random((6, 6)))
    previous = set()
    for k in (0.1, 0.3, 0.5, 0.8, 1.0):
        current = set(map(tuple, select_region(sal, k).pixels))
        assert previous <= current
        previous = current


def test_aggregate_word_single_word_equals_select_region():
    rng = np.random.default_rng(11)
    grid = rng.random((4, 4))
    grid /= grid.sum()
    stack = _stack([grid])
    region_w = aggregate_word(stack, 0.5)
    region_s = select_region(aggregate_sentence(stack), 0.5)
    assert set(map(tuple, region_w.pixels)) == set(map(tuple, region_s.pixels))


def test_aggregate_word_disjoint_tops_union():
    a = np.zeros((4, 4))
    a[0, :] = 0.25
    b = np.zeros((4, 4))
    b[3, :] = 0.25
    region = aggregate_word(_stack([a, b]), 4 / 16)
    assert len(region) == 8


def test_word_region_broader_than_sentence_region_with_function_word(toy_oracle):
    image = make_boundary_image()  # salient cells in the bottom half
    res = toy_oracle.caption(image, want_attention=True)
    stack = upsample(res.attention, image.width, image.height)
    sentence = select_region(aggregate_sentence(stack), 0.5)
    word = aggregate_word(stack, 0.5)
    assert len(word) > len(sentence)


def test_sentence_and_word_regions_coincide_for_one_word():
    grid = np.zeros((4, 4))
    grid[1, 1] = 0.6
    grid[2, 2] = 0.4
    stack = _stack([grid])
    s = select_region(aggregate_sentence(stack), 0.25)
    w = aggregate_word(stack, 0.25)
    assert set(map(tuple, s.pixels)) == set(map(tuple, w.pixels))


def test_sample_pixels_full_region():
    region = CandidateRegion.uniform(3, 2)
    got = sample_pixels(region, 6, np.random.default_rng(0))
    assert sorted(map(tuple, got)) == sorted(map(tuple, region.pixels))


def test_sample_pixels_single_certain_pixel():
    region = CandidateRegion(
        width=4, height=4,
        pixels=np.array([[2, 1]]), weights=np.array([1.0]), source_k=1 / 16,
    )
    assert tuple(sample_pixels(region, 1, np.random.default_rng(0))[0]) == (2, 1)


def test_sample_pixels_budget_error():
    region = CandidateRegion.uniform(2, 2)
    with pytest.raises(BudgetExceedsRegionError):
        sample_pixels(region, 5, np.random.default_rng(0))


def test_sample_pixels_empirical_frequencies():
    region = CandidateRegion(
        width=3, height=1,
        pixels=np.array([[0, 0], [1, 0], [2, 0]]),
        weights=np.array([0.7, 0.2, 0.1]),
        source_k=1.0,
    )
    rng = np.random.default_rng(99)
    counts = np.zeros(3)
    draws = 100_000
    for _ in range(draws):
        x, _ = sample_pixels(region, 1, rng)[0]
        counts[x] += 1
    freqs = counts / draws
    assert np.all(np.abs(freqs - np.array([0.7, 0.2, 0.1])) < 0.01)


def test_sample_deterministic_under_seed():
    region = CandidateRegion.uniform(6, 6)
    a = sample_pixels(region, 10, np.random.default_rng(42))
    b = sample_pixels(region, 10, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_stack_grid_normalization_enforced():
    bad = np.full((1, 2, 2), 0.3)
    with pytest.raises(ValueError):
        AttentionStack(words=("w",), grids=bad)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opcc.errors import ContractViolation
from opcc.octree import (
    build_levels,
    downsample,
    morton_encode,
    morton_encode_array,
    morton_decode_array,
    neighbor_counts,
    occupancy_codes,
    sort_dedup_morton,
    upsample_coords,
)
from opcc.pcio import OutOfRangeError


def naive_morton(c, depth):
    v = 0
    for i in range(depth):
        for axis in range(3):
            v |= ((int(c[axis]) >> i) & 1) << (3 * i + axis)
    return v


def test_morton_examples():
    assert morton_encode((0, 0, 0), 5) == 0
    assert morton_encode((1, 1, 1), 1) == 7
    assert morton_encode((3, 1, 0), 2) == 11
    with pytest.raises(OutOfRangeError):
        morton_encode((4, 0, 0), 2)


def test_morton_matches_naive_and_inverts(rng):
    c = rng.integers(0, 2 ** 16, size=(500, 3))
    codes = morton_encode_array(c)
    assert codes.tolist() == [naive_morton(v, 16) for v in c]
    assert np.array_equal(morton_decode_array(codes), c)


def test_sort_dedup():
    assert sort_dedup_morton([(1, 0, 0), (0, 0, 0), (1, 0, 0)]).tolist() == [[0, 0, 0], [1, 0, 0]]
    c = sort_dedup_morton(np.random.default_rng(1).integers(0, 32, size=(1000, 3)))
    assert np.array_equal(sort_dedup_morton(c), c)


def test_sort_dedup_matches_comparison_sort(rng):
    c = rng.integers(0, 64, size=(1000, 3))
    keys = sorted({naive_morton(v, 6) for v in c})
    assert morton_encode_array(sort_dedup_morton(c, 6)).tolist() == keys


def test_downsample_examples():
    assert downsample([(0, 0, 0), (1, 1, 1), (2, 3, 1)]).tolist() == [[0, 0, 0], [1, 1, 0]]
    assert downsample([(5, 3, 1)]).tolist() == [[2, 1, 0]]
    with pytest.raises(ContractViolation):
        downsample([(1, 0, 0), (0, 0, 0)])


def test_occupancy_examples():
    assert occupancy_codes([(0, 0, 0)], [(0, 0, 0)]).tolist() == [1]
    assert occupancy_codes([(0, 0, 0)], sort_dedup_morton([(0, 0, 0), (1, 0, 1)])).tolist() == [33]
    full = sort_dedup_morton([(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)])
    assert occupancy_codes([(0, 0, 0)], full).tolist() == [255]
    with pytest.raises(ContractViolation):
        occupancy_codes([(0, 0, 0)], [(2, 0, 0)])


def test_upsample_examples():
    assert upsample_coords([(0, 0, 0)], [5]).tolist() == [[0, 0, 0], [0, 1, 0]]
    assert len(upsample_coords([(0, 0, 0)], [255])) == 8
    with pytest.raises(ContractViolation):
        upsample_coords([(0, 0, 0)], [0])


def test_build_levels_examples():
    lv = build_levels(np.array([[5, 3, 1]]), 3, 0)
    for l in range(4):
        assert lv.count(l) == 1
    for l in range(1, 4):
        code = int(lv.codes[l][0])
        assert code & (code - 1) == 0
    cube = build_levels(np.array([(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]), 1, 0)
    assert cube.count(1) == 8 and cube.codes[1].tolist() == [255]
    with pytest.raises(OutOfRangeError):
        build_levels(np.array([[8, 0, 0]]), 3, 0)


def test_build_levels_popcount_oracle(rng):
    pts = rng.integers(0, 256, size=(3000, 3))
    lv = build_levels(pts, 8)
    for l in range(lv.min_level + 1, 9):
        parents, kids = lv.coords[l - 1], lv.coords[l]
        # direct child count per parent
        counts = {tuple(p): 0 for p in parents.tolist()}
        for k in kids.tolist():
            counts[(k[0] >> 1, k[1] >> 1, k[2] >> 1)] += 1
        pop = [bin(int(c)).count("1") for c in lv.codes[l]]
        assert pop == [counts[tuple(p)] for p in parents.tolist()]
        assert sum(pop) == lv.count(l)


def test_neighbor_counts():
    assert neighbor_counts(np.array([[3, 3, 3]])).tolist() == [0]
    assert neighbor_counts(np.array([[0, 0, 0], [1, 0, 0]])).tolist() == [1, 1]
    grid = sort_dedup_morton(np.array([(x, y, z) for x in range(4) for y in range(4) for z in range(4)]))
    brute = [sum(1 for q in grid if 0 < np.abs(q - p).max() <= 1) for p in grid]
    assert neighbor_counts(grid).tolist() == brute


@settings(max_examples=200, deadline=None)
@given(depth=st.integers(1, 12), n=st.integers(1, 400), seed=st.integers(0, 2 ** 32 - 1))
def test_round_trip_and_order(depth, n, seed):
    c = sort_dedup_morton(np.random.default_rng(seed).integers(0, 1 << depth, size=(n, 3)), depth)
    p = downsample(c)
    assert np.all(np.diff(morton_encode_array(p)) > 0)
    codes = occupancy_codes(p, c)
    assert codes.min() >= 1 and codes.max() <= 255
    back = upsample_coords(p, codes)
    assert np.array_equal(back, c)
    assert np.all(np.diff(morton_encode_array(back)) > 0)

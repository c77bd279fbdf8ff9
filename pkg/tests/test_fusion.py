import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import median_consensus_oracle
from panoscan.exceptions import ConfigurationError, PlacementError, UsageError
from panoscan.fusion import (Overlaps, PanoramaCanvas, TileBlock, build_ramp_mask, edge_overlaps, frame_statistic,
                             fuse_tiles, median_consensus, median_consensus_index, ramp_profile, seam_energy)


def test_frame_statistic_examples():
    assert frame_statistic(np.full((4, 4), 3.0)) == 3.0
    assert frame_statistic(np.zeros((2, 2, 3))) == 0.0
    assert frame_statistic(np.array([[0.2], [0.8]])) == pytest.approx(0.5)
    assert frame_statistic(np.ones((2, 2, 3)), "luminance") == pytest.approx(1.0)
    with pytest.raises(UsageError):
        frame_statistic(np.zeros((0, 3)))
    with pytest.raises(ConfigurationError):
        frame_statistic(np.ones(3), "entropy")


def test_median_consensus_examples():
    assert median_consensus_index([1.0, 5.0, 1.1, 1.05, 9.0]) == 2
    assert median_consensus_index([0.4]) == 0
    assert median_consensus_index([2.0, 2.0, 2.0]) == 0
    # even count: median 2.5, both 2 and 3 are 0.5 away, first one wins
    assert median_consensus_index([3.0, 2.0, 10.0, 1.0]) == 0


def test_median_consensus_rejects_outlier_frame():
    frames = [np.full((4, 4), 0.5), np.full((4, 4), 0.52), np.full((4, 4), 0.9)]
    idx, frame = median_consensus(TileBlock(1, frames, (0, 0)))
    assert idx == 1 and frame is frames[1]


@settings(max_examples=200)
@given(st.lists(st.integers(0, 6).map(lambda x: x / 4), min_size=1, max_size=9))
def test_median_consensus_matches_oracle(stats):
    assert median_consensus_index(stats) == median_consensus_oracle(stats)


def test_ramp_profile_examples():
    np.testing.assert_array_equal(ramp_profile(6), np.ones(6))
    np.testing.assert_allclose(ramp_profile(6, start=2), [1 / 3, 2 / 3, 1, 1, 1, 1])
    with pytest.raises(ConfigurationError):
        ramp_profile(4, start=4)
    assert np.all(build_ramp_mask((5, 7)).weights == 1)


@given(st.integers(1, 30))
def test_opposing_ramps_sum_to_one(ov):
    rising = ramp_profile(ov + 5, start=ov)[:ov]
    falling = ramp_profile(ov + 5, end=ov)[-ov:]
    np.testing.assert_allclose(rising + falling, 1.0, atol=1e-15)


def test_single_tile_reproduced():
    tile = np.random.default_rng(0).uniform(size=(5, 6, 3))
    canvas = PanoramaCanvas((8, 10))
    canvas.accumulate(tile, build_ramp_mask(tile.shape), (2, 3))
    pano, uncovered = canvas.finalize()
    np.testing.assert_array_equal(pano[2:7, 3:9], tile)
    assert uncovered.sum() == 80 - 30
    assert np.all(pano[uncovered] == 0)


def test_constant_tiles_overlap_to_constant():
    pano, uncovered = fuse_tiles([np.full((4, 6, 1), 7.0)] * 2, [(0, 0), (0, 3)], (4, 9))
    assert not uncovered.any()
    np.testing.assert_allclose(pano, 7.0, atol=1e-12)


def test_zero_one_ramp_example():
    ov = 3
    one, zero = np.ones((1, 5, 1)), np.zeros((1, 5, 1))
    pano, _ = fuse_tiles([one, zero], [(0, 0), (0, 2)], (1, 7))
    np.testing.assert_allclose(pano[0, 2:2 + ov, 0], [3 / 4, 2 / 4, 1 / 4])


def test_finalize_examples():
    empty = PanoramaCanvas((3, 4), 1)
    assert empty.finalize()[1].all()
    canvas = PanoramaCanvas((2, 2), 1)
    canvas.accumulate(np.full((2, 2), 5.0), np.full((2, 2), 0.5), (0, 0))
    canvas.accumulate(np.full((2, 2), 5.0), np.full((2, 2), 1.5), (0, 0))
    pano, uncovered = canvas.finalize()
    assert not uncovered.any()
    np.testing.assert_array_equal(pano, 5.0)


def test_placement_errors_name_block():
    canvas = PanoramaCanvas((4, 4), 1)
    with pytest.raises(PlacementError) as err:
        canvas.accumulate(np.ones((3, 3)), np.ones((3, 3)), (2, 0), block=9)
    assert err.value.block == 9
    with pytest.raises(PlacementError):
        canvas.accumulate(np.ones((3, 3)), np.ones((2, 3)), (0, 0))


def test_edge_overlaps_linear_and_grid():
    ov = edge_overlaps([(0, 0), (0, 4), (0, 8)], (6, 8))
    assert ov == [Overlaps(0, 0, 0, 4), Overlaps(0, 0, 4, 4), Overlaps(0, 0, 4, 0)]
    grid = edge_overlaps([(0, 0), (0, 4), (4, 4), (4, 0)], (8, 8))
    assert grid[0] == Overlaps(0, 4, 0, 4)


def test_agreeing_tiles_reproduce_source():
    rng = np.random.default_rng(3)
    image = rng.uniform(size=(12, 20, 3))
    anchors = [(r, c) for r in (0, 4) for c in (0, 6, 12)]
    tiles = [image[r:r + 8, c:c + 8] for r, c in anchors]
    pano, uncovered = fuse_tiles(tiles, anchors, (12, 20))
    assert not uncovered.any()
    np.testing.assert_allclose(pano, image, atol=1e-12)


def test_seam_energy_examples():
    const = np.full((4, 10, 3), 0.3)
    report = seam_energy(const, [5])
    assert report.seams[0].max_diff == 0 and report.interior_max == 0
    ramp = np.tile(np.arange(10.0)[None, :, None] * 0.1, (4, 1, 1))
    report = seam_energy(ramp, [3, 7])
    assert report.seams[0].max_diff == pytest.approx(report.interior_max)
    assert "interior" in report.to_csv()
    with pytest.raises(UsageError):
        seam_energy(ramp, [10])

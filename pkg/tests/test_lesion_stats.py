"""Connected-component and volume-statistics tests.

The labeling oracle is a pure-Python BFS flood fill over coordinate sets,
entirely independent of the kernels under test; both the numba and the
numpy backend must match it.
"""

from collections import deque

import numpy as np
import pytest

from patchopt.errors import NoScans
from patchopt.lesion_stats import (
    PER_LESION,
    PER_SCAN_TOTAL,
    aggregate_scan_stats,
    connected_components,
    dataset_stats,
    lesion_stats,
)
from patchopt.volume_io import LabelVolume


def flood_fill_oracle(mask, connectivity):
    """Set-based BFS labeling; returns a list of frozensets of coordinates."""
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
        and (connectivity == 26 or abs(dx) + abs(dy) + abs(dz) == 1)
    ]
    todo = {tuple(c) for c in np.argwhere(mask)}
    comps = []
    while todo:
        seed = todo.pop()
        comp = {seed}
        queue = deque([seed])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                nb = (x + dx, y + dy, z + dz)
                if nb in todo:
                    todo.remove(nb)
                    comp.add(nb)
                    queue.append(nb)
        comps.append(frozenset(comp))
    return comps


def volume_from_labels(labels, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(dims=labels.shape, spacing_mm=spacing, labels=labels.astype(np.uint8))


def place_cuboid(labels, corner, size, value=2):
    x, y, z = corner
    sx, sy, sz = size
    labels[x : x + sx, y : y + sy, z : z + sz] = value


class TestConnectedComponents:
    def test_empty(self):
        vol = volume_from_labels(np.zeros((4, 4, 4), np.uint8))
        assert connected_components(vol, 2) == []

    def test_two_isolated_voxels(self):
        labels = np.zeros((8, 8, 8), np.uint8)
        labels[0, 0, 0] = 2
        labels[5, 5, 5] = 2
        comps = connected_components(volume_from_labels(labels), 2)
        assert len(comps) == 2
        assert all(c.voxel_count == 1 for c in comps)

    def test_solid_cube_matches_oracle(self):
        labels = np.zeros((12, 12, 12), np.uint8)
        place_cuboid(labels, (1, 1, 1), (10, 10, 10))
        vol = volume_from_labels(labels)
        comps = connected_components(vol, 2)
        oracle = flood_fill_oracle(labels == 2, 26)
        assert len(comps) == len(oracle) == 1
        assert comps[0].voxel_count == len(oracle[0]) == 1000
        assert comps[0].bbox_min == (1, 1, 1)
        assert comps[0].bbox_max == (10, 10, 10)

    @pytest.mark.parametrize("connectivity", [6, 26])
    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    def test_random_sprinkles_match_oracle(self, connectivity, backend, monkeypatch):
        monkeypatch.setenv("PATCHOPT_BACKEND", backend)
        rng = np.random.default_rng(42)
        for _ in range(10):
            labels = (rng.random((10, 11, 9)) < 0.25).astype(np.uint8) * 2
            vol = volume_from_labels(labels)
            comps = connected_components(vol, 2, connectivity)
            oracle = flood_fill_oracle(labels == 2, connectivity)
            assert sorted(c.voxel_count for c in comps) == sorted(len(o) for o in oracle)
            got_boxes = {
                (c.bbox_min, c.bbox_max, c.voxel_count) for c in comps
            }
            want_boxes = {
                (
                    tuple(map(min, zip(*o))),
                    tuple(map(max, zip(*o))),
                    len(o),
                )
                for o in oracle
            }
            assert got_boxes == want_boxes

    def test_sorted_by_count_then_corner(self):
        labels = np.zeros((10, 10, 10), np.uint8)
        place_cuboid(labels, (7, 7, 7), (2, 2, 2))  # 8 voxels
        place_cuboid(labels, (0, 0, 0), (1, 1, 2))  # 2 voxels, corner (0,0,0)
        place_cuboid(labels, (4, 0, 0), (1, 2, 1))  # 2 voxels, corner (4,0,0)
        comps = connected_components(volume_from_labels(labels), 2)
        assert [c.voxel_count for c in comps] == [8, 2, 2]
        assert comps[1].bbox_min == (0, 0, 0)  # (z,y,x) lexicographic tie-break
        assert comps[2].bbox_min == (4, 0, 0)

    def test_voxel_conservation(self):
        rng = np.random.default_rng(3)
        labels = (rng.random((9, 9, 9)) < 0.3).astype(np.uint8) * 2
        vol = volume_from_labels(labels)
        comps = connected_components(vol, 2)
        assert sum(c.voxel_count for c in comps) == int((labels == 2).sum())

    def test_flip_invariance(self):
        rng = np.random.default_rng(4)
        labels = (rng.random((8, 9, 10)) < 0.3).astype(np.uint8) * 2
        base = len(connected_components(volume_from_labels(labels), 2))
        for axis in range(3):
            flipped = np.flip(labels, axis=axis).copy()
            assert len(connected_components(volume_from_labels(flipped), 2)) == base

    def test_6_connectivity_at_least_as_many_components(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            labels = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8) * 2
            vol = volume_from_labels(labels)
            n6 = len(connected_components(vol, 2, connectivity=6))
            n26 = len(connected_components(vol, 2, connectivity=26))
            assert n6 >= n26

    def test_diagonal_voxels_26_vs_6(self):
        labels = np.zeros((4, 4, 4), np.uint8)
        labels[1, 1, 1] = 2
        labels[2, 2, 2] = 2
        vol = volume_from_labels(labels)
        assert len(connected_components(vol, 2, connectivity=26)) == 1
        assert len(connected_components(vol, 2, connectivity=6)) == 2


class TestLesionStats:
    def test_cube_volume_mm3(self):
        labels = np.zeros((12, 12, 12), np.uint8)
        place_cuboid(labels, (1, 1, 1), (10, 10, 10))
        vol = volume_from_labels(labels, spacing=(0.5, 0.5, 2.0))
        stats = lesion_stats(vol, 2, bins=4)
        assert stats.lesion_count == 1
        assert stats.lesion_volumes_mm3[0] == pytest.approx(500.0)
        assert stats.mean_volume_mm3 == pytest.approx(500.0)

    def test_no_lesions(self):
        stats = lesion_stats(volume_from_labels(np.zeros((4, 4, 4), np.uint8)), 2)
        assert stats.lesion_count == 0
        assert stats.mean_volume_mm3 == 0.0
        assert stats.histogram == ()

    def test_histogram_counts_sum_to_lesion_count(self):
        rng = np.random.default_rng(6)
        labels = (rng.random((12, 12, 12)) < 0.2).astype(np.uint8) * 2
        stats = lesion_stats(volume_from_labels(labels), 2, bins=5)
        assert sum(c for _, _, c in stats.histogram) == stats.lesion_count
        assert len(stats.histogram) == 5
        lowers = [lo for lo, _, _ in stats.histogram]
        assert lowers == sorted(lowers) and lowers[0] == 0.0

    def test_volumes_sorted_descending(self):
        labels = np.zeros((10, 10, 10), np.uint8)
        place_cuboid(labels, (0, 0, 0), (2, 2, 2))
        place_cuboid(labels, (6, 6, 6), (3, 3, 3))
        stats = lesion_stats(volume_from_labels(labels), 2)
        assert stats.lesion_volumes_mm3 == (27.0, 8.0)

    def test_bins_validated(self):
        with pytest.raises(ValueError):
            lesion_stats(volume_from_labels(np.zeros((2, 2, 2), np.uint8)), 2, bins=0)


class TestDatasetStats:
    SHAPES = {100: (4, 5, 5), 300: (5, 6, 10), 500: (5, 10, 10), 40: (2, 4, 5), 10: (1, 2, 5)}

    def scan(self, volumes_mm3, tag):
        # disjoint cuboids whose voxel counts equal the requested mm^3 at spacing 1
        labels = np.zeros((30, 12, 12), np.uint8)
        x = 0
        for v in volumes_mm3:
            size = self.SHAPES[int(v)]
            place_cuboid(labels, (x, 0, 0), size)
            x += size[0] + 2
        return (tag, volume_from_labels(labels))

    def test_single_scan_both_modes(self):
        labels = np.zeros((10, 10, 10), np.uint8)
        place_cuboid(labels, (0, 0, 0), (5, 10, 10))  # 500 voxels
        scans = [("a", volume_from_labels(labels))]
        for mode in (PER_LESION, PER_SCAN_TOTAL):
            assert dataset_stats(scans, 2, mode).dataset_mean_volume_mm3 == pytest.approx(500.0)

    def test_two_scans_per_lesion_mean(self):
        scans = [self.scan([100], "s1"), self.scan([300, 500], "s2")]
        ds = dataset_stats(scans, 2, PER_LESION)
        assert ds.dataset_mean_volume_mm3 == pytest.approx(300.0)

    def test_two_scans_per_scan_total_mean(self):
        scans = [self.scan([100], "s1"), self.scan([300, 500], "s2")]
        ds = dataset_stats(scans, 2, PER_SCAN_TOTAL)
        assert ds.dataset_mean_volume_mm3 == pytest.approx(450.0)

    def test_permutation_invariant(self):
        scans = [self.scan([100], "s1"), self.scan([300, 500], "s2"), self.scan([40], "s3")]
        a = dataset_stats(scans, 2, PER_LESION)
        b = dataset_stats(scans[::-1], 2, PER_LESION)
        assert a == b
        assert [sid for sid, _ in a.per_scan] == ["s1", "s2", "s3"]

    def test_no_scans(self):
        with pytest.raises(NoScans):
            dataset_stats([], 2)
        with pytest.raises(NoScans):
            aggregate_scan_stats([])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            dataset_stats([self.scan([10], "s")], 2, mode="median")

    def test_report_schema(self):
        ds = dataset_stats([self.scan([100], "s1")], 2)
        report = ds.to_dict(dataset_id="demo")
        assert set(report) == {"dataset_id", "dataset_mean_mm3", "mode", "per_scan"}
        scan = report["per_scan"][0]
        assert set(scan) == {"scan_id", "lesion_count", "volumes_mm3", "mean_mm3", "histogram"}

"""Per-lesion volume statistics from label volumes.

A lesion is one connected component of the target label (26-neighborhood by
default). Physical volume is voxel count times the voxel volume in mm³;
dataset-level means aggregate either over all lesions pooled or over
per-scan totals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._label3d import label_components
from .errors import NoScans
from .volume_io import LabelVolume

PER_LESION = "per-lesion"
PER_SCAN_TOTAL = "per-scan-total"
AGGREGATION_MODES = (PER_LESION, PER_SCAN_TOTAL)


@dataclass(frozen=True)
class Component:
    """One connected set of target-label voxels."""

    voxel_count: int
    bbox_min: tuple[int, int, int]  # (x, y, z), inclusive
    bbox_max: tuple[int, int, int]


@dataclass(frozen=True)
class LesionStats:
    lesion_volumes_mm3: tuple[float, ...]  # sorted descending
    lesion_count: int
    mean_volume_mm3: float
    histogram: tuple[tuple[float, float, int], ...]  # (bin_lower, bin_upper, count)

    def to_dict(self, scan_id: str | None = None) -> dict:
        d = {
            "lesion_count": self.lesion_count,
            "volumes_mm3": list(self.lesion_volumes_mm3),
            "mean_mm3": self.mean_volume_mm3,
            "histogram": [list(b) for b in self.histogram],
        }
        if scan_id is not None:
            d = {"scan_id": scan_id, **d}
        return d


@dataclass(frozen=True)
class DatasetStats:
    per_scan: tuple[tuple[str, LesionStats], ...]  # sorted by scan_id
    dataset_mean_volume_mm3: float
    aggregation_mode: str

    def to_dict(self, dataset_id: str | None = None) -> dict:
        d = {
            "dataset_mean_mm3": self.dataset_mean_volume_mm3,
            "mode": self.aggregation_mode,
            "per_scan": [stats.to_dict(scan_id) for scan_id, stats in self.per_scan],
        }
        if dataset_id is not None:
            d = {"dataset_id": dataset_id, **d}
        return d


def connected_components(vol: LabelVolume, target_label: int, connectivity: int = 26) -> list[Component]:
    """Maximal connected sets of voxels equal to target_label.

    Sorted by descending voxel count; ties broken by the smaller bounding-box
    corner in (z, y, x) lexicographic order. Empty list if the label is absent.
    """
    mask = vol.labels == target_label
    if not mask.any():
        return []
    labels, ncomp = label_components(mask, connectivity)

    xs, ys, zs = np.nonzero(labels)
    ids = labels[xs, ys, zs] - 1
    counts = np.bincount(ids, minlength=ncomp)
    mins = np.full((3, ncomp), np.iinfo(np.int64).max, dtype=np.int64)
    maxs = np.full((3, ncomp), -1, dtype=np.int64)
    for axis, coords in enumerate((xs, ys, zs)):
        np.minimum.at(mins[axis], ids, coords)
        np.maximum.at(maxs[axis], ids, coords)

    comps = [
        Component(
            voxel_count=int(counts[i]),
            bbox_min=(int(mins[0, i]), int(mins[1, i]), int(mins[2, i])),
            bbox_max=(int(maxs[0, i]), int(maxs[1, i]), int(maxs[2, i])),
        )
        for i in range(ncomp)
    ]
    comps.sort(key=lambda c: (-c.voxel_count, c.bbox_min[2], c.bbox_min[1], c.bbox_min[0]))
    return comps


def lesion_stats(vol: LabelVolume, target_label: int, bins: int = 16, connectivity: int = 26) -> LesionStats:
    """Per-lesion physical volumes plus an equal-width histogram over [0, max]."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    comps = connected_components(vol, target_label, connectivity)
    volumes = sorted((c.voxel_count * vol.voxel_volume_mm3 for c in comps), reverse=True)
    if not volumes:
        return LesionStats((), 0, 0.0, ())
    counts, edges = np.histogram(volumes, bins=bins, range=(0.0, volumes[0]))
    hist = tuple(
        (float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))
    )
    return LesionStats(
        lesion_volumes_mm3=tuple(volumes),
        lesion_count=len(volumes),
        mean_volume_mm3=float(np.mean(volumes)),
        histogram=hist,
    )


def aggregate_scan_stats(per_scan: list[tuple[str, LesionStats]], mode: str = PER_LESION) -> DatasetStats:
    """Fold per-scan statistics into a dataset mean, deterministically.

    Scans are sorted by scan_id first, so the result is permutation-invariant.
    """
    if not per_scan:
        raise NoScans("no scans to aggregate")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {mode!r}")
    ordered = tuple(sorted(per_scan, key=lambda p: p[0]))
    if mode == PER_LESION:
        pooled = [v for _, s in ordered for v in s.lesion_volumes_mm3]
        mean = float(np.mean(pooled)) if pooled else 0.0
    else:
        totals = [float(sum(s.lesion_volumes_mm3)) for _, s in ordered]
        mean = float(np.mean(totals))
    return DatasetStats(per_scan=ordered, dataset_mean_volume_mm3=mean, aggregation_mode=mode)


def dataset_stats(
    scans: list[tuple[str, LabelVolume]],
    target_label: int,
    mode: str = PER_LESION,
    bins: int = 16,
    connectivity: int = 26,
) -> DatasetStats:
    """Compute and aggregate lesion statistics for a set of scans."""
    if not scans:
        raise NoScans("no scans given")
    per_scan = [(sid, lesion_stats(v, target_label, bins, connectivity)) for sid, v in scans]
    return aggregate_scan_stats(per_scan, mode)

"""Phantom label volumes with analytically known lesion volumes.

Ellipsoids are rasterized by a center-point test: a voxel belongs to the
lesion iff its center (in mm) satisfies sum(((p - c)/axis)^2) <= 1. The
analytic volume 4/3*pi*a*b*c then bounds the discretization error, which
shrinks linearly as spacing shrinks; that convergence is itself a tested
property. Rasterization is deterministic, so fixtures are byte-identical
across runs.

An optional large "liver" ellipsoid (label 1) may be painted first; lesions
overwrite it. Lesions must not overlap each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OutOfBounds, OverlapError
from .volume_io import LabelVolume, write_nifti

DEFAULT_LESION_LABEL = 2
LIVER_LABEL = 1


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]
    label: int = DEFAULT_LESION_LABEL

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes_mm):
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes_mm}")
        if not 0 < self.label < 256:
            raise ValueError(f"label must be in [1, 255], got {self.label}")

    @property
    def analytic_volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * np.pi * a * b * c


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    lesions: tuple[Ellipsoid, ...]
    liver: Ellipsoid | None = None
    seed: int | None = None
    name: str = "phantom"

    @property
    def analytic_mean_volume_mm3(self) -> float:
        if not self.lesions:
            return 0.0
        return float(np.mean([e.analytic_volume_mm3 for e in self.lesions]))

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "lesions": [
                {
                    "center_mm": list(e.center_mm),
                    "semi_axes_mm": list(e.semi_axes_mm),
                    "label": e.label,
                    "analytic_volume_mm3": e.analytic_volume_mm3,
                }
                for e in self.lesions
            ],
            "lesion_count": len(self.lesions),
            "analytic_mean_volume_mm3": self.analytic_mean_volume_mm3,
        }
        if self.liver is not None:
            d["liver"] = {
                "center_mm": list(self.liver.center_mm),
                "semi_axes_mm": list(self.liver.semi_axes_mm),
                "label": self.liver.label,
            }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        def ell(e, default_label):
            return Ellipsoid(
                center_mm=tuple(e["center_mm"]),
                semi_axes_mm=tuple(e["semi_axes_mm"]),
                label=int(e.get("label", default_label)),
            )

        known = {"name", "dims", "spacing_mm", "lesions", "liver", "seed",
                 "lesion_count", "analytic_mean_volume_mm3"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(
            dims=tuple(int(v) for v in d["dims"]),
            spacing_mm=tuple(float(v) for v in d["spacing_mm"]),
            lesions=tuple(ell(e, DEFAULT_LESION_LABEL) for e in d.get("lesions", [])),
            liver=ell(d["liver"], LIVER_LABEL) if d.get("liver") else None,
            seed=d.get("seed"),
            name=d.get("name", "phantom"),
        )


def _ellipsoid_mask(e: Ellipsoid, dims, spacing) -> np.ndarray:
    centers = [
        (np.arange(n, dtype=np.float64) + 0.5) * s - c
        for n, s, c in zip(dims, spacing, e.center_mm)
    ]
    ax, ay, az = e.semi_axes_mm
    qx = (centers[0][:, None, None] / ax) ** 2
    qy = (centers[1][None, :, None] / ay) ** 2
    qz = (centers[2][None, None, :] / az) ** 2
    return qx + qy + qz <= 1.0


def _check_bounds(e: Ellipsoid, dims, spacing) -> None:
    extent = [n * s for n, s in zip(dims, spacing)]
    for c, a, hi in zip(e.center_mm, e.semi_axes_mm, extent):
        if c - a < 0.0 or c + a > hi:
            raise OutOfBounds(
                f"ellipsoid at {e.center_mm} with semi-axes {e.semi_axes_mm} "
                f"exceeds volume extent {extent} mm"
            )


def rasterize(spec: PhantomSpec) -> LabelVolume:
    """Paint the phantom onto a label grid; lesion overlap is an error.

    A lesion smaller than the voxel grid can resolve may rasterize to zero
    voxels; that is reported by the sidecar, not an error.
    """
    labels = np.zeros(spec.dims, dtype=np.uint8)
    if spec.liver is not None:
        _check_bounds(spec.liver, spec.dims, spec.spacing_mm)
        labels[_ellipsoid_mask(spec.liver, spec.dims, spec.spacing_mm)] = spec.liver.label
    painted = np.zeros(spec.dims, dtype=bool)
    for e in spec.lesions:
        _check_bounds(e, spec.dims, spec.spacing_mm)
        mask = _ellipsoid_mask(e, spec.dims, spec.spacing_mm)
        if (mask & painted).any():
            raise OverlapError(f"lesion at {e.center_mm} overlaps a previous lesion")
        painted |= mask
        labels[mask] = e.label
    return LabelVolume(dims=spec.dims, spacing_mm=spec.spacing_mm, labels=labels)


def write_fixture(spec: PhantomSpec, out_dir) -> tuple[Path, Path]:
    """Rasterize and write ``<name>.nii`` plus a ``<name>.json`` sidecar.

    The sidecar carries the analytic per-lesion volumes and how many voxels
    each lesion actually rasterized to, for oracle comparison.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol = rasterize(spec)
    nii_path = out_dir / f"{spec.name}.nii"
    json_path = out_dir / f"{spec.name}.json"
    write_nifti(vol, nii_path)

    sidecar = spec.to_dict()
    voxvol = vol.voxel_volume_mm3
    for entry in sidecar["lesions"]:
        mask = _ellipsoid_mask(
            Ellipsoid(tuple(entry["center_mm"]), tuple(entry["semi_axes_mm"]), entry["label"]),
            spec.dims,
            spec.spacing_mm,
        )
        entry["rasterized_voxels"] = int(mask.sum())
        entry["rasterized_volume_mm3"] = float(mask.sum() * voxvol)
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return nii_path, json_path


def random_spec(
    dims: tuple[int, int, int],
    spacing_mm: tuple[float, float, float],
    n_lesions: int,
    seed: int,
    name: str = "phantom",
    min_semi_axis_voxels: float = 1.5,
    max_semi_axis_voxels: float = 6.0,
    max_tries: int = 5000,
) -> PhantomSpec:
    """Seeded random phantom whose lesions are guaranteed well separated.

    Separation keeps distinct lesions in distinct 26-connected components:
    bounding spheres stay at least three voxel pitches apart, and every
    semi-axis is at least 1.5 voxels so each lesion rasterizes non-empty.
    """
    rng = np.random.default_rng(seed)
    s_max = max(spacing_mm)
    placed: list[Ellipsoid] = []
    tries = 0
    while len(placed) < n_lesions:
        tries += 1
        if tries > max_tries:
            raise OverlapError(
                f"could not place {n_lesions} separated lesions in {dims} after {max_tries} tries"
            )
        axes = tuple(rng.uniform(min_semi_axis_voxels, max_semi_axis_voxels) * s_max for _ in range(3))
        r = max(axes)
        lo = [r + s_max for _ in range(3)]
        hi = [n * s - r - s_max for n, s in zip(dims, spacing_mm)]
        if any(h <= l for l, h in zip(lo, hi)):
            raise OutOfBounds(f"dims {dims} too small for lesions of radius {r:.1f} mm")
        center = tuple(rng.uniform(l, h) for l, h in zip(lo, hi))
        ok = True
        for other in placed:
            d = np.linalg.norm(np.subtract(center, other.center_mm))
            if d < r + max(other.semi_axes_mm) + 3.0 * s_max:
                ok = False
                break
        if ok:
            placed.append(Ellipsoid(center_mm=center, semi_axes_mm=axes))
    return PhantomSpec(
        dims=dims, spacing_mm=spacing_mm, lesions=tuple(placed), seed=seed, name=name
    )

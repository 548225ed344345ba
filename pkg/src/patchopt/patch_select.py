"""Optimal patch-size selection and tokenization geometry.

The selection rule scores each candidate edge length M by its distance to a
target edge derived from the mean lesion volume, and picks the argmin
(smallest M on ties). Two unit readings of the target are provided:

* ``voxel-edge`` — cbrt(V_mm3 / voxel_volume_mm3): the edge, in voxels, of a
  cube holding the mean lesion volume. Dimensionally sound default.
* ``paper-literal`` — cbrt(V * s) with an explicit scalar s, the selection
  expression taken verbatim with its unit ambiguity exposed as a calibration
  knob. With V in mm³, any s in (0.15627, 0.26333) reproduces the published
  choices 16 (mean 17.56 cm³) and 12 (mean 10.42 cm³) simultaneously; the
  interval endpoints are 2744/17560 and 2744/10420 (2744 = 14³, the score
  midpoint between candidates 12 and 16).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCandidates, NeedTwoDatasets, NonPositiveInput

UNIT_VOXEL_EDGE = "voxel-edge"
UNIT_PAPER_LITERAL = "paper-literal"
UNIT_MODES = (UNIT_VOXEL_EDGE, UNIT_PAPER_LITERAL)

DEFAULT_CANDIDATES = (8, 12, 16, 24)


def target_edge(
    mean_volume_mm3: float,
    spacing_mm: tuple[float, float, float] | None = None,
    mode: str = UNIT_VOXEL_EDGE,
    scale: float | None = None,
) -> float:
    """Target cube-edge the candidates are scored against.

    voxel-edge mode needs spacing_mm; paper-literal mode needs the scalar
    ``scale`` multiplying the volume under the cube root.
    """
    if not math.isfinite(mean_volume_mm3) or mean_volume_mm3 <= 0:
        raise NonPositiveInput(f"mean volume must be positive, got {mean_volume_mm3}")
    if mode == UNIT_VOXEL_EDGE:
        if spacing_mm is None:
            raise NonPositiveInput("voxel-edge mode requires spacing_mm")
        sx, sy, sz = spacing_mm
        if min(sx, sy, sz) <= 0:
            raise NonPositiveInput(f"spacing must be positive, got {spacing_mm}")
        return float(np.cbrt(mean_volume_mm3 / (sx * sy * sz)))
    if mode == UNIT_PAPER_LITERAL:
        if scale is None or not math.isfinite(scale) or scale <= 0:
            raise NonPositiveInput(f"paper-literal mode requires a positive scale, got {scale}")
        return float(np.cbrt(mean_volume_mm3 * scale))
    raise ValueError(f"mode must be one of {UNIT_MODES}, got {mode!r}")


@dataclass(frozen=True)
class CandidateGeometry:
    patch: int
    grid: tuple[int, int, int]
    token_count: int
    padded_dims: tuple[int, int, int]
    pad_voxels: int
    divides_exactly: tuple[bool, bool, bool]

    def to_dict(self) -> dict:
        return {
            "patch": self.patch,
            "grid": list(self.grid),
            "token_count": self.token_count,
            "padded_dims": list(self.padded_dims),
            "pad_voxels": self.pad_voxels,
            "divides_exactly": list(self.divides_exactly),
        }


def token_geometry(dims: tuple[int, int, int], patch: int) -> CandidateGeometry:
    """Token grid for cubic patches of edge ``patch`` over ``dims``.

    Axes the patch does not divide are zero-padded up to the next multiple
    (ceil division); nothing is ever cropped.
    """
    if patch < 1:
        raise ValueError(f"patch size must be >= 1, got {patch}")
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    grid = tuple(-(-d // patch) for d in dims)
    padded = tuple(g * patch for g in grid)
    n = grid[0] * grid[1] * grid[2]
    pad = padded[0] * padded[1] * padded[2] - dims[0] * dims[1] * dims[2]
    return CandidateGeometry(
        patch=int(patch),
        grid=grid,
        token_count=int(n),
        padded_dims=padded,
        pad_voxels=int(pad),
        divides_exactly=tuple(d % patch == 0 for d in dims),
    )


@dataclass(frozen=True)
class PatchDecision:
    candidates: tuple[int, ...]
    target_edge_voxels: float
    scores: tuple[float, ...]  # |target - M| in candidate order
    selected: int
    geometry: tuple[CandidateGeometry, ...]
    unit_mode: str | None = None

    def to_dict(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "target_edge": self.target_edge_voxels,
            "scores": list(self.scores),
            "selected": self.selected,
            "unit_mode": self.unit_mode,
            "geometry": [g.to_dict() for g in self.geometry],
        }


def select_patch(
    target: float,
    candidates=DEFAULT_CANDIDATES,
    dims: tuple[int, int, int] = (256, 256, 96),
    unit_mode: str | None = None,
) -> PatchDecision:
    """Argmin of |target - M| over the candidates; ties go to the smallest M."""
    candidates = tuple(int(m) for m in candidates)
    if not candidates:
        raise EmptyCandidates("candidate set is empty")
    if any(m < 1 for m in candidates):
        raise ValueError(f"candidates must be >= 1, got {candidates}")
    if not math.isfinite(target) or target <= 0:
        raise NonPositiveInput(f"target edge must be positive, got {target}")
    scores = tuple(abs(target - m) for m in candidates)
    selected = min(candidates, key=lambda m: (abs(target - m), m))
    return PatchDecision(
        candidates=candidates,
        target_edge_voxels=float(target),
        scores=scores,
        selected=selected,
        geometry=tuple(token_geometry(dims, m) for m in candidates),
        unit_mode=unit_mode,
    )


@dataclass(frozen=True)
class TransferPlan:
    """Datasets ordered for pretraining: largest mean lesion volume first."""

    ordered_datasets: tuple[tuple[str, float, int], ...]  # (id, mean_mm3, selected M)

    @property
    def pretrain(self) -> str:
        return self.ordered_datasets[0][0]

    @property
    def finetune(self) -> tuple[str, ...]:
        return tuple(d[0] for d in self.ordered_datasets[1:])

    def to_dict(self) -> dict:
        return {
            "ordered_datasets": [
                {"dataset_id": i, "mean_volume_mm3": v, "selected_patch": m}
                for i, v, m in self.ordered_datasets
            ],
            "recommendation": {"pretrain_on": self.pretrain, "finetune_on": list(self.finetune)},
        }


def transfer_plan(datasets: list[tuple[str, float, int]]) -> TransferPlan:
    """Order (dataset_id, mean_volume_mm3, selected_patch) triples for transfer.

    Strictly descending mean volume; equal means fall back to dataset_id.
    The first dataset is the pretraining corpus.
    """
    if len(datasets) < 2:
        raise NeedTwoDatasets(f"transfer planning needs >= 2 datasets, got {len(datasets)}")
    ordered = tuple(sorted(datasets, key=lambda d: (-d[1], d[0])))
    return TransferPlan(ordered_datasets=ordered)

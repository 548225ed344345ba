"""3D connected-component labeling kernels.

Two interchangeable backends produce identical labelings up to component
numbering (callers re-sort components anyway):

* ``numba`` — an @njit flood fill with an explicit stack; the default when
  numba imports.
* ``numpy`` — vectorized iterative minimum-label propagation; pure numpy,
  used as fallback and for cross-checking. Iteration count grows with the
  longest component diameter, so it is the slow path on large volumes.

Select with ``PATCHOPT_BACKEND=numba|numpy``. ``benchmarks/bench_labeling.py``
compares the two.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_ENV_VAR = "PATCHOPT_BACKEND"


def neighbor_offsets(connectivity: int) -> np.ndarray:
    """(k, 3) int64 offsets for 6- (faces) or 26- (faces+edges+corners) adjacency."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if (dx, dy, dz) == (0, 0, 0):
                    continue
                if connectivity == 6 and abs(dx) + abs(dy) + abs(dz) != 1:
                    continue
                offs.append((dx, dy, dz))
    return np.array(offs, dtype=np.int64)


def active_backend() -> str:
    """Resolve the labeling backend from the environment."""
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice == "":
        choice = "numba" if HAVE_NUMBA else "numpy"
    if choice not in ("numba", "numpy"):
        raise ValueError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAVE_NUMBA:
        raise RuntimeError(f"{_ENV_VAR}=numba but numba is not importable")
    return choice


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label connected True-regions of a 3D boolean mask.

    Returns (labels, count) where labels is int32 with 0 for background and
    1..count for components. Component numbering is backend-dependent.
    """
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    offs = neighbor_offsets(connectivity)
    if active_backend() == "numba":
        return _label_flood(mask, offs)
    return _label_propagate(mask, offs)


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _label_flood(mask, offsets):
        h, w, l = mask.shape
        labels = np.zeros((h, w, l), np.int32)
        stack = np.empty(h * w * l, np.int64)
        ncomp = 0
        for x in range(h):
            for y in range(w):
                for z in range(l):
                    if mask[x, y, z] and labels[x, y, z] == 0:
                        ncomp += 1
                        labels[x, y, z] = ncomp
                        stack[0] = (x * w + y) * l + z
                        top = 1
                        while top > 0:
                            top -= 1
                            idx = stack[top]
                            cx = idx // (w * l)
                            cy = (idx // l) % w
                            cz = idx % l
                            for k in range(offsets.shape[0]):
                                nx = cx + offsets[k, 0]
                                ny = cy + offsets[k, 1]
                                nz = cz + offsets[k, 2]
                                if 0 <= nx < h and 0 <= ny < w and 0 <= nz < l:
                                    if mask[nx, ny, nz] and labels[nx, ny, nz] == 0:
                                        labels[nx, ny, nz] = ncomp
                                        stack[top] = (nx * w + ny) * l + nz
                                        top += 1
        return labels, ncomp


def _shifted(arr: np.ndarray, off, fill):
    """arr translated by +off with out-of-range cells set to fill."""
    out = np.full_like(arr, fill)
    src = []
    dst = []
    for d, n in zip(off, arr.shape):
        if d >= 0:
            src.append(slice(0, n - d))
            dst.append(slice(d, n))
        else:
            src.append(slice(-d, n))
            dst.append(slice(0, n + d))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _label_propagate(mask: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, int]:
    size = mask.size
    sentinel = np.int64(size)
    lab = np.where(mask, np.arange(size, dtype=np.int64).reshape(mask.shape), sentinel)
    while True:
        best = lab.copy()
        for off in offsets:
            np.minimum(best, _shifted(lab, off, sentinel), out=best)
        best = np.where(mask, best, sentinel)
        if np.array_equal(best, lab):
            break
        lab = best
    roots = np.unique(lab[mask])
    labels = np.zeros(mask.shape, np.int32)
    if roots.size:
        labels[mask] = np.searchsorted(roots, lab[mask]) + 1
    return labels, int(roots.size)

"""Non-overlapping 3D patch extraction, linear embedding, and the exact inverse.

A volume indexed [x, y, z] (optionally with a trailing channel axis) is cut
into cubic patches of edge M. Patch p runs z-major over the patch grid
(z slowest, x fastest); within one flattened patch the voxel order is the
volume's canonical x-fastest order, with the channel axis slowest. Axes M
does not divide are zero-padded; extraction and reassembly are mutually
inverse on every voxel of the original extent.

Tokens are ``patches @ E + E_pos``: a learned projection plus a learned
1D positional table, both initialized as seeded Gaussians (std 0.02).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .patch_select import token_geometry

INIT_STD = 0.02

_TOKENS_MAGIC = b"PTOK"


def _as_4d(volume: np.ndarray) -> np.ndarray:
    if volume.ndim == 3:
        return volume[..., np.newaxis]
    if volume.ndim == 4:
        return volume
    raise ShapeMismatch(f"volume must be 3D or 4D (trailing channels), got shape {volume.shape}")


def extract_patches(volume: np.ndarray, patch: int) -> np.ndarray:
    """Flatten a volume into an (N, M³·C) patch matrix.

    Every input voxel lands in exactly one row; padding voxels are zero.
    """
    vol = _as_4d(np.asarray(volume, dtype=np.float64))
    geo = token_geometry(vol.shape[:3], patch)
    c = vol.shape[3]
    pad = [(0, p - d) for p, d in zip(geo.padded_dims, vol.shape[:3])] + [(0, 0)]
    vol = np.pad(vol, pad)
    gh, gw, gl = geo.grid
    m = patch
    # axes after reshape: (gx, px, gy, py, gz, pz, c)
    blocks = vol.reshape(gh, m, gw, m, gl, m, c)
    # row order: gz major, gx minor; within a row: c slowest, x fastest
    blocks = blocks.transpose(4, 2, 0, 6, 5, 3, 1)
    return np.ascontiguousarray(blocks).reshape(geo.token_count, m * m * m * c)


def detokenize(
    patches: np.ndarray,
    grid: tuple[int, int, int],
    patch: int,
    original_dims,
) -> np.ndarray:
    """Inverse of extract_patches: reassemble and strip padding.

    ``original_dims`` may be (H, W, L) or (H, W, L, C); the returned array
    has exactly that shape.
    """
    original_dims = tuple(int(d) for d in original_dims)
    if len(original_dims) == 3:
        dims, c = original_dims, 1
    elif len(original_dims) == 4:
        dims, c = original_dims[:3], original_dims[3]
    else:
        raise ShapeMismatch(f"original_dims must have 3 or 4 entries, got {original_dims}")
    gh, gw, gl = (int(g) for g in grid)
    m = patch
    n = gh * gw * gl
    patches = np.asarray(patches)
    if patches.shape != (n, m * m * m * c):
        raise ShapeMismatch(
            f"patches shape {patches.shape} != ({n}, {m * m * m * c}) for grid {grid}, M={m}, C={c}"
        )
    if any(g * m < d for g, d in zip((gh, gw, gl), dims)):
        raise ShapeMismatch(f"grid {grid} with M={m} cannot cover dims {dims}")
    blocks = patches.reshape(gl, gw, gh, c, m, m, m)
    vol = blocks.transpose(2, 6, 1, 5, 0, 4, 3).reshape(gh * m, gw * m, gl * m, c)
    vol = vol[: dims[0], : dims[1], : dims[2], :]
    return vol.reshape(original_dims)


@dataclass(frozen=True)
class EmbeddingParams:
    """Projection E (M³·C × P) and positional table E_pos (N × P)."""

    projection: np.ndarray
    positional: np.ndarray

    def __post_init__(self):
        e, pos = np.asarray(self.projection), np.asarray(self.positional)
        if e.ndim != 2 or pos.ndim != 2 or e.shape[1] != pos.shape[1]:
            raise ShapeMismatch(
                f"projection {e.shape} and positional {pos.shape} must be 2D with equal width"
            )
        if not (np.isfinite(e).all() and np.isfinite(pos).all()):
            raise ValueError("embedding parameters must be finite")

    @classmethod
    def seeded(cls, patch_dim: int, token_count: int, embed_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(
            projection=rng.normal(0.0, INIT_STD, (patch_dim, embed_dim)),
            positional=rng.normal(0.0, INIT_STD, (token_count, embed_dim)),
        )


@dataclass(frozen=True)
class TokenSequence:
    """Embedded tokens with the geometry they came from."""

    tokens: np.ndarray  # (N, P)
    patch_dim: int
    grid: tuple[int, int, int] | None = None

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[1]


def embed(patches: np.ndarray, params: EmbeddingParams, grid=None) -> TokenSequence:
    """tokens = patches @ E + E_pos, rows independent."""
    patches = np.asarray(patches, dtype=np.float64)
    e, pos = params.projection, params.positional
    if patches.ndim != 2 or patches.shape[1] != e.shape[0]:
        raise ShapeMismatch(f"patches {patches.shape} incompatible with projection {e.shape}")
    if pos.shape[0] != patches.shape[0]:
        raise ShapeMismatch(f"positional table rows {pos.shape[0]} != token count {patches.shape[0]}")
    if grid is not None:
        gh, gw, gl = grid
        if gh * gw * gl != patches.shape[0]:
            raise ShapeMismatch(f"grid {grid} does not match token count {patches.shape[0]}")
        grid = (int(gh), int(gw), int(gl))
    return TokenSequence(tokens=patches @ e + pos, patch_dim=patches.shape[1], grid=grid)


def embed_backward(
    patches: np.ndarray, params: EmbeddingParams, d_tokens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_patches, dE, dE_pos) for the embedding step."""
    patches = np.asarray(patches, dtype=np.float64)
    d_tokens = np.asarray(d_tokens, dtype=np.float64)
    e = params.projection
    if d_tokens.shape != (patches.shape[0], e.shape[1]):
        raise ShapeMismatch(f"d_tokens shape {d_tokens.shape} != ({patches.shape[0]}, {e.shape[1]})")
    return d_tokens @ e.T, patches.T @ d_tokens, d_tokens.copy()


def tokenize_volume(volume: np.ndarray, patch: int, params: EmbeddingParams) -> TokenSequence:
    """Extract, project, and positionally embed a volume in one call."""
    vol = _as_4d(np.asarray(volume, dtype=np.float64))
    geo = token_geometry(vol.shape[:3], patch)
    return embed(extract_patches(vol, patch), params, grid=geo.grid)


def write_tokens(path, tokens: np.ndarray) -> None:
    """Flat binary token matrix: magic PTOK, u32 N, u32 P, float64 row-major."""
    tokens = np.ascontiguousarray(tokens, dtype="<f8")
    n, p = tokens.shape
    with open(path, "wb") as f:
        f.write(_TOKENS_MAGIC)
        f.write(struct.pack("<II", n, p))
        f.write(tokens.tobytes())


def read_tokens(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TOKENS_MAGIC:
            raise ValueError(f"{path}: bad token-file magic {magic!r}")
        n, p = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(n * p * 8), dtype="<f8")
    if data.size != n * p:
        raise ValueError(f"{path}: token data truncated")
    return data.reshape(n, p).copy()

"""Deterministic patch-feature backbones.

`builtin-gray-patch` computes per-cell intensity/gradient statistics on a
fixed grid and projects them into the requested dimension with a projection
matrix seeded by (model id, dim). It is a classical stand-in with the same
interface a learned backbone would have: identical inputs always produce
identical features, and the model id plus pooling method are recorded in
file metadata.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_BASE_STATS = 8  # per-cell raw statistics before projection

KNOWN_MODELS = ("builtin-gray-patch",)


class ModelError(RuntimeError):
    """Unknown model identifier or inference failure."""


def _projection(model_id: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2s(
        f"{model_id}:{dim}".encode(), digest_size=8
    ).digest()
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(int.from_bytes(digest, "little")))
    )
    return rng.normal(size=(_BASE_STATS, dim)).astype(np.float32) / np.sqrt(
        _BASE_STATS
    )


@dataclass(frozen=True)
class PatchExtractor:
    model_id: str
    dim: int
    grid: tuple[int, int]  # (rows, cols)

    def __post_init__(self) -> None:
        if self.model_id not in KNOWN_MODELS:
            raise ModelError(
                f"unknown model {self.model_id!r}; known: {', '.join(KNOWN_MODELS)}"
            )
        if self.dim < 1:
            raise ValueError("feature dim must be positive")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("grid must be positive")

    def cell_features(self, rgb: np.ndarray) -> np.ndarray:
        """(grid_rows * grid_cols, dim) float32 patch features, row-major."""
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ModelError("expected an (H, W, 3) RGB array")
        h, w, _ = rgb.shape
        gh, gw = self.grid
        img = rgb.astype(np.float32) / 255.0
        lum = img.mean(axis=2)
        gy, gx = np.gradient(lum)
        stats = np.zeros((gh * gw, _BASE_STATS), dtype=np.float32)
        for r in range(gh):
            r0, r1 = r * h // gh, max(r * h // gh + 1, (r + 1) * h // gh)
            for c in range(gw):
                c0, c1 = c * w // gw, max(c * w // gw + 1, (c + 1) * w // gw)
                cell = img[r0:r1, c0:c1]
                cell_lum = lum[r0:r1, c0:c1]
                stats[r * gw + c] = (
                    float(cell_lum.mean()),
                    float(cell_lum.std()),
                    float(cell[..., 0].mean()),
                    float(cell[..., 1].mean()),
                    float(cell[..., 2].mean()),
                    float(np.abs(gx[r0:r1, c0:c1]).mean()),
                    float(np.abs(gy[r0:r1, c0:c1]).mean()),
                    float((np.abs(gx[r0:r1, c0:c1]) > 0.05).mean()),
                )
        return (stats @ _projection(self.model_id, self.dim)).astype(np.float32)

    def frame_key(self, rgb: np.ndarray) -> np.ndarray:
        """Global average pooled key ("gap")."""
        return self.cell_features(rgb).mean(axis=0).astype(np.float32)

    def masked_mean(self, rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Masked mean over per-pixel features (each pixel inherits its
        cell's feature); the zero vector for an empty mask."""
        if not mask.any():
            return np.zeros(self.dim, dtype=np.float32)
        h, w, _ = rgb.shape
        gh, gw = self.grid
        cells = self.cell_features(rgb)
        rows, cols = np.nonzero(mask)
        cell_idx = (rows * gh // h) * gw + (cols * gw // w)
        return cells[cell_idx].mean(axis=0).astype(np.float32)

    @property
    def metadata_tag(self) -> str:
        return f"model={self.model_id};dim={self.dim}"

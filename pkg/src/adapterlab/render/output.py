from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class RayContribs:
    """Per-pixel (weight, depth) lists stored as CSR arrays.

    Entries of pixel ``p`` live in ``weights[offsets[p]:offsets[p + 1]]`` and
    are sorted front to back.
    """

    offsets: np.ndarray
    weights: np.ndarray
    taus: np.ndarray

    @property
    def n_pixels(self) -> int:
        return len(self.offsets) - 1

    def for_pixel(self, p: int) -> list[tuple[float, float]]:
        a, b = self.offsets[p], self.offsets[p + 1]
        return list(zip(self.weights[a:b].tolist(), self.taus[a:b].tolist()))

    def pixel_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_pixels), np.diff(self.offsets))

    def totals(self) -> np.ndarray:
        out = np.zeros(self.n_pixels)
        np.add.at(out, self.pixel_index(), self.weights)
        return out

    @classmethod
    def from_sorted(cls, pixel: np.ndarray, weights: np.ndarray, taus: np.ndarray, n_pixels: int) -> "RayContribs":
        """Build from entries already grouped by pixel and depth-sorted within each pixel."""
        counts = np.bincount(pixel, minlength=n_pixels)
        offsets = np.zeros(n_pixels + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(offsets, np.asarray(weights, dtype=np.float64), np.asarray(taus, dtype=np.float64))

    def permuted(self, perm: np.ndarray) -> "RayContribs":
        """Reorder pixels so that new pixel ``i`` is old pixel ``perm[i]``."""
        counts = np.diff(self.offsets)[perm]
        starts = self.offsets[:-1][perm]
        idx = np.concatenate([np.arange(s, s + c) for s, c in zip(starts, counts)]) if len(perm) else np.zeros(0, int)
        offsets = np.zeros(len(perm) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return RayContribs(offsets, self.weights[idx], self.taus[idx])


@dataclass(frozen=True, eq=False)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), 0 where empty
    normal: np.ndarray  # (H, W, 3), zero where undefined
    per_ray_contribs: RayContribs | None = None

    def rgbad(self) -> np.ndarray:
        """Stack as an (H, W, 5) RGB / alpha / depth image."""
        return np.concatenate([self.rgb, self.alpha[..., None], self.depth[..., None]], axis=-1)

    def permuted_pixels(self, perm: np.ndarray) -> "RenderOutput":
        """Apply a pixel permutation (flat index) to every map and the contribution lists."""
        h, w = self.alpha.shape

        def shuf(a):
            flat = a.reshape(h * w, *a.shape[2:])
            return flat[perm].reshape(a.shape)

        contribs = self.per_ray_contribs.permuted(perm) if self.per_ray_contribs is not None else None
        return RenderOutput(shuf(self.rgb), shuf(self.alpha), shuf(self.depth), shuf(self.normal), contribs)

"""Isotropic Gaussian splats composited front to back."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .output import RayContribs, RenderOutput
from .shading import normals_from_depth

FOOTPRINT_SIGMAS = 3.0
NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class SplatSet:
    centers: np.ndarray  # (M, 3)
    scales: np.ndarray  # (M,) world-space std
    opacities: np.ndarray  # (M,) in (0, 1]
    colors: np.ndarray  # (M, 3)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        m = len(c)
        s = np.asarray(self.scales, dtype=np.float64).reshape(m)
        o = np.asarray(self.opacities, dtype=np.float64).reshape(m)
        col = np.asarray(self.colors, dtype=np.float64).reshape(m, 3)
        if (s <= 0).any():
            raise ValueError("splat scales must be positive")
        if (o <= 0).any() or (o > 1).any():
            raise ValueError("splat opacities must lie in (0, 1]")
        for name, v in (("centers", c), ("scales", s), ("opacities", o), ("colors", col)):
            object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, parts) -> "SplatSet":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.centers for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
        )


def _splat_pixel_pairs(splats: SplatSet, cam: Camera):
    """Enumerate (splat, pixel) pairs inside each splat's 3-sigma footprint."""
    u, v, z = cam.project(splats.centers)
    front = z > NEAR
    idx = np.flatnonzero(front)
    u, v, z = u[idx], v[idx], z[idx]
    s_px = cam.focal * splats.scales[idx] / z
    r = FOOTPRINT_SIGMAS * s_px
    x0 = np.clip(np.ceil(u - r - 0.5), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(u + r - 0.5) + 1, 0, cam.width).astype(np.int64)
    y0 = np.clip(np.ceil(v - r - 0.5), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(v + r - 0.5) + 1, 0, cam.height).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[owner] + local % np.maximum(nx[owner], 1)
    py = y0[owner] + local // np.maximum(nx[owner], 1)
    d2 = (px + 0.5 - u[owner]) ** 2 + (py + 0.5 - v[owner]) ** 2
    inside = d2 <= r[owner] ** 2
    owner, px, py, d2 = owner[inside], px[inside], py[inside], d2[inside]
    a = splats.opacities[idx[owner]] * np.exp(-0.5 * d2 / s_px[owner] ** 2)
    keep = a > 0
    return idx[owner[keep]], py[keep] * cam.width + px[keep], a[keep], z[owner[keep]]


def composite_splats(
    splats: SplatSet, cam: Camera, background=(1.0, 1.0, 1.0), normal_threshold: float = 0.5
) -> RenderOutput:
    """Front-to-back compositing with w_m = a_m prod_{j<m} (1 - a_j).

    Ordering inside a pixel is by camera depth, with ties broken by splat
    attributes so the result does not depend on the input order.
    """
    h, w = cam.height, cam.width
    n_pix = h * w
    sid, pix, a, tau = _splat_pixel_pairs(splats, cam)
    c = splats.colors[sid]
    # canonical splat order for depth ties, independent of input order
    canon = np.empty(len(splats), dtype=np.int64)
    canon[np.lexsort((*splats.colors.T[::-1], splats.opacities, splats.scales, *splats.centers.T[::-1]))] = np.arange(len(splats))
    order = np.lexsort((canon[sid], tau, pix))
    pix, a, tau, c = pix[order], a[order], tau[order], c[order]

    counts = np.bincount(pix, minlength=n_pix)
    rank = np.arange(len(pix)) - (np.cumsum(counts) - counts)[pix]
    by_rank = np.argsort(rank, kind="stable")
    bounds = np.searchsorted(rank[by_rank], np.arange(int(rank.max()) + 2 if len(rank) else 1))
    trans = np.ones(n_pix)
    weights = np.empty(len(pix))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = by_rank[lo:hi]
        p = pix[sel]
        weights[sel] = a[sel] * trans[p]
        trans[p] *= 1.0 - a[sel]

    alpha = 1.0 - trans
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    # bincount returns integers when there are no entries
    rgb = np.stack([np.bincount(pix, weights * c[:, k], minlength=n_pix) for k in range(3)], axis=1).astype(np.float64)
    rgb += (1.0 - alpha)[:, None] * bg
    wt = np.bincount(pix, weights * tau, minlength=n_pix).astype(np.float64)
    depth = np.where(alpha > 0, wt / np.maximum(alpha, 1e-6), 0.0)

    alpha = alpha.reshape(h, w)
    depth = depth.reshape(h, w)
    normal = normals_from_depth(depth, cam, mask=alpha > normal_threshold)
    contribs = RayContribs.from_sorted(pix, weights, tau, n_pix)
    return RenderOutput(rgb.reshape(h, w, 3), alpha, depth, normal, contribs)

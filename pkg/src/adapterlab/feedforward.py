"""Closed-form reconstructors used as fast stand-ins for a feed-forward model.

``fit_feedforward_quads`` solves for a quad texture on known geometry.
``fit_feedforward_splats`` carves an occupancy lattice from the views' alpha
and depth and turns occupied voxels into splats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import SplatSet, composite_splats
from .render.mesh import sample_bilinear


@dataclass(frozen=True, eq=False)
class QuadFit:
    texture: np.ndarray  # (n, n, 3)
    filled: np.ndarray  # (n, n) bool


def quad_texel_ids(quad, cams):
    """Flat texel id per pixel per view, -1 where the quad is not hit."""
    out = []
    n = quad.texture.shape[0]
    for cam in cams:
        ok, _, row, col = quad.hit(cam)
        out.append(np.where(ok, row * n + col, -1))
    return out


def fit_feedforward_quads(targets, cams, quad, view_weights=None, background=1.0) -> QuadFit:
    """Per-texel weighted least squares of view colours on fixed quad geometry.

    With nearest-texel lookup each texel only touches the pixels that map to
    it, so the normal equations are diagonal: the texel colour is the weighted
    mean of those pixels.  Texels seen by no view are flagged unfilled and set
    to ``background``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = quad.texture.shape[0]
    wv = np.ones(len(cams)) if view_weights is None else np.asarray(view_weights, dtype=np.float64)
    num = np.zeros((n * n, 3))
    den = np.zeros(n * n)
    for v, ids in enumerate(quad_texel_ids(quad, cams)):
        hit = ids >= 0
        rgb = targets[v, ..., :3].reshape(-1, 3)
        np.add.at(num, ids[hit], wv[v] * rgb[hit])
        np.add.at(den, ids[hit], wv[v])
    filled = den > 0
    tex = np.full((n * n, 3), float(background))
    tex[filled] = num[filled] / den[filled, None]
    return QuadFit(tex.reshape(n, n, 3), filled.reshape(n, n))


def render_quad_fit(fit: QuadFit, quad, cams) -> np.ndarray:
    from .world import TexturedQuad, render_quad

    q = TexturedQuad(quad.center, quad.axis_u, quad.axis_v, quad.half_size, fit.texture)
    return np.stack([render_quad(q, cam).rgbad() for cam in cams])


@dataclass(frozen=True)
class SplatFitConfig:
    lattice: int = 32
    bounds: float = 1.0
    bandwidth: float = 0.35  # depth agreement width, in lattice spacings
    min_occupancy: float = 0.2
    scale_factor: float = 0.55
    opacity: float = 0.95


def fit_feedforward_splats(targets, cams, cfg: SplatFitConfig = SplatFitConfig()) -> SplatSet:
    """Vote occupancy of lattice points from alpha and depth of every view.

    A view supports a point when its ray hits foreground at a depth close to
    the point's depth (Gaussian in the difference), and argues against it when
    the ray is background or passes the point's depth before hitting anything.
    Points hidden behind the observed surface get no vote from that view.
    Occupancy is support / (support + against); colours are the support-weighted
    mean of the view colours.
    """
    targets = np.asarray(targets, dtype=np.float64)
    g = np.linspace(-cfg.bounds, cfg.bounds, cfg.lattice)
    spacing = g[1] - g[0]
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    h = cfg.bandwidth * spacing
    pos = np.zeros(len(pts))
    neg = np.zeros(len(pts))
    col = np.zeros((len(pts), 3))
    for view, cam in zip(targets, cams):
        u, v, z = cam.project(pts)
        inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(inside)
        ui, vi, zi = u[idx], v[idx], z[idx]
        s = sample_bilinear(view, ui, vi)
        a = np.clip(s[:, 3], 0.0, 1.0)
        d = np.maximum(s[:, 4], 0.0)
        rgb = np.clip(s[:, :3], 0.0, 1.0)
        agree = np.exp(-0.5 * ((zi - d) / h) ** 2)
        support = a * agree
        against = (1.0 - a) + a * (1.0 - agree) * (zi < d)
        pos[idx] += support
        neg[idx] += against
        col[idx] += support[:, None] * rgb
    occ = pos / (pos + neg + 1e-9)
    keep = occ > cfg.min_occupancy
    colors = col[keep] / np.maximum(pos[keep], 1e-12)[:, None]
    m = int(keep.sum())
    return SplatSet(
        pts[keep],
        np.full(m, cfg.scale_factor * spacing),
        np.clip(cfg.opacity * occ[keep], 1e-6, 1.0),
        np.clip(colors, 0.0, 1.0),
    )


def render_splats(splats: SplatSet, cams):
    return [composite_splats(splats, cam) for cam in cams]

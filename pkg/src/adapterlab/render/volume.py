"""Dense density/colour grids rendered by emission-absorption ray marching.

Grid values live on the nodes of an N^3 lattice spanning ``bounds`` and are
trilinearly interpolated.  Ray sampling geometry (sample depths, spacings and
the interpolation matrix) is independent of grid values, so it is built once
by :func:`march_rays` and reused by the fitter for forward and adjoint passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .camera import Camera
from .output import RayContribs, RenderOutput
from .shading import normals_from_depth

DEPTH_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    density: np.ndarray  # (N, N, N), indexed [x, y, z]
    color: np.ndarray  # (N, N, N, 3)
    bounds: np.ndarray  # (2, 3): lo, hi

    def __post_init__(self):
        d = np.asarray(self.density, dtype=np.float64)
        c = np.asarray(self.color, dtype=np.float64)
        b = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        n = d.shape[0]
        if d.ndim != 3 or d.shape != (n, n, n) or n < 2:
            raise ValueError("density must be a cubic grid with resolution >= 2")
        if c.shape != d.shape + (3,):
            raise ValueError("color grid shape mismatch")
        if (d < 0).any() or not np.isfinite(d).all():
            raise ValueError("density must be finite and non-negative")
        if (c < 0).any() or (c > 1).any():
            raise ValueError("color must lie in [0, 1]")
        if not (b[1] > b[0]).all():
            raise ValueError("bounds must have positive extent")
        object.__setattr__(self, "density", d)
        object.__setattr__(self, "color", c)
        object.__setattr__(self, "bounds", b)

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.bounds[0, i], self.bounds[1, i], self.resolution) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_function(cls, density_fn, color_fn, resolution, bounds=((-1, -1, -1), (1, 1, 1))):
        b = np.asarray(bounds, dtype=np.float64)
        axes = [np.linspace(b[0, i], b[1, i], resolution) for i in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(density_fn(pts), color_fn(pts), b)


def trilinear_matrix(points: np.ndarray, resolution: int, bounds: np.ndarray) -> sp.csr_matrix:
    """Sparse (P, N^3) matrix interpolating node values at ``points``."""
    lo, hi = bounds
    g = (points - lo) / (hi - lo) * (resolution - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, resolution - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    rows, cols, vals = [], [], []
    p = np.arange(len(points))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                idx = ((i0[:, 0] + dx) * resolution + (i0[:, 1] + dy)) * resolution + (i0[:, 2] + dz)
                rows.append(p)
                cols.append(idx)
                vals.append(wx * wy * wz)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(points), resolution**3),
    )


def ray_box(origin: np.ndarray, dirs: np.ndarray, bounds: np.ndarray):
    """Slab intersection; returns (t_near, t_far) in units of ``dirs``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origin) * inv
        t1 = (bounds[1] - origin) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return np.max(tmin, axis=-1), np.min(tmax, axis=-1)


@dataclass(eq=False)
class RaySamples:
    """Padded (rays x samples) sampling layout for one camera."""

    height: int
    width: int
    tau: np.ndarray  # (R, S) z-depth at interval midpoints
    dtau: np.ndarray  # (R, S) interval length in tau units, 0 for padding
    ds: np.ndarray  # (R, S) interval path length, 0 for padding
    valid: np.ndarray  # flat indices of real samples in the (R, S) layout
    interp: sp.csr_matrix  # (n_valid, N^3)

    @property
    def n_rays(self) -> int:
        return self.tau.shape[0]


def march_rays(cam: Camera, resolution: int, bounds: np.ndarray, step: float) -> RaySamples:
    if not step > 0:
        raise ValueError("step must be positive")
    origin = cam.center
    if not np.isfinite(origin).all() or np.abs(origin).max() > 1e6:
        raise ValueError("camera outside numeric range")
    bounds = np.asarray(bounds, dtype=np.float64)
    dirs = cam.ray_directions().reshape(-1, 3)
    speed = np.linalg.norm(dirs, axis=-1)  # path length per unit tau
    t_near, t_far = ray_box(origin, dirs, bounds)
    t_near = np.maximum(t_near, 1e-9)
    length = np.where(t_far > t_near, t_far - t_near, 0.0)
    dt = step / speed
    counts = np.ceil(length / dt - 1e-9).astype(np.int64)
    counts[length <= 0] = 0
    n_max = max(int(counts.max()) if counts.size else 0, 1)
    k = np.arange(n_max)[None, :]
    start = t_near[:, None] + k * dt[:, None]
    end = np.minimum(start + dt[:, None], t_far[:, None])
    mask = k < counts[:, None]
    dtau = np.where(mask, end - start, 0.0)
    tau = np.where(mask, start + 0.5 * dtau, 0.0)
    ds = dtau * speed[:, None]
    valid = np.flatnonzero(mask)
    rr = valid // n_max
    pts = origin + dirs[rr] * tau.reshape(-1)[valid][:, None]
    interp = trilinear_matrix(pts, resolution, bounds)
    return RaySamples(cam.height, cam.width, tau, dtau, ds, valid, interp)


def sample_field(samples: RaySamples, values: np.ndarray) -> np.ndarray:
    """Interpolate node values, shaped (N^3,) / (N,N,N) or with a trailing channel axis, onto (R, S[, C])."""
    n = samples.interp.shape[1]
    flat = values.reshape(n, -1)
    out = np.zeros((samples.tau.size, flat.shape[1]))
    out[samples.valid] = samples.interp @ flat
    if values.size == n:
        return out.reshape(samples.tau.shape)
    return out.reshape(samples.tau.shape + (flat.shape[1],))


def composite(sigma: np.ndarray, color: np.ndarray, samples: RaySamples, background) -> dict:
    """Front-to-back emission-absorption compositing on padded samples."""
    od = sigma * samples.ds
    cum = np.cumsum(od, axis=1)
    trans = np.exp(-(cum - od))
    ext = np.exp(-od)
    w = trans * (1.0 - ext)
    alpha = w.sum(axis=1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    rgb = np.einsum("rs,rsc->rc", w, color) + (1.0 - alpha)[:, None] * bg
    denom = np.maximum(alpha, DEPTH_EPS)
    depth = (w * samples.tau).sum(axis=1) / denom
    return dict(w=w, trans=trans, ext=ext, alpha=alpha, rgb=rgb, depth=depth, denom=denom, color=color, bg=bg)


def composite_backward(cache: dict, samples: RaySamples, g_rgb=None, g_alpha=None, g_depth=None, g_w=None):
    """Adjoint of :func:`composite`; returns (dL/dsigma, dL/dcolor) on the padded layout."""
    w = cache["w"]
    gw = np.zeros_like(w) if g_w is None else np.array(g_w, dtype=np.float64)
    g_color = None
    if g_rgb is not None:
        gw += np.einsum("rc,rsc->rs", g_rgb, cache["color"]) - (g_rgb @ cache["bg"])[:, None]
        g_color = w[..., None] * g_rgb[:, None, :]
    if g_alpha is not None:
        gw += g_alpha[:, None]
    if g_depth is not None:
        alpha, denom, depth = cache["alpha"], cache["denom"], cache["depth"]
        above = alpha > DEPTH_EPS
        # d(depth)/dw_i = tau_i / denom - depth / denom * [alpha > eps]
        gw += g_depth[:, None] * (samples.tau - np.where(above, depth, 0.0)[:, None]) / denom[:, None]
    contrib = w * gw
    later = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    g_sigma = samples.ds * (cache["trans"] * cache["ext"] * gw - later)
    return g_sigma, g_color


def contribs_from_weights(w: np.ndarray, tau: np.ndarray) -> RayContribs:
    pix, s = np.nonzero(w > 0)
    return RayContribs.from_sorted(pix, w[pix, s], tau[pix, s], w.shape[0])


def raymarch_volume(
    grid: VolumeGrid,
    cam: Camera,
    step: float | None = None,
    background=(1.0, 1.0, 1.0),
    normal_threshold: float = 0.5,
) -> RenderOutput:
    """Render a volume grid; contributions are the discrete weights T_i (1 - exp(-sigma_i ds_i))."""
    step = grid.diagonal / 256 if step is None else step
    samples = march_rays(cam, grid.resolution, grid.bounds, step)
    sigma = sample_field(samples, grid.density)
    color = sample_field(samples, grid.color)
    out = composite(sigma, color, samples, background)
    h, w = cam.height, cam.width
    alpha = out["alpha"].reshape(h, w)
    depth = np.where(out["alpha"] > 0, out["depth"], 0.0).reshape(h, w)
    normal = normals_from_depth(depth, cam, mask=alpha > normal_threshold)
    return RenderOutput(
        out["rgb"].reshape(h, w, 3), alpha, depth, normal, contribs_from_weights(out["w"], samples.tau)
    )

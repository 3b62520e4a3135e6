"""Losses and metrics for multi-view renders, rays and meshes.

Most fitting losses come in two forms: an exact metric and a ``*_grad``
variant returning (value, gradient) that the volume fitter backpropagates
through.  Where the exact loss has a kink the gradient variant uses the
epsilon-smoothed form documented on it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .render.output import RayContribs, RenderOutput

TV_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    alpha: float = 1.0
    depth: float = 0.1
    perceptual: float = 1.0
    normal_tv: float = 0.01
    entropy: float = 0.001
    laplacian: float = 1.0
    normal_consistency: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and non-negative")


def _as_rgbad(x) -> np.ndarray:
    if isinstance(x, RenderOutput):
        return x.rgbad()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 5:
        raise ValueError("expected RGB + alpha + depth channels")
    return x


def l1_rgbad(render, target, w: LossWeights = LossWeights()) -> float:
    """w_rgb mean|d rgb| + w_alpha mean|d alpha| + w_depth mean|d depth|."""
    r, t = _as_rgbad(render), _as_rgbad(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    d = np.abs(r - t)
    return float(w.rgb * d[..., :3].mean() + w.alpha * d[..., 3].mean() + w.depth * d[..., 4].mean())


def l1_rgbad_grad(render: np.ndarray, target: np.ndarray, w: LossWeights = LossWeights(), tol: float = 1e-12):
    """Value and subgradient w.r.t. the render channels.

    The subgradient is sign(d), taken as 0 where |d| <= tol so that rounding
    noise on an exact match does not produce a full-size gradient.
    """
    d = render - target
    n = d[..., 0].size
    scale = np.array([w.rgb / 3, w.rgb / 3, w.rgb / 3, w.alpha, w.depth]) / n
    return l1_rgbad(render, target, w), np.where(np.abs(d) > tol, np.sign(d), 0.0) * scale


def rend_weight(t, sched) -> float:
    a, s = sched.alpha(t), sched.sigma(t)
    return float(a / np.sqrt(a * a + s * s))


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak**2 / mse)


# ---------------------------------------------------------------- normals


def erode_mask(mask: np.ndarray, iterations: int = 2) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    for _ in range(iterations):
        m = ndimage.minimum_filter(m, size=3, mode="constant", cval=0.0)
    return m


def _forward_diffs(n: np.ndarray):
    gx = np.zeros_like(n)
    gy = np.zeros_like(n)
    gx[:, :-1] = n[:, 1:] - n[:, :-1]
    gy[:-1, :] = n[1:, :] - n[:-1, :]
    return gx, gy


def normal_tv_l15(normal: np.ndarray, mask: np.ndarray) -> float:
    """sum_{h,w,c} || mask_hw * (dx n_c, dy n_c) ||^1.5 with forward differences."""
    gx, gy = _forward_diffs(np.asarray(normal, dtype=np.float64))
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return float((np.hypot(m * gx, m * gy) ** 1.5).sum())


def normal_tv_l15_grad(normal: np.ndarray, mask: np.ndarray, eps: float = TV_EPS):
    """Smoothed form sum (|g|^2 + eps^2)^0.75 - eps^1.5; returns (value, dL/dnormal)."""
    gx, gy = _forward_diffs(normal)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    ax, ay = m * gx, m * gy
    q = ax * ax + ay * ay + eps * eps
    # subtract (eps^2)^0.75 rather than eps^1.5 so a flat map gives exactly 0
    value = float((q**0.75 - (eps * eps) ** 0.75).sum())
    c = 1.5 * q**-0.25 * m
    dx, dy = c * ax, c * ay
    g = np.zeros_like(normal)
    g[:, 1:] += dx[:, :-1]
    g[:, :-1] -= dx[:, :-1]
    g[1:, :] += dy[:-1, :]
    g[:-1, :] -= dy[:-1, :]
    return value, g


# ---------------------------------------------------------------- rays


@dataclass(frozen=True, eq=False)
class RayProfile:
    taus: np.ndarray
    p: np.ndarray
    delta_tau: np.ndarray
    alpha: float

    def __post_init__(self):
        taus, p, dt = (np.asarray(a, dtype=np.float64) for a in (self.taus, self.p, self.delta_tau))
        if np.any(p < 0) or np.any(dt < 0):
            raise ValueError("densities and spacings must be non-negative")
        if np.any(np.diff(taus) < 0):
            raise ValueError("taus must be ordered")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if abs((p * dt).sum() - self.alpha) > 1e-6:
            raise ValueError("integral of p does not match alpha")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "delta_tau", dt)


def _xlogy_over(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0) / y), 0.0)


def ray_entropy(ray: RayProfile, d: float = 1.0) -> float:
    """-sum p log p dtau - (1 - a) log((1 - a) / d), with 0 log 0 = 0."""
    if not d > 0:
        raise ValueError("background thickness d must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        body = -np.where(ray.p > 0, ray.p * np.log(np.where(ray.p > 0, ray.p, 1.0)), 0.0) * ray.delta_tau
    rest = 1.0 - ray.alpha
    return float(body.sum() - _xlogy_over(rest, d))


def ray_entropy_from_weights_grad(w: np.ndarray, dtau: np.ndarray, d: float = 1.0, eps: float = 1e-10):
    """Mean over rays of the entropy written in discrete weights w_i = p_i dtau_i.

    Per ray: -sum w_i log((w_i + eps) / dtau_i) - u log((u + eps) / d), u = 1 - sum w.
    Entries with dtau = 0 are padding and ignored.  Returns (value, dL/dw).
    """
    valid = dtau > 0
    safe_dt = np.where(valid, dtau, 1.0)
    lw = np.log(np.where(valid, w + eps, 1.0) / safe_dt)
    body = -np.where(valid, w * lw, 0.0).sum(axis=1)
    u = 1.0 - np.where(valid, w, 0.0).sum(axis=1)
    lu = np.log((np.maximum(u, 0.0) + eps) / d)
    per_ray = body - u * lu
    n = w.shape[0]
    g_u = -(lu + u / (np.maximum(u, 0.0) + eps))
    g_w = np.where(valid, -(lw + w / (w + eps)) - g_u[:, None], 0.0) / n
    return float(per_ray.mean()), g_w


# ---------------------------------------------------------------- meshes


def _neighbors(mesh):
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    return np.concatenate([e, e[:, ::-1]])


def _laplacian_vectors(mesh):
    n = len(mesh.vertices)
    e = _neighbors(mesh)
    deg = np.bincount(e[:, 0], minlength=n).astype(np.float64)
    acc = np.zeros((n, 3))
    np.add.at(acc, e[:, 0], mesh.vertices[e[:, 1]])
    used = deg > 0
    centroid = np.divide(acc, deg[:, None], out=np.zeros_like(acc), where=used[:, None])
    return centroid - mesh.vertices, used, e, deg


def laplacian_smoothing(mesh) -> float:
    """Mean over non-isolated vertices of |neighbour centroid - vertex|^2."""
    if len(mesh.faces) == 0:
        raise ValueError("mesh is empty")
    lap, used, _, _ = _laplacian_vectors(mesh)
    return float((lap[used] ** 2).sum(axis=1).mean())


def laplacian_smoothing_grad(mesh):
    lap, used, e, deg = _laplacian_vectors(mesh)
    m = used.sum()
    g_lap = np.where(used[:, None], 2.0 * lap / m, 0.0)
    g = -g_lap
    # centroid_i = sum_{j in N(i)} v_j / deg_i
    np.add.at(g, e[:, 1], g_lap[e[:, 0]] / deg[e[:, 0], None])
    return float((lap[used] ** 2).sum(axis=1).mean()), g


def adjacent_face_pairs(mesh) -> np.ndarray:
    """All pairs of faces sharing an edge (every pair for non-manifold edges)."""
    f = mesh.faces
    q = len(f)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(q), 3)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    pairs = []
    start = 0
    new_group = np.ones(len(e), dtype=bool)
    new_group[1:] = np.any(e[1:] != e[:-1], axis=1)
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], len(e))
    for start, end in zip(starts, ends):
        if end - start == 2:
            pairs.append((owner[start], owner[start + 1]))
        elif end - start > 2:
            grp = owner[start:end]
            pairs += [(grp[i], grp[j]) for i in range(len(grp)) for j in range(i + 1, len(grp))]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def normal_consistency(mesh) -> float:
    pairs = adjacent_face_pairs(mesh)
    if len(pairs) == 0:
        return 0.0
    n = mesh.face_normals()
    return float((1.0 - (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(axis=1)).mean())


def normal_consistency_grad(mesh):
    pairs = adjacent_face_pairs(mesh)
    g_v = np.zeros_like(mesh.vertices)
    if len(pairs) == 0:
        return 0.0, g_v
    p = mesh.vertices[mesh.faces]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    c = np.cross(e1, e2)
    length = np.linalg.norm(c, axis=1, keepdims=True)
    n = c / np.maximum(length, 1e-300)
    value = float((1.0 - (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(axis=1)).mean())
    g_n = np.zeros_like(n)
    np.add.at(g_n, pairs[:, 0], -n[pairs[:, 1]] / len(pairs))
    np.add.at(g_n, pairs[:, 1], -n[pairs[:, 0]] / len(pairs))
    g_c = (g_n - n * (g_n * n).sum(axis=1, keepdims=True)) / np.maximum(length, 1e-300)
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    np.add.at(g_v, mesh.faces[:, 1], g_e1)
    np.add.at(g_v, mesh.faces[:, 2], g_e2)
    np.add.at(g_v, mesh.faces[:, 0], -g_e1 - g_e2)
    return value, g_v


# ---------------------------------------------------------------- depth distortion


def depth_distortion_pixel(contribs) -> float:
    """sum_{m,n} w_m w_n |tau_m - tau_n| over a list of (w, tau) pairs."""
    if len(contribs) == 0:
        return 0.0
    w, tau = (np.asarray(a, dtype=np.float64) for a in zip(*contribs))
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    order = np.argsort(tau, kind="stable")
    w, tau = w[order], tau[order]
    wc = np.cumsum(w) - w
    sc = np.cumsum(w * tau) - w * tau
    return float(2.0 * (w * (tau * wc - sc)).sum())


def depth_distortion_map(contribs: RayContribs) -> np.ndarray:
    """Per-pixel depth distortion using running sums in depth order."""
    pix = contribs.pixel_index()
    order = np.lexsort((contribs.taus, pix))
    pix, w, tau = pix[order], contribs.weights[order], contribs.taus[order]
    n = contribs.n_pixels
    counts = np.bincount(pix, minlength=n)
    rank = np.arange(len(pix)) - (np.cumsum(counts) - counts)[pix]
    w_before = np.zeros(n)
    s_before = np.zeros(n)
    out = np.zeros(n)
    for r in range(int(rank.max()) + 1 if len(rank) else 0):
        sel = rank == r
        p = pix[sel]
        out[p] += 2.0 * w[sel] * (tau[sel] * w_before[p] - s_before[p])
        w_before[p] += w[sel]
        s_before[p] += w[sel] * tau[sel]
    return out


def mdd(render: RenderOutput) -> float:
    """Total depth distortion over all pixels divided by total alpha (0 for empty renders)."""
    if render.per_ray_contribs is None:
        raise ValueError("render has no per-ray contributions")
    total_alpha = float(np.sum(render.alpha))
    if total_alpha <= 0:
        return 0.0
    return float(depth_distortion_map(render.per_ray_contribs).sum() / total_alpha)


def mdd_many(renders) -> float:
    """MDD pooled over several renders (sums of distortion over sums of alpha)."""
    num = sum(float(depth_distortion_map(r.per_ray_contribs).sum()) for r in renders)
    den = sum(float(np.sum(r.alpha)) for r in renders)
    return 0.0 if den <= 0 else num / den


# ---------------------------------------------------------------- perceptual


def _box_down(x: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return x
    h, w = x.shape[-3] // f * f, x.shape[-2] // f * f
    x = x[..., :h, :w, :]
    lead = x.shape[:-3]
    return x.reshape(*lead, h // f, f, w // f, f, x.shape[-1]).mean(axis=(-4, -2))


def _box_down_adjoint(g: np.ndarray, f: int, shape) -> np.ndarray:
    if f == 1:
        return g
    up = np.repeat(np.repeat(g, f, axis=-3), f, axis=-2) / (f * f)
    out = np.zeros(shape)
    out[..., : up.shape[-3], : up.shape[-2], :] = up
    return out


def _tiles(x: np.ndarray, p: int) -> np.ndarray:
    h, w = x.shape[-3] // p * p, x.shape[-2] // p * p
    x = x[..., :h, :w, :]
    lead = x.shape[:-3]
    t = x.reshape(*lead, h // p, p, w // p, p, x.shape[-1])
    return np.moveaxis(t, -4, -3)  # (..., th, tw, p, p, C)


def _untile(t: np.ndarray, shape, p: int) -> np.ndarray:
    t = np.moveaxis(t, -3, -4)
    lead = t.shape[:-5]
    th, tw = t.shape[-5], t.shape[-3]
    out = np.zeros(shape)
    out[..., : th * p, : tw * p, :] = t.reshape(*lead, th * p, tw * p, t.shape[-1])
    return out


def _normalize_tiles(t: np.ndarray, c: float):
    mu = t.mean(axis=(-3, -2), keepdims=True)
    xc = t - mu
    s = np.sqrt((xc * xc).mean(axis=(-3, -2), keepdims=True) + c)
    return xc / s, s


PERCEPTUAL_SCALES = (1, 2, 4)


def patch_perceptual(a, b, patch: int = 4, c: float = 1e-2, scales=PERCEPTUAL_SCALES) -> float:
    """Mean over scales of the MSE between contrast-normalized patch tiles.

    Images are (..., H, W, C).  Each scale box-downsamples by its factor, cuts
    non-overlapping ``patch`` x ``patch`` tiles and normalizes every tile and
    channel to zero mean and unit std (with floor ``c`` on the variance).
    """
    return patch_perceptual_grad(a, b, patch, c, scales, need_grad=False)[0]


def patch_perceptual_grad(a, b, patch: int = 4, c: float = 1e-2, scales=PERCEPTUAL_SCALES, need_grad: bool = True):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = 0.0
    grad = np.zeros_like(a) if need_grad else None
    used = 0
    for f in scales:
        da, db = _box_down(a, f), _box_down(b, f)
        ta, tb = _tiles(da, patch), _tiles(db, patch)
        if ta.size == 0:
            continue
        used += 1
        za, sa = _normalize_tiles(ta, c)
        zb, _ = _normalize_tiles(tb, c)
        diff = za - zb
        total += float(np.mean(diff * diff))
        if need_grad:
            gz = 2.0 * diff / diff.size
            gt = (gz - gz.mean(axis=(-3, -2), keepdims=True) - za * (gz * za).mean(axis=(-3, -2), keepdims=True)) / sa
            grad += _box_down_adjoint(_untile(gt, da.shape, patch), f, a.shape)
    if used == 0:
        return 0.0, grad
    if need_grad:
        grad /= used
    return total / used, grad


# ---------------------------------------------------------------- pipeline metrics


def mode_distance(x, world) -> tuple[float, int]:
    """Smallest mean absolute distance to a prototype's render, and that prototype's id."""
    x = np.asarray(x, dtype=np.float64)
    d = np.abs(world.renders - x[None]).reshape(world.K, -1).mean(axis=1)
    k = int(np.argmin(d))
    return float(d[k]), k


def cross_view_consistency(x, reconstructor, w: LossWeights = LossWeights()) -> float:
    """l1_rgbad between the views and the re-render of their reconstruction.

    ``reconstructor(views)`` must return re-rendered views of the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    return l1_rgbad(x, reconstructor(x), w)

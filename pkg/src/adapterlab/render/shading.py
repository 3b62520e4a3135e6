from __future__ import annotations

import numpy as np

GAMMA = 2.2


def _central_tangents(points: np.ndarray):
    """Central-difference tangents along u (columns) and v (rows); zero on the image border."""
    tu = np.zeros_like(points)
    tv = np.zeros_like(points)
    tu[:, 1:-1] = 0.5 * (points[:, 2:] - points[:, :-2])
    tv[1:-1, :] = 0.5 * (points[2:, :] - points[:-2, :])
    return tu, tv


def normals_from_depth(depth: np.ndarray, cam, mask: np.ndarray | None = None) -> np.ndarray:
    """Camera-space unit normals from a z-depth map.

    A normal is defined only at pixels whose 4-neighbourhood lies inside the
    image and inside ``mask`` (default ``depth > 0``); elsewhere the result is
    the zero vector.  Normals face the camera, so a fronto-parallel plane gives
    (0, 0, -1).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if (depth < 0).any():
        raise ValueError("depth must be non-negative")
    h, w = depth.shape
    valid = depth > 0 if mask is None else (np.asarray(mask, dtype=bool) & (depth > 0))
    out = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return out
    points = depth[..., None] * cam.pixel_rays()
    tu, tv = _central_tangents(points)
    c = np.cross(tv, tu)
    norm = np.linalg.norm(c, axis=-1)
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (
        valid[1:-1, 1:-1] & valid[:-2, 1:-1] & valid[2:, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
    )
    ok &= norm > 0
    out[ok] = c[ok] / norm[ok, None]
    return out


def depth_normals_forward(depth: np.ndarray, rays: np.ndarray, eps: float = 1e-9):
    """Smooth normal map n = c / sqrt(|c|^2 + eps^2) used inside the fitting loss."""
    points = depth[..., None] * rays
    tu, tv = _central_tangents(points)
    c = np.cross(tv, tu)
    length = np.sqrt((c * c).sum(-1) + eps * eps)
    n = c / length[..., None]
    return n, dict(rays=rays, tu=tu, tv=tv, c=c, length=length, n=n)


def depth_normals_backward(cache: dict, g_n: np.ndarray) -> np.ndarray:
    n, length = cache["n"], cache["length"]
    g_c = (g_n - n * (g_n * n).sum(-1, keepdims=True)) / length[..., None]
    # c = tv x tu
    g_tv = np.cross(cache["tu"], g_c)
    g_tu = np.cross(g_c, cache["tv"])
    g_p = np.zeros_like(g_n)
    g_p[:, 2:] += 0.5 * g_tu[:, 1:-1]
    g_p[:, :-2] -= 0.5 * g_tu[:, 1:-1]
    g_p[2:, :] += 0.5 * g_tv[1:-1, :]
    g_p[:-2, :] -= 0.5 * g_tv[1:-1, :]
    return (g_p * cache["rays"]).sum(-1)


def tonemap(linear: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    return np.clip(linear, 0.0, 1.0) ** (1.0 / gamma)


def to_linear(display: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    return np.clip(display, 0.0, 1.0) ** gamma


def lambertian_shade(albedo, normal, light_position, cam, depth, ambient: float = 0.0, apply_tonemap: bool = True):
    """Shade linear-space albedo under a point light.

    linear = albedo * (ambient + (1 - ambient) * max(0, n.l)); the result is
    gamma-tonemapped unless ``apply_tonemap`` is false.  ``normal`` and the
    surface points recovered from ``depth`` are camera-space.
    """
    points = np.asarray(depth, dtype=np.float64)[..., None] * cam.pixel_rays()
    light = cam.world_to_camera(np.asarray(light_position, dtype=np.float64))
    to_light = light - points
    to_light /= np.maximum(np.linalg.norm(to_light, axis=-1, keepdims=True), 1e-12)
    ndl = np.maximum((np.asarray(normal) * to_light).sum(-1), 0.0)
    linear = np.asarray(albedo, dtype=np.float64) * (ambient + (1.0 - ambient) * ndl)[..., None]
    return tonemap(linear) if apply_tonemap else linear

"""Finite prototype worlds and their exact Bayes denoisers.

A world is a prior-weighted set of 3D objects seen by a fixed camera rig.  A
clean sample is the multi-view render of one object plus i.i.d. Gaussian
jitter of std ``view_noise`` on every channel, so every component of the data
distribution is Gaussian and the posterior mean under the forward process is
available in closed form.

View stacks are float arrays of shape (V, H, W, 5) holding RGB, alpha and
camera z-depth.  Feedback packets carry the RGB + depth subset (V, H, W, 4).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .render import Camera, RayContribs, RenderOutput, SplatSet, VolumeGrid, composite_splats, raymarch_volume

RGBD = [0, 1, 2, 4]
SCHEMA = "world-v1"


@dataclass(frozen=True, eq=False)
class TexturedQuad:
    """Opaque two-sided square with nearest-texel colour lookup."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_size: float
    texture: np.ndarray  # (n, n, 3); row 0 at +v

    def __post_init__(self):
        for name in ("center", "axis_u", "axis_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        object.__setattr__(self, "texture", np.asarray(self.texture, dtype=np.float64))
        if abs(self.axis_u @ self.axis_v) > 1e-9 or abs(np.linalg.norm(self.axis_u) - 1) > 1e-9 or abs(np.linalg.norm(self.axis_v) - 1) > 1e-9:
            raise ValueError("quad axes must be orthonormal")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def hit(self, cam: Camera):
        """Per-pixel (hit mask, z-depth, texel row, texel col)."""
        d = cam.ray_directions().reshape(-1, 3)
        o = cam.center
        n = self.normal
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = ((self.center - o) @ n) / den
        p = o + tau[:, None] * d
        a = (p - self.center) @ self.axis_u / self.half_size
        b = (p - self.center) @ self.axis_v / self.half_size
        ok = np.isfinite(tau) & (tau > 0) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        nt = self.texture.shape[0]
        col = np.clip(np.floor((np.where(ok, a, 0) + 1) / 2 * nt).astype(np.int64), 0, nt - 1)
        row = np.clip(np.floor((1 - np.where(ok, b, 0)) / 2 * nt).astype(np.int64), 0, nt - 1)
        return ok, np.where(ok, tau, 0.0), row, col


def render_quad(quad: TexturedQuad, cam: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    h, w = cam.height, cam.width
    ok, tau, row, col = quad.hit(cam)
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (h * w, 3)).copy()
    rgb[ok] = quad.texture[row[ok], col[ok]]
    n_cam = cam.rotation @ quad.normal
    if n_cam[2] > 0:
        n_cam = -n_cam
    normal = np.zeros((h * w, 3))
    normal[ok] = n_cam
    pix = np.flatnonzero(ok)
    contribs = RayContribs.from_sorted(pix, np.ones(len(pix)), tau[pix], h * w)
    return RenderOutput(rgb.reshape(h, w, 3), ok.reshape(h, w).astype(float), tau.reshape(h, w), normal.reshape(h, w, 3), contribs)


def render_object(obj, cam: Camera) -> RenderOutput:
    if isinstance(obj, VolumeGrid):
        return raymarch_volume(obj, cam)
    if isinstance(obj, TexturedQuad):
        return render_quad(obj, cam)
    if isinstance(obj, SplatSet):
        return composite_splats(obj, cam)
    raise TypeError(f"cannot render {type(obj).__name__}")


@dataclass(frozen=True, eq=False)
class Prototype:
    id: int
    object: object
    prior: float
    label: str | None = None

    def __post_init__(self):
        if not 0 < self.prior <= 1:
            raise ValueError("prior must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class WorldModel:
    prototypes: list
    cameras: list
    view_noise: float = 0.0
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.prototypes) < 1 or len(self.cameras) < 1:
            raise ValueError("world needs prototypes and cameras")
        if self.view_noise < 0:
            raise ValueError("view_noise must be non-negative")
        total = sum(p.prior for p in self.prototypes)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"priors sum to {total}, expected 1")
        if [p.id for p in self.prototypes] != list(range(len(self.prototypes))):
            raise ValueError("prototype ids must be 0..K-1 in order")

    @property
    def K(self) -> int:
        return len(self.prototypes)

    @property
    def V(self) -> int:
        return len(self.cameras)

    @property
    def priors(self) -> np.ndarray:
        return np.array([p.prior for p in self.prototypes])

    @property
    def labels(self) -> list:
        return [p.label for p in self.prototypes]

    @property
    def has_conditions(self) -> bool:
        return any(lab is not None for lab in self.labels)

    @cached_property
    def renders(self) -> np.ndarray:
        """(K, V, H, W, 5) clean renders of every prototype."""
        out = np.stack([render_world(self, k) for k in range(self.K)])
        out.setflags(write=False)
        return out

    def view_shape(self) -> tuple:
        cam = self.cameras[0]
        return (self.V, cam.height, cam.width, 5)

    def sample_clean(self, rng: np.random.Generator, condition=None) -> np.ndarray:
        k = int(rng.choice(self.K, p=condition_prior(self, condition)))
        x = self.renders[k]
        if self.view_noise > 0:
            x = x + self.view_noise * rng.standard_normal(x.shape)
        return np.array(x, dtype=np.float64)

    def with_cameras(self, cameras) -> "WorldModel":
        return WorldModel(self.prototypes, list(cameras), self.view_noise, self.name, dict(self.meta))

    def with_view_noise(self, view_noise: float) -> "WorldModel":
        return WorldModel(self.prototypes, self.cameras, view_noise, self.name, dict(self.meta))

    def subset(self, ids) -> "WorldModel":
        """World restricted to the given prototypes, priors renormalized and ids reassigned."""
        chosen = [self.prototypes[i] for i in ids]
        total = sum(p.prior for p in chosen)
        protos = [Prototype(j, p.object, p.prior / total, p.label) for j, p in enumerate(chosen)]
        return WorldModel(protos, self.cameras, self.view_noise, self.name, dict(self.meta))


@dataclass(frozen=True, eq=False)
class FeedbackPacket:
    views: np.ndarray  # (V, H, W, 4): RGB + depth
    source: str = "reconstruction"

    def __post_init__(self):
        v = np.asarray(self.views, dtype=np.float64)
        if v.ndim != 4 or v.shape[-1] != 4:
            raise ValueError("feedback views must be (V, H, W, 4)")
        if self.source not in ("reconstruction", "zero"):
            raise ValueError("source must be 'reconstruction' or 'zero'")
        if self.source == "zero" and np.any(v != 0):
            raise ValueError("zero-source feedback must be all zeros")
        if np.any(v[..., 3] < 0):
            raise ValueError("feedback depth must be non-negative")
        object.__setattr__(self, "views", v)

    @classmethod
    def zero(cls, shape) -> "FeedbackPacket":
        v, h, w = shape[:3]
        return cls(np.zeros((v, h, w, 4)), "zero")

    @classmethod
    def from_views(cls, views: np.ndarray) -> "FeedbackPacket":
        return cls(np.maximum(np.asarray(views)[..., RGBD], [-np.inf, -np.inf, -np.inf, 0.0]), "reconstruction")


def render_world(world: WorldModel, k: int) -> np.ndarray:
    if not 0 <= k < world.K:
        raise IndexError(f"prototype id {k} out of range")
    obj = world.prototypes[k].object
    return np.stack([render_object(obj, cam).rgbad() for cam in world.cameras])


def condition_prior(world: WorldModel, condition=None) -> np.ndarray:
    prior = world.priors.copy()
    if condition is not None:
        mask = np.array([lab == condition for lab in world.labels])
        if not mask.any():
            raise KeyError(f"unknown condition {condition!r}")
        prior = np.where(mask, prior, 0.0)
    return prior / prior.sum()


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.isfinite(a).all():
            raise ValueError("non-finite input to the Bayes denoiser")


def _noise_levels(t, sched, world: WorldModel):
    alpha, sigma = float(sched.alpha(t)), float(sched.sigma(t))
    if sigma <= 0:
        raise ValueError("t must be positive")
    a = world.view_noise**2  # prior jitter variance
    b = (sigma / alpha) ** 2  # observation variance in x / alpha units
    return alpha, a, b


def _log_likelihoods(x_t, t, world, sched, feedback, rho):
    """Per-view, per-prototype log-likelihoods (V, K), up to k-independent constants."""
    alpha, a, b = _noise_levels(t, sched, world)
    y = world.renders  # (K, V, H, W, 5)
    o1 = x_t / alpha
    ll = -((o1[None] - y) ** 2).sum(axis=(2, 3, 4)) / (2 * (a + b))
    if feedback is not None and feedback.source == "reconstruction":
        if not rho > 0:
            raise ValueError("rho must be positive when feedback is present")
        c = rho**2
        gain = a / (a + b)
        yk = y[..., RGBD]
        m = yk + gain * (o1[..., RGBD][None] - yk)
        var = a + c - a * gain
        ll = ll - ((feedback.views[None] - m) ** 2).sum(axis=(2, 3, 4)) / (2 * var)
    return ll.T


def posterior_weights(x_t, t, world: WorldModel, sched, feedback=None, rho: float = 0.1, scope: str = "joint", condition=None):
    """Normalized posterior over prototypes; (K,) for joint scope, (V, K) per view."""
    x_t = np.asarray(x_t, dtype=np.float64)
    _check_finite(x_t, None if feedback is None else feedback.views)
    ll = _log_likelihoods(x_t, t, world, sched, feedback, rho)
    with np.errstate(divide="ignore"):
        log_prior = np.log(condition_prior(world, condition))
    if scope == "joint":
        logits = ll.sum(axis=0) + log_prior
        return np.exp(logits - logsumexp(logits))
    if scope == "per_view":
        logits = ll + log_prior[None]
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    raise ValueError(f"unknown scope {scope!r}")


def _component_means(x_t, t, world, sched, feedback, rho):
    """E[x | x_t, feedback, k] for every k: (K, V, H, W, 5)."""
    alpha, a, b = _noise_levels(t, sched, world)
    y = world.renders
    if a == 0:
        return y
    o1 = x_t / alpha
    mean = y + (a / (a + b)) * (o1[None] - y)
    if feedback is not None and feedback.source == "reconstruction":
        c = rho**2
        den = b * c + a * c + a * b
        yk = y[..., RGBD]
        mean[..., RGBD] = yk + (a * c / den) * (o1[..., RGBD][None] - yk) + (a * b / den) * (feedback.views[None] - yk)
    return mean


def _mix(weights, means, scope):
    if scope == "joint":
        return np.tensordot(weights, means, axes=(0, 0))
    return np.einsum("vk,kvhwc->vhwc", weights, means)


def bayes_denoise(x_t, t, world: WorldModel, sched, scope: str = "per_view", condition=None):
    x_t = np.asarray(x_t, dtype=np.float64)
    w = posterior_weights(x_t, t, world, sched, scope=scope, condition=condition)
    return _mix(w, _component_means(x_t, t, world, sched, None, None), scope)


def bayes_denoise_augmented(x_t, t, world: WorldModel, sched, feedback: FeedbackPacket, rho: float = 0.1, condition=None):
    """Per-view posterior mean that also conditions on rendered RGBD feedback.

    Feedback is modelled as the clean RGBD views observed with Gaussian noise
    of std ``rho``.  Zero-source feedback carries no information, which leaves
    the per-view base denoiser.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    w = posterior_weights(x_t, t, world, sched, feedback=feedback, rho=rho, scope="per_view", condition=condition)
    return _mix(w, _component_means(x_t, t, world, sched, feedback, rho), "per_view")


# ---------------------------------------------------------------- presets


def _ring_cameras(n, res, distance, elevation, focal_scale=1.2, azimuths=None, target=(0.0, 0.0, 0.0)):
    az = np.linspace(0, 360, n, endpoint=False) if azimuths is None else azimuths
    return [
        Camera.orbit(float(a), elevation, distance, focal=focal_scale * res, width=res, height=res, target=target)
        for a in az
    ]


def _pattern(n: int) -> np.ndarray:
    """Asymmetric colour pattern used by the quad preset."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r = 0.15 + 0.7 * j / (n - 1)
    g = 0.2 + 0.6 * ((i + j) % 3 == 0)
    b = 0.8 - 0.6 * (i / (n - 1)) * (j < n // 2)
    return np.stack([r, g, b], axis=-1)


def bimodal_texture(resolution: int = 32, view_noise: float = 0.0, n_texels: int = 8) -> WorldModel:
    tex = _pattern(n_texels)
    quads = [
        TexturedQuad((0, 0, 0), (1, 0, 0), (0, 1, 0), 0.8, tex),
        TexturedQuad((0, 0, 0), (1, 0, 0), (0, 1, 0), 0.8, tex[:, ::-1]),
    ]
    cams = _ring_cameras(4, resolution, 2.6, 10.0, azimuths=[-40.0, -15.0, 15.0, 40.0])
    protos = [Prototype(k, q, 0.5) for k, q in enumerate(quads)]
    return WorldModel(protos, cams, view_noise, "bimodal-texture")


def _ball(center, radius, color, resolution, density=40.0, edge=0.05):
    """Solid ball whose density falls to exactly 0 at radius + edge."""
    center = np.asarray(center, dtype=np.float64)

    def dens(p):
        r = np.linalg.norm(p - center, axis=-1)
        s = np.clip((radius + edge - r) / (2 * edge), 0.0, 1.0)
        return density * s * s * (3 - 2 * s)

    def col(p):
        return np.broadcast_to(np.asarray(color, dtype=np.float64), p.shape).copy()

    return dens, col


def tetra_4(resolution: int = 32, view_noise: float = 0.0, grid: int = 24) -> WorldModel:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) * 0.4
    colors = [(0.9, 0.3, 0.2), (0.9, 0.7, 0.2), (0.2, 0.5, 0.9), (0.3, 0.8, 0.6)]
    labels = ["warm", "warm", "cool", "cool"]
    protos = []
    for k, (v, c) in enumerate(zip(verts, colors)):
        dens, col = _ball(v, 0.35, c, grid)
        protos.append(Prototype(k, VolumeGrid.from_function(dens, col, grid), 0.25, labels[k]))
    cams = _ring_cameras(4, resolution, 2.8, 20.0)
    return WorldModel(protos, cams, view_noise, "tetra-4")


def _splat_ball(center, radius, spacing, color, scale_factor=0.75, opacity=0.95) -> SplatSet:
    g = np.arange(-radius, radius + 1e-9, spacing)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = pts[np.linalg.norm(pts, axis=1) <= radius]
    m = len(pts)
    return SplatSet(pts + np.asarray(center), np.full(m, scale_factor * spacing), np.full(m, opacity), np.tile(color, (m, 1)))


def bimodal_splat(resolution: int = 64, view_noise: float = 0.05, spacing: float = 0.1) -> WorldModel:
    """A body with one arm on the +x or the -x side; the two prototypes are mirror images."""
    body_color = np.array([0.85, 0.55, 0.3])
    arm_color = np.array([0.25, 0.45, 0.85])
    protos = []
    for k, side in enumerate((1.0, -1.0)):
        body = _splat_ball((0.0, 0.0, 0.0), 0.45, spacing, body_color)
        arm = _splat_ball((0.7 * side, 0.15, 0.0), 0.25, spacing, arm_color)
        protos.append(Prototype(k, SplatSet.concatenate([body, arm]), 0.5))
    cams = _ring_cameras(4, resolution, 2.6, 20.0)
    return WorldModel(protos, cams, view_noise, "bimodal-splat")


PRESETS = {
    "bimodal-texture": bimodal_texture,
    "tetra-4": tetra_4,
    "bimodal-splat": bimodal_splat,
}


def make_world(name: str, **kwargs) -> WorldModel:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown world preset {name!r}; known: {sorted(PRESETS)}") from None
    return builder(**kwargs)


# ---------------------------------------------------------- serialization


def _enc(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def _object_to_dict(obj) -> dict:
    if isinstance(obj, VolumeGrid):
        return {"type": "volume", "bounds": _enc(obj.bounds), "density": _enc(obj.density), "color": _enc(obj.color)}
    if isinstance(obj, TexturedQuad):
        return {
            "type": "quad",
            "center": _enc(obj.center),
            "axis_u": _enc(obj.axis_u),
            "axis_v": _enc(obj.axis_v),
            "half_size": float(obj.half_size),
            "texture": _enc(obj.texture),
        }
    if isinstance(obj, SplatSet):
        return {
            "type": "splats",
            "centers": _enc(obj.centers),
            "scales": _enc(obj.scales),
            "opacities": _enc(obj.opacities),
            "colors": _enc(obj.colors),
        }
    raise TypeError(type(obj).__name__)


def _object_from_dict(d):
    kind = d["type"]
    if kind == "volume":
        return VolumeGrid(_dec(d["density"]), _dec(d["color"]), _dec(d["bounds"]))
    if kind == "quad":
        return TexturedQuad(_dec(d["center"]), _dec(d["axis_u"]), _dec(d["axis_v"]), d["half_size"], _dec(d["texture"]))
    if kind == "splats":
        return SplatSet(_dec(d["centers"]), _dec(d["scales"]), _dec(d["opacities"]), _dec(d["colors"]))
    raise ValueError(f"unknown object type {kind!r}")


def world_to_json(world: WorldModel) -> str:
    doc = {
        "schema": SCHEMA,
        "name": world.name,
        "view_noise": world.view_noise,
        "cameras": [
            {
                "rotation": _enc(c.rotation),
                "translation": _enc(c.translation),
                "focal": c.focal,
                "principal_point": list(c.principal_point),
                "width": c.width,
                "height": c.height,
            }
            for c in world.cameras
        ],
        "prototypes": [
            {"id": p.id, "prior": p.prior, "label": p.label, "object": _object_to_dict(p.object)}
            for p in world.prototypes
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def world_from_json(text: str) -> WorldModel:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"expected schema {SCHEMA!r}, got {doc.get('schema')!r}")
    cams = [
        Camera(_dec(c["rotation"]), _dec(c["translation"]), c["focal"], tuple(c["principal_point"]), c["width"], c["height"])
        for c in doc["cameras"]
    ]
    protos = [Prototype(p["id"], _object_from_dict(p["object"]), p["prior"], p["label"]) for p in doc["prototypes"]]
    return WorldModel(protos, cams, doc["view_noise"], doc.get("name", "custom"))

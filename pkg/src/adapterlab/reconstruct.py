"""Incremental 3D fitting from intermediate denoised views.

The volume fitter optimizes a dense grid with density = scale * softplus(theta)
and colour = sigmoid(phi) by Adam, using hand-written adjoints of the ray
marcher, of normals-from-depth and of every loss term.  After the NeRF phase
the grid can be converted to a vertex-coloured mesh whose colours (and
optionally vertices) keep being refined.

Reconstructors share a small interface used by the sampling pipelines::

    state = rec.init_state()
    state = rec.fit(state, targets, fraction)   # fraction of sampling completed
    renders = rec.render(state, cams)           # list of RenderOutput
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from . import losses as L
from .feedforward import SplatFitConfig, fit_feedforward_quads, fit_feedforward_splats, render_quad_fit
from .render import Camera, RenderOutput, TriMesh, VolumeGrid, composite_splats, march_rays, render_mesh
from .render.mesh import rasterize, volume_to_mesh
from .render.shading import depth_normals_backward, depth_normals_forward, normals_from_depth
from .render.volume import composite, composite_backward, contribs_from_weights, sample_field
from .world import FeedbackPacket

CHECKPOINT_HEADER = "recon-v1"


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class FitConfig:
    steps_per_denoise: int = 96
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr_density: float = 0.05
    lr_color: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    density_scale: float = 20.0
    samples_per_cell: float = 2.0
    background: tuple = (1.0, 1.0, 1.0)
    entropy_d: float = 1.0
    patch: int = 4
    perceptual_c: float = 1e-2
    erosion: int = 2
    alpha_blur: float = 0.5
    resolution_schedule: tuple = ((0.0, 32), (0.5, 64))
    iso: float = 5.0
    prune_density: float = 1.0  # renders skip cells thinner than this
    optimize_vertices: bool = False
    lr_vertex: float = 1e-3

    def __post_init__(self):
        if self.steps_per_denoise < 1:
            raise ValueError("steps_per_denoise must be >= 1")
        if self.lr_density < 0 or self.lr_color < 0:
            raise ValueError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")

    def resolution_at(self, fraction: float, cap: int) -> int:
        res = self.resolution_schedule[0][1]
        for start, r in self.resolution_schedule:
            if fraction >= start:
                res = r
        return int(min(res, cap))


@dataclass(frozen=True, eq=False)
class Adam:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, shape) -> "Adam":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    def step(self, param, grad, lr, b1, b2, eps):
        m = b1 * self.m + (1 - b1) * grad
        v = b2 * self.v + (1 - b2) * grad * grad
        n = self.count + 1
        m_hat = m / (1 - b1**n)
        v_hat = v / (1 - b2**n)
        return param - lr * m_hat / (np.sqrt(v_hat) + eps), Adam(m, v, n)


@dataclass(frozen=True, eq=False)
class ReconState:
    phase: str  # nerf | mesh | texture | splats
    step_count: int = 0
    theta: np.ndarray | None = None  # density logits (N, N, N)
    phi: np.ndarray | None = None  # colour logits (N, N, N, 3)
    bounds: np.ndarray | None = None
    density_scale: float = 20.0
    opt_theta: Adam | None = None
    opt_phi: Adam | None = None
    mesh: TriMesh | None = None
    color_logits: np.ndarray | None = None  # mesh phase: per-vertex colour logits
    opt_vcolor: Adam | None = None
    opt_vertex: Adam | None = None
    payload: object = None  # closed-form fits (quad texture, splats)
    warnings: tuple = ()

    def grid(self) -> VolumeGrid:
        return VolumeGrid(self.density_scale * softplus(self.theta), expit(self.phi), self.bounds)


def init_volume_state(resolution: int = 24, bounds=((-1, -1, -1), (1, 1, 1)), density_scale: float = 20.0, init_density: float = 0.05, init_color: float = 0.5, theta=None, phi=None) -> ReconState:
    n = resolution
    if theta is None:
        theta = np.full((n, n, n), float(softplus_inv(init_density / density_scale)))
    if phi is None:
        phi = np.full((n, n, n, 3), float(logit(init_color)))
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    return ReconState(
        "nerf",
        0,
        theta,
        phi,
        np.asarray(bounds, dtype=np.float64),
        density_scale,
        Adam.zeros(theta.shape),
        Adam.zeros(phi.shape),
    )


def state_from_grid(grid: VolumeGrid, density_scale: float = 20.0) -> ReconState:
    """Exact parameters for a given grid (density must be positive)."""
    theta = softplus_inv(np.maximum(grid.density, 1e-12) / density_scale)
    return init_volume_state(grid.resolution, grid.bounds, density_scale, theta=theta, phi=logit(grid.color))


# ------------------------------------------------------------ volume loss


class VolumeProblem:
    """Loss and gradient of the grid parameters against fixed target views."""

    def __init__(self, targets, cams, cfg: FitConfig, resolution: int, bounds, density_scale: float):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.cams = list(cams)
        self.cfg = cfg
        self.n = resolution
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.scale = density_scale
        cell = float(np.min((self.bounds[1] - self.bounds[0]) / (resolution - 1)))
        step = cell / cfg.samples_per_cell
        self.samples = [march_rays(cam, resolution, self.bounds, step) for cam in self.cams]
        self.rays = [cam.pixel_rays() for cam in self.cams]
        self.masks = [L.erode_mask(t[..., 3] > 0.5, cfg.erosion) for t in self.targets]
        # depth is compared alpha-premultiplied so faint density far from the
        # surface cannot create a large normalized-depth error
        self.fit_targets = self.targets.copy()
        self.fit_targets[..., 4] *= self.targets[..., 3]

    def forward(self, theta, phi, need_grad: bool = True):
        cfg, w = self.cfg, self.cfg.weights
        dens = self.scale * softplus(theta)
        col = expit(phi)
        g_dens = np.zeros(self.n**3) if need_grad else None
        g_col = np.zeros((self.n**3, 3)) if need_grad else None
        total = 0.0
        parts = dict(l1=0.0, perceptual=0.0, normal_tv=0.0, entropy=0.0)
        n_views = len(self.cams)
        for v, (cam, samples) in enumerate(zip(self.cams, self.samples)):
            h, wd = cam.height, cam.width
            sigma = sample_field(samples, dens)
            color = sample_field(samples, col)
            cache = composite(sigma, color, samples, cfg.background)
            premult = (cache["w"] * samples.tau).sum(axis=1)
            render = np.concatenate([cache["rgb"], cache["alpha"][:, None], premult[:, None]], axis=1).reshape(h, wd, 5)
            target = self.fit_targets[v]

            l1, g_r = L.l1_rgbad_grad(render, target, w)
            pc, g_pc = L.patch_perceptual_grad(render[..., :3], target[..., :3], cfg.patch, cfg.perceptual_c, need_grad=need_grad)
            normal, ncache = depth_normals_forward(cache["depth"].reshape(h, wd), self.rays[v])
            tv, g_n = L.normal_tv_l15_grad(normal, self.masks[v])
            ent, g_w = L.ray_entropy_from_weights_grad(cache["w"], samples.dtau, cfg.entropy_d)
            parts["l1"] += l1 / n_views
            parts["perceptual"] += pc / n_views
            parts["normal_tv"] += tv / n_views
            parts["entropy"] += ent / n_views
            total += (l1 + w.perceptual * pc + w.normal_tv * tv + w.entropy * ent) / n_views
            if not need_grad:
                continue
            g_img = g_r.copy()
            g_img[..., :3] += w.perceptual * g_pc
            g_img /= n_views
            g_img = g_img.reshape(-1, 5)
            g_depth = w.normal_tv * depth_normals_backward(ncache, g_n).reshape(-1) / n_views
            g_wt = w.entropy * g_w / n_views + g_img[:, 4:5] * samples.tau
            gs, gc = composite_backward(cache, samples, g_rgb=g_img[:, :3], g_alpha=g_img[:, 3], g_depth=g_depth, g_w=g_wt)
            g_dens += samples.interp.T @ gs.reshape(-1)[samples.valid]
            g_col += samples.interp.T @ gc.reshape(-1, 3)[samples.valid]
        if not need_grad:
            return total, parts, None, None
        g_theta = (g_dens * self.scale * expit(theta.reshape(-1))).reshape(theta.shape)
        col_flat = col.reshape(-1, 3)
        g_phi = (g_col * col_flat * (1.0 - col_flat)).reshape(phi.shape)
        return total, parts, g_theta, g_phi

    def loss(self, theta, phi) -> float:
        return self.forward(theta, phi, need_grad=False)[0]


def fit_incremental(state: ReconState, targets, cams, cfg: FitConfig, problem: VolumeProblem | None = None):
    """Run ``cfg.steps_per_denoise`` Adam steps on the state's representation.

    Returns (new_state, loss_trace).  Optimizer moments and step counts carry
    over, so two calls with budgets a and b match one call with a + b.
    """
    if state.phase == "mesh":
        return fit_mesh(state, targets, cams, cfg)
    if state.phase != "nerf":
        raise ValueError(f"fit_incremental cannot fit phase {state.phase!r}")
    if problem is None:
        problem = VolumeProblem(targets, cams, cfg, state.theta.shape[0], state.bounds, state.density_scale)
    theta, phi = state.theta, state.phi
    ot, op = state.opt_theta, state.opt_phi
    trace = []
    for _ in range(cfg.steps_per_denoise):
        value, _, g_t, g_p = problem.forward(theta, phi)
        if not (np.isfinite(g_t).all() and np.isfinite(g_p).all()):
            raise FloatingPointError(f"non-finite gradient at fit step {state.step_count + len(trace)}")
        trace.append(value)
        theta, ot = ot.step(theta, g_t, cfg.lr_density, cfg.beta1, cfg.beta2, cfg.adam_eps)
        phi, op = op.step(phi, g_p, cfg.lr_color, cfg.beta1, cfg.beta2, cfg.adam_eps)
    new = replace(state, theta=theta, phi=phi, opt_theta=ot, opt_phi=op, step_count=state.step_count + len(trace))
    return new, trace


def render_volume_state(state: ReconState, cam: Camera, cfg: FitConfig) -> RenderOutput:
    """Render the fitted grid, treating density below ``cfg.prune_density`` as empty."""
    grid = state.grid()
    cell = float(np.min(grid.cell_size))
    samples = march_rays(cam, grid.resolution, grid.bounds, cell / cfg.samples_per_cell)
    density = np.where(grid.density < cfg.prune_density, 0.0, grid.density)
    sigma = sample_field(samples, density)
    color = sample_field(samples, grid.color)
    out = composite(sigma, color, samples, cfg.background)
    h, w = cam.height, cam.width
    alpha = out["alpha"].reshape(h, w)
    depth = np.where(out["alpha"] > 0, out["depth"], 0.0).reshape(h, w)
    normal = normals_from_depth(depth, cam, mask=alpha > 0.5)
    return RenderOutput(out["rgb"].reshape(h, w, 3), alpha, depth, normal, contribs_from_weights(out["w"], samples.tau))


# ------------------------------------------------------------ mesh phase


def switch_to_mesh(state: ReconState, iso: float | None = None, cfg: FitConfig | None = None) -> ReconState:
    """Extract an iso-surface of the density and keep the colour field on its vertices."""
    if state.phase != "nerf":
        raise ValueError("switch_to_mesh expects a nerf-phase state")
    iso = (cfg.iso if cfg is not None else 5.0) if iso is None else iso
    mesh = volume_to_mesh(state.grid(), iso)
    if mesh.is_empty:
        return replace(state, warnings=state.warnings + ("empty iso-surface; staying in nerf phase",))
    logits = logit(mesh.vertex_colors)
    return replace(
        state,
        phase="mesh",
        mesh=mesh,
        color_logits=logits,
        opt_vcolor=Adam.zeros(logits.shape),
        opt_vertex=Adam.zeros(mesh.vertices.shape),
    )


def fit_mesh(state: ReconState, targets, cams, cfg: FitConfig):
    """Refine vertex colours (and optionally positions) of a mesh-phase state.

    Colours get the gradient of the RGB L1 and patch terms through the
    rasterizer's fixed barycentrics.  Vertex positions, when enabled, only
    follow the Laplacian and normal-consistency regularizers.
    """
    targets = np.asarray(targets, dtype=np.float64)
    w = cfg.weights
    mesh, logits = state.mesh, state.color_logits
    oc, ov = state.opt_vcolor, state.opt_vertex
    bufs = [rasterize(mesh, cam) for cam in cams]
    trace = []
    for _ in range(cfg.steps_per_denoise):
        colors = expit(logits)
        g_col = np.zeros_like(colors)
        value = 0.0
        for buf, cam, target in zip(bufs, cams, targets):
            hit = buf.face >= 0
            rgb = np.broadcast_to(np.asarray(cfg.background, dtype=np.float64), target[..., :3].shape).copy()
            f = mesh.faces[buf.face[hit]]
            b = buf.bary[hit]
            rgb[hit] = np.einsum("nk,nkc->nc", b, colors[f])
            d = rgb - target[..., :3]
            value += w.rgb * np.abs(d).mean() / len(cams)
            g_rgb = w.rgb * np.sign(d) / d.size
            pc, g_pc = L.patch_perceptual_grad(rgb, target[..., :3], cfg.patch, cfg.perceptual_c)
            value += w.perceptual * pc / len(cams)
            g_rgb = (g_rgb + w.perceptual * g_pc) / len(cams)
            gh = g_rgb[hit]
            for k in range(3):
                np.add.at(g_col, f[:, k], b[:, k, None] * gh)
        trace.append(float(value))
        logits, oc = oc.step(logits, g_col * colors * (1 - colors), cfg.lr_color, cfg.beta1, cfg.beta2, cfg.adam_eps)
        if cfg.optimize_vertices:
            _, g_lap = L.laplacian_smoothing_grad(mesh)
            _, g_nc = L.normal_consistency_grad(mesh)
            verts, ov = ov.step(mesh.vertices, w.laplacian * g_lap + w.normal_consistency * g_nc, cfg.lr_vertex, cfg.beta1, cfg.beta2, cfg.adam_eps)
            mesh = mesh.with_vertices(verts)
    mesh = replace(mesh, vertex_colors=expit(logits))
    new = replace(state, mesh=mesh, color_logits=logits, opt_vcolor=oc, opt_vertex=ov, step_count=state.step_count + len(trace))
    return new, trace


# ------------------------------------------------------------ reconstructors


def prepare_targets(views, alpha_blur: float) -> np.ndarray:
    """Clip colours and alpha to [0, 1], depth to >= 0, and soften alpha."""
    t = np.array(views, dtype=np.float64)
    t[..., :4] = np.clip(t[..., :4], 0.0, 1.0)
    t[..., 4] = np.maximum(t[..., 4], 0.0)
    if alpha_blur > 0:
        for v in range(len(t)):
            t[v, ..., 3] = gaussian_filter(t[v, ..., 3], alpha_blur, mode="nearest")
    return t


def downsample_views(views: np.ndarray, res: int) -> np.ndarray:
    f = views.shape[1] // res
    if f <= 1:
        return views
    v, h, w, c = views.shape
    return views[:, : h // f * f, : w // f * f].reshape(v, h // f, f, w // f, f, c).mean(axis=(2, 4))


def upsample_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    from .render.mesh import sample_bilinear

    sh, sw = img.shape[:2]
    ys = (np.arange(h) + 0.5) * sh / h
    xs = (np.arange(w) + 0.5) * sw / w
    xx, yy = np.meshgrid(xs, ys)
    return sample_bilinear(img, xx, yy)


class VolumeReconstructor:
    """Optimization-based reconstructor with NeRF then mesh phase."""

    kind = "volume"

    def __init__(self, cams, cfg: FitConfig = FitConfig(), grid_resolution: int = 24, nerf_to_mesh_fraction: float = 0.6):
        self.cams = list(cams)
        self.cfg = cfg
        self.grid_resolution = grid_resolution
        self.switch_at = nerf_to_mesh_fraction
        self.full_res = self.cams[0].width

    def init_state(self) -> ReconState:
        return init_volume_state(self.grid_resolution, density_scale=self.cfg.density_scale)

    def fit(self, state: ReconState, views, fraction: float = 1.0) -> ReconState:
        if state.phase == "nerf" and fraction >= self.switch_at:
            state = switch_to_mesh(state, cfg=self.cfg)
        targets = prepare_targets(views, self.cfg.alpha_blur)
        if state.phase == "mesh":
            return fit_mesh(state, targets, self.cams, self.cfg)[0]
        res = self.cfg.resolution_at(fraction, self.full_res)
        cams = [c.scaled(res) for c in self.cams]
        return fit_incremental(state, downsample_views(targets, res), cams, self.cfg)[0]

    def render(self, state: ReconState, cams=None, fraction: float = 1.0):
        cams = self.cams if cams is None else cams
        if state.phase == "mesh":
            return [render_mesh(state.mesh, cam, self.cfg.background) for cam in cams]
        res = self.cfg.resolution_at(fraction, cams[0].width)
        outs = []
        for cam in cams:
            out = render_volume_state(state, cam.scaled(res), self.cfg)
            if res != cam.width:
                up = upsample_bilinear(out.rgbad(), cam.height, cam.width)
                out = RenderOutput(up[..., :3], up[..., 3], up[..., 4], normals_from_depth(up[..., 4], cam, mask=up[..., 3] > 0.5))
            outs.append(out)
        return outs


class QuadReconstructor:
    """Closed-form texture fit on the shared quad geometry (affine in the views)."""

    kind = "quad"

    def __init__(self, cams, quad, view_weights=None):
        self.cams = list(cams)
        self.quad = quad
        self.view_weights = view_weights

    def init_state(self) -> ReconState:
        return ReconState("texture")

    def fit(self, state, views, fraction: float = 1.0) -> ReconState:
        fit = fit_feedforward_quads(views, self.cams, self.quad, self.view_weights)
        return replace(state, payload=fit, step_count=state.step_count + 1)

    def render(self, state, cams=None, fraction: float = 1.0):
        from .world import TexturedQuad, render_quad

        cams = self.cams if cams is None else cams
        q = TexturedQuad(self.quad.center, self.quad.axis_u, self.quad.axis_v, self.quad.half_size, state.payload.texture)
        return [render_quad(q, cam) for cam in cams]

    def rerender(self, views) -> np.ndarray:
        return render_quad_fit(fit_feedforward_quads(views, self.cams, self.quad, self.view_weights), self.quad, self.cams)


class SplatReconstructor:
    """Feed-forward occupancy carving into splats (stateless between steps)."""

    kind = "splats"

    def __init__(self, cams, cfg: SplatFitConfig = SplatFitConfig()):
        self.cams = list(cams)
        self.cfg = cfg

    def init_state(self) -> ReconState:
        return ReconState("splats")

    def fit(self, state, views, fraction: float = 1.0) -> ReconState:
        splats = fit_feedforward_splats(views, self.cams, self.cfg)
        return replace(state, payload=splats, step_count=state.step_count + 1)

    def render(self, state, cams=None, fraction: float = 1.0):
        cams = self.cams if cams is None else cams
        return [composite_splats(state.payload, cam) for cam in cams]


def stack_renders(renders) -> np.ndarray:
    return np.stack([r.rgbad() for r in renders])


def reconstruct_and_render(rec, state: ReconState, targets, render_cams=None, fraction: float = 1.0, steps: int | None = None):
    """Fit ``rec`` to ``targets`` then render RGB + depth feedback.

    ``steps=0`` skips fitting and renders the incoming state unchanged.
    """
    if steps != 0:
        state = rec.fit(state, targets, fraction)
    renders = rec.render(state, render_cams, fraction)
    return state, FeedbackPacket.from_views(stack_renders(renders)), renders


def rerender_fn(rec):
    """Map views to the re-render of a fresh reconstruction from them."""

    def fn(views):
        state = rec.fit(rec.init_state(), views, 1.0)
        return stack_renders(rec.render(state))

    return fn


# ------------------------------------------------------------ checkpoints


def save_checkpoint(state: ReconState, path) -> None:
    """Write a volume-phase state as an npz container tagged ``recon-v1``."""
    if state.phase != "nerf":
        raise ValueError("only nerf-phase states are checkpointed")
    meta = dict(header=CHECKPOINT_HEADER, phase=state.phase, step_count=state.step_count, density_scale=state.density_scale, adam_count=[state.opt_theta.count, state.opt_phi.count])
    buf = io.BytesIO()
    np.savez(
        buf,
        header=np.array(json.dumps(meta, sort_keys=True)),
        theta=state.theta,
        phi=state.phi,
        bounds=state.bounds,
        m_theta=state.opt_theta.m,
        v_theta=state.opt_theta.v,
        m_phi=state.opt_phi.m,
        v_phi=state.opt_phi.v,
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ReconState:
    with np.load(path) as z:
        meta = json.loads(str(z["header"]))
        if meta.get("header") != CHECKPOINT_HEADER:
            raise ValueError(f"not a {CHECKPOINT_HEADER} checkpoint")
        ct, cp = meta["adam_count"]
        return ReconState(
            meta["phase"],
            meta["step_count"],
            z["theta"].copy(),
            z["phi"].copy(),
            z["bounds"].copy(),
            meta["density_scale"],
            Adam(z["m_theta"].copy(), z["v_theta"].copy(), ct),
            Adam(z["m_phi"].copy(), z["v_phi"].copy(), cp),
        )


def fit_config_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)

"""Two-stage, I/O sync and feedback-augmented sampling over a prototype world.

All three pipelines share one solver loop (Euler ancestral on the edm-style
schedule) and differ only in how the per-step estimate x_hat is produced:

two_stage   x_hat = D(x_t); one reconstruction after the last step
io_sync     x_hat = R(D(x_t))            (or D(R(x_t)) when syncing inputs)
adapter     x_hat = D(x_t), fit R on it, then
            x_hat = lam_aug (D_aug(x_t, fb) - D_aug(x_t, 0)) + cfg(D_c, D_u)

where R is "reconstruct then re-render" with the reconstruction state carried
across steps.
"""

from __future__ import annotations

import functools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, guided_feedback_combine, sample
from .feedforward import SplatFitConfig
from .losses import cross_view_consistency, mdd_many, mode_distance
from .reconstruct import (
    FitConfig,
    QuadReconstructor,
    ReconState,
    SplatReconstructor,
    VolumeReconstructor,
    reconstruct_and_render,
    stack_renders,
)
from .render import SplatSet, VolumeGrid
from .world import FeedbackPacket, TexturedQuad, WorldModel, bayes_denoise, bayes_denoise_augmented, condition_prior, make_world

MODES = ("two_stage", "io_sync", "adapter")
INITS = ("noise", "mean_latent", "sdedit")
METRICS = ("mode_distance", "consistency", "mdd")
# t_init fractions of T for SDEdit-style starts: strong re-synthesis from a
# template, and light refinement of an existing result
T_INIT_PRESETS = {"template": 0.88, "refine": 0.3}


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "adapter"
    world: str = "bimodal-splat"
    world_resolution: int | None = None
    view_noise: float | None = None
    seed: int = 0
    steps: int = 30
    deterministic: bool = False
    scope: str = "per_view"
    condition: str | None = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    feedback_rho: float = 0.1
    bias_cancel: bool = True
    reconstructor: str = "auto"
    fit: FitConfig = field(default_factory=FitConfig)
    splat_fit: SplatFitConfig = field(default_factory=SplatFitConfig)
    fit_budget: float = 1.0
    grid_resolution: int = 24
    nerf_to_mesh_fraction: float = 0.6
    init: str = "noise"
    t_init: float = 1.0
    template: int = 0
    sync_at: str = "output"
    sync_init: bool = False
    view_schedule: tuple = ()
    label: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.scope not in ("per_view", "joint"):
            raise ValueError("scope must be 'per_view' or 'joint'")
        if self.sync_at not in ("output", "input"):
            raise ValueError("sync_at must be 'output' or 'input'")
        if self.reconstructor not in ("auto", "splats", "quad", "volume"):
            raise ValueError(f"unknown reconstructor {self.reconstructor!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_init <= 1.0:
            raise ValueError("t_init must lie in (0, 1]")
        if not 0.0 <= self.nerf_to_mesh_fraction <= 1.0:
            raise ValueError("nerf_to_mesh_fraction must lie in [0, 1]")
        if not self.feedback_rho > 0:
            raise ValueError("feedback_rho must be positive")
        if not self.fit_budget > 0:
            raise ValueError("fit_budget must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    config: PipelineConfig
    seed: int
    terminal: np.ndarray | None
    state: ReconState | None
    feedback: np.ndarray | None
    metrics: dict
    traces: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def summary(self) -> dict:
        return {
            "label": self.config.label,
            "mode": self.config.mode,
            "seed": self.seed,
            "metrics": self.metrics,
            "error": self.error,
            "steps_fitted": None if self.state is None else self.state.step_count,
            "warnings": [] if self.state is None else list(self.state.warnings),
        }


# ------------------------------------------------------------ worlds and reconstructors


@functools.lru_cache(maxsize=8)
def load_world(name: str, resolution: int | None = None, view_noise: float | None = None) -> WorldModel:
    kwargs = {}
    if resolution is not None:
        kwargs["resolution"] = resolution
    if view_noise is not None:
        kwargs["view_noise"] = view_noise
    world = make_world(name, **kwargs)
    world.renders  # render once per process
    return world


def world_for(cfg: PipelineConfig) -> WorldModel:
    return load_world(cfg.world, cfg.world_resolution, cfg.view_noise)


def world_kind(world: WorldModel) -> str:
    obj = world.prototypes[0].object
    if isinstance(obj, SplatSet):
        return "splats"
    if isinstance(obj, TexturedQuad):
        return "quad"
    if isinstance(obj, VolumeGrid):
        return "volume"
    raise TypeError(f"unsupported prototype object {type(obj).__name__}")


def _budget_splat_cfg(cfg: SplatFitConfig, budget: float) -> SplatFitConfig:
    return replace(cfg, lattice=max(8, int(round(cfg.lattice * min(budget, 1.0)))))


def make_reconstructor(cfg: PipelineConfig, world: WorldModel):
    kind = world_kind(world) if cfg.reconstructor == "auto" else cfg.reconstructor
    if kind == "splats":
        return SplatReconstructor(world.cameras, _budget_splat_cfg(cfg.splat_fit, cfg.fit_budget))
    if kind == "quad":
        return QuadReconstructor(world.cameras, world.prototypes[0].object)
    fit = replace(cfg.fit, steps_per_denoise=max(1, int(round(cfg.fit.steps_per_denoise * cfg.fit_budget))))
    return VolumeReconstructor(world.cameras, fit, cfg.grid_resolution, cfg.nerf_to_mesh_fraction)


def judge_for(world: WorldModel, splat_cfg: SplatFitConfig = SplatFitConfig()):
    """Fixed reconstruct-and-render used to score every pipeline alike.

    Returns a function mapping views to (re-rendered views, render outputs).
    Quad worlds use the closed-form texture fit; all others the splat carver.
    """
    if world_kind(world) == "quad":
        rec = QuadReconstructor(world.cameras, world.prototypes[0].object)
    else:
        rec = SplatReconstructor(world.cameras, splat_cfg)

    def judge(views):
        state = rec.fit(rec.init_state(), views, 1.0)
        renders = rec.render(state)
        return stack_renders(renders), renders

    return judge


def compute_metrics(terminal: np.ndarray, world: WorldModel, judge) -> dict:
    rerendered, renders = judge(terminal)
    md, k = mode_distance(terminal, world)
    return {
        "mode_distance": md,
        "nearest_prototype": k,
        "consistency": cross_view_consistency(terminal, lambda x: rerendered),
        "mdd": mdd_many(renders),
    }


# ------------------------------------------------------------ sampling


def schedule() -> NoiseSchedule:
    return NoiseSchedule.edm(80.0)


def initial_state(cfg: PipelineConfig, world: WorldModel, sched: NoiseSchedule, times) -> np.ndarray:
    t0 = float(times[0])
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    eps = rng.standard_normal(world.view_shape())
    if cfg.init == "noise":
        return float(sched.sigma(t0)) * eps
    if cfg.init == "mean_latent":
        prior = condition_prior(world, cfg.condition)
        x_bar = np.tensordot(prior, world.renders, axes=(0, 0))
    else:
        x_bar = world.renders[cfg.template]
    return float(sched.alpha(t0)) * x_bar + float(sched.sigma(t0)) * eps


def base_denoise(x_t, t, world, sched, cfg: PipelineConfig):
    """(d_cond, d_uncond) of the Bayes base model; equal without a condition."""
    d_u = bayes_denoise(x_t, t, world, sched, cfg.scope)
    if cfg.condition is None:
        return d_u, d_u
    return bayes_denoise(x_t, t, world, sched, cfg.scope, cfg.condition), d_u


def _active_views(cfg: PipelineConfig, fraction: float, n_views: int) -> int:
    n = n_views
    for start, count in cfg.view_schedule:
        if fraction >= start:
            n = int(count)
    return max(1, min(n, n_views))


class _Fitter:
    """Carries the reconstruction state through a trajectory."""

    def __init__(self, cfg: PipelineConfig, world: WorldModel):
        self.cfg = cfg
        self.rec = make_reconstructor(cfg, world)
        self.state = self.rec.init_state()
        self.n_views = world.V
        self.traces = []

    def __call__(self, views, fraction: float) -> np.ndarray:
        n = _active_views(self.cfg, fraction, self.n_views)
        if n < self.n_views:
            views = _masked_views(views, n)
        before = self.state.step_count
        self.state, _, renders = reconstruct_and_render(self.rec, self.state, views, fraction=fraction)
        self.traces.append(self.state.step_count - before)
        return stack_renders(renders)


def _masked_views(views, n):
    # views past the active count keep their data but get zero alpha so that
    # they neither support nor carve the reconstruction
    out = np.array(views, dtype=np.float64)
    out[n:, ..., 3] = 0.0
    return out


def start_time(t_init: float, sched: NoiseSchedule) -> float:
    """EDM start time for a t_init fraction measured on the VP time axis.

    The fraction picks the point on a VP schedule with the same sigma_max and
    the returned time has the same noise-to-signal ratio, tan(t_init * atan(T)).
    Counting the fraction linearly in EDM sigma would make 0.3 a sigma of 24,
    which wipes out any template.
    """
    if t_init >= 1.0:
        return float(sched.T)
    return float(np.tan(t_init * np.arctan(sched.T)))


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    world = world_for(cfg)
    sched = schedule()
    times = sched.time_grid(cfg.steps, start_time(cfg.t_init, sched))
    x_init = initial_state(cfg, world, sched, times)
    fitter = _Fitter(cfg, world)
    g = cfg.guidance
    rho = cfg.feedback_rho
    last_fb = {}

    def fraction(step):
        return step / cfg.steps

    if cfg.mode == "two_stage":

        def denoise(x_t, t, step):
            d_c, d_u = base_denoise(x_t, t, world, sched, cfg)
            return cfg_combine(d_c, d_u, g.lambda_c)

    elif cfg.mode == "io_sync":

        def denoise(x_t, t, step):
            if cfg.sync_at == "input":
                x_t = fitter(x_t, fraction(step))
            d_c, d_u = base_denoise(x_t, t, world, sched, cfg)
            d = cfg_combine(d_c, d_u, g.lambda_c)
            if cfg.sync_at == "output":
                d = fitter(d, fraction(step))
            return d

        if cfg.sync_at == "output" and cfg.sync_init:
            x_init = fitter(x_init, 0.0)

    else:

        def denoise(x_t, t, step):
            d_c, d_u = base_denoise(x_t, t, world, sched, cfg)
            intermediate = cfg_combine(d_c, d_u, g.lambda_c)
            views = fitter(intermediate, fraction(step))
            fb = FeedbackPacket.from_views(views)
            last_fb["views"] = views
            d_fb = bayes_denoise_augmented(x_t, t, world, sched, fb, rho, cfg.condition)
            if not cfg.bias_cancel:
                return g.lambda_aug * d_fb + (1.0 - g.lambda_aug) * cfg_combine(d_c, d_u, g.lambda_c)
            d_zero = bayes_denoise_augmented(x_t, t, world, sched, FeedbackPacket.zero(x_t.shape), rho, cfg.condition)
            return guided_feedback_combine(d_fb, d_zero, d_c, d_u, g)

    final = sample(denoise, x_init, times, sched, cfg.seed, cfg.deterministic)
    terminal = final.x
    if cfg.mode == "two_stage" and fitter.rec.kind == "volume":
        # the single reconstruction gets the same fitting budget as a trajectory
        for step in range(cfg.steps):
            fitter(terminal, fraction(step))
    feedback = fitter(terminal, 1.0)
    metrics = compute_metrics(terminal, world, judge_for(world, cfg.splat_fit))
    return RunReport(cfg, cfg.seed, terminal, fitter.state, feedback, metrics, fitter.traces)


def sample_two_stage(cfg: PipelineConfig) -> RunReport:
    if cfg.mode != "two_stage":
        raise ValueError("sample_two_stage needs mode = two_stage")
    return run_pipeline(cfg)


def sample_io_sync(cfg: PipelineConfig) -> RunReport:
    if cfg.mode != "io_sync":
        raise ValueError("sample_io_sync needs mode = io_sync")
    return run_pipeline(cfg)


def sample_adapter(cfg: PipelineConfig) -> RunReport:
    if cfg.mode != "adapter":
        raise ValueError("sample_adapter needs mode = adapter")
    return run_pipeline(cfg)


def safe_run(cfg: PipelineConfig) -> RunReport:
    """Run a pipeline, turning failures into a report with an error message."""
    try:
        return run_pipeline(cfg)
    except Exception as exc:  # noqa: BLE001 - suites record and continue
        return RunReport(cfg, cfg.seed, None, None, None, {m: float("nan") for m in METRICS}, error=f"{type(exc).__name__}: {exc}")


# ------------------------------------------------------------ suites


def run_seeds(base_seed: int, n: int) -> list:
    """Per-run seeds shared by every config of a suite (paired comparisons)."""
    return [int(np.random.SeedSequence([int(base_seed), i]).generate_state(1)[0]) for i in range(n)]


def table1_configs(world: str = "bimodal-splat", **overrides) -> dict:
    """Rows mirroring the ablation table: baselines, lambda_aug sweep, ablations.

    A1 and A2 differ only in reconstruction effort (under-fitted vs full).
    """
    base = dict(world=world, feedback_rho=0.2)
    base.update(overrides)
    adapter = lambda lam, **kw: PipelineConfig(mode="adapter", guidance=GuidanceConfig(lambda_aug=lam), **{**base, **kw})  # noqa: E731
    return {
        "A0": PipelineConfig(mode="two_stage", label="two-stage", **base),
        "A1": PipelineConfig(mode="io_sync", fit_budget=0.5, label="io sync, under-fitted reconstruction", **base),
        "A2": PipelineConfig(mode="io_sync", label="io sync, full reconstruction", **base),
        "B0": replace(adapter(1.0), label="adapter lambda_aug=1"),
        "B1": replace(adapter(2.0), label="adapter lambda_aug=2"),
        "B2": replace(adapter(4.0), label="adapter lambda_aug=4"),
        "B3": replace(adapter(8.0), label="adapter lambda_aug=8"),
        "C0": replace(adapter(0.0), label="adapter without feedback"),
        "C1": replace(adapter(1.0, bias_cancel=False), label="adapter without bias cancelling"),
    }


@dataclass
class SuiteResult:
    rows: dict  # config id -> {metric: {median, iqr, values}}
    runs: dict  # config id -> list of RunReport
    seeds: list

    def table(self) -> list:
        """Rows of (config id, label, n_ok, median/IQR per metric), sorted by id."""
        out = []
        for cid in sorted(self.rows):
            r = self.rows[cid]
            out.append([cid, r["label"], r["n_ok"]] + [v for m in METRICS for v in (r[m]["median"], r[m]["iqr"])])
        return out


def _aggregate(reports) -> dict:
    out = {"n_ok": sum(r.ok for r in reports), "label": reports[0].config.label if reports else ""}
    for m in METRICS:
        vals = np.array([r.metrics[m] for r in reports if r.ok], dtype=np.float64)
        if len(vals):
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            out[m] = {"median": float(med), "iqr": float(q3 - q1), "values": [float(v) for v in vals]}
        else:
            out[m] = {"median": float("nan"), "iqr": float("nan"), "values": []}
    return out


def _run_job(job):
    cid, cfg = job
    return cid, safe_run(cfg)


def run_suite(configs: dict, n_seeds: int, base_seed: int = 0, jobs: int = 1) -> SuiteResult:
    """Run every config over the same ``n_seeds`` derived seeds.

    Output ordering is keyed by config id and seed index, so results do not
    depend on ``jobs`` or on the order of ``configs``.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = run_seeds(base_seed, n_seeds)
    keys = sorted(configs)
    work = [(cid, replace(configs[cid], seed=s)) for cid in keys for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_job, work))
    else:
        done = [_run_job(j) for j in work]
    runs = {cid: [] for cid in keys}
    for cid, rep in done:
        runs[cid].append(rep)
    rows = {cid: _aggregate(runs[cid]) for cid in keys}
    return SuiteResult(rows, runs, seeds)


# ------------------------------------------------------------ outputs


def _num(v) -> str:
    return repr(float(v))


def suite_csv(result: SuiteResult) -> str:
    head = ["config_id", "label", "n_ok"] + [f"{m}_{s}" for m in METRICS for s in ("median", "iqr")]
    lines = [",".join(head)]
    for row in result.table():
        cid, label, n_ok = row[:3]
        lines.append(",".join([cid, json.dumps(label), str(n_ok)] + [_num(v) for v in row[3:]]))
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def suite_report(result: SuiteResult) -> dict:
    return {
        "seeds": result.seeds,
        "rows": result.rows,
        "runs": {cid: [r.summary() for r in reps] for cid, reps in result.runs.items()},
        "configs": {cid: reps[0].config.to_dict() for cid, reps in result.runs.items() if reps},
    }


def contact_sheet(report: RunReport) -> np.ndarray:
    """Terminal views on the top row, feedback renders below (RGB in [0, 1])."""
    top = np.concatenate(list(np.clip(report.terminal[..., :3], 0, 1)), axis=1)
    rows = [top]
    if report.feedback is not None:
        rows.append(np.concatenate(list(np.clip(report.feedback[..., :3], 0, 1)), axis=1))
    return np.concatenate(rows, axis=0)


def write_suite(result: SuiteResult, out_dir, images: bool = True) -> list:
    """Write table.csv, report.json and per-run JSON/PNG; returns written paths."""
    from .render.io import write_png

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
        written.append(path)

    put("table.csv", suite_csv(result))
    put("report.json", dumps(suite_report(result)))
    run_dir = os.path.join(out_dir, "runs")
    os.makedirs(run_dir, exist_ok=True)
    for cid, reps in sorted(result.runs.items()):
        for i, rep in enumerate(reps):
            stem = f"{cid}_seed{i:03d}"
            put(os.path.join("runs", stem + ".json"), dumps(rep.summary()))
            if images and rep.ok:
                path = os.path.join(run_dir, stem + ".png")
                write_png(path, contact_sheet(rep))
                written.append(path)
    return written

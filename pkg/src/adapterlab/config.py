"""TOML experiment configs: strict schema, dotted overrides and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Literal, Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .diffusion import GuidanceConfig
from .feedforward import SplatFitConfig
from .losses import LossWeights
from .pipelines import PipelineConfig, table1_configs
from .reconstruct import FitConfig


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GuidanceModel(_Strict):
    lambda_c: float = Field(1.0, ge=0)
    lambda_aug: float = Field(1.0, ge=0)
    zero_feedback_prob: float = Field(0.2, ge=0, le=1)


class WeightsModel(_Strict):
    rgb: float = Field(1.0, ge=0)
    alpha: float = Field(1.0, ge=0)
    depth: float = Field(0.1, ge=0)
    perceptual: float = Field(1.0, ge=0)
    normal_tv: float = Field(0.01, ge=0)
    entropy: float = Field(0.001, ge=0)
    laplacian: float = Field(1.0, ge=0)
    normal_consistency: float = Field(0.1, ge=0)


class FitModel(_Strict):
    steps_per_denoise: int = Field(96, ge=1)
    weights: WeightsModel = WeightsModel()
    lr_density: float = Field(0.05, ge=0)
    lr_color: float = Field(0.02, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.99, ge=0, lt=1)
    density_scale: float = Field(20.0, gt=0)
    patch: int = Field(4, ge=1)
    erosion: int = Field(2, ge=0)
    alpha_blur: float = Field(0.5, ge=0)
    resolution_schedule: list[tuple[float, int]] = [(0.0, 32), (0.5, 64)]
    iso: float = Field(5.0, gt=0)
    prune_density: float = Field(1.0, ge=0)
    optimize_vertices: bool = False


class SplatFitModel(_Strict):
    lattice: int = Field(32, ge=2)
    bounds: float = Field(1.0, gt=0)
    bandwidth: float = Field(0.35, gt=0)
    min_occupancy: float = Field(0.2, ge=0, le=1)
    scale_factor: float = Field(0.55, gt=0)
    opacity: float = Field(0.95, gt=0, le=1)


class SuiteModel(_Strict):
    preset: Literal["table1"] = "table1"
    rows: Optional[list[str]] = None
    n_seeds: int = Field(20, ge=1)
    images: bool = True
    feedback_rho: float = Field(0.2, gt=0)  # suite rows use this, not the run-level value


class RunModel(_Strict):
    seed: int
    mode: Literal["two_stage", "io_sync", "adapter"]
    world: Literal["bimodal-texture", "tetra-4", "bimodal-splat"] = "bimodal-splat"
    world_resolution: Optional[int] = Field(None, ge=4)
    view_noise: Optional[float] = Field(None, ge=0)
    steps: int = Field(30, ge=1)
    deterministic: bool = False
    scope: Literal["per_view", "joint"] = "per_view"
    condition: Optional[str] = None
    feedback_rho: float = Field(0.1, gt=0)
    bias_cancel: bool = True
    reconstructor: Literal["auto", "splats", "quad", "volume"] = "auto"
    fit_budget: float = Field(1.0, gt=0)
    grid_resolution: int = Field(24, ge=2)
    nerf_to_mesh_fraction: float = Field(0.6, ge=0, le=1)
    init: Literal["noise", "mean_latent", "sdedit"] = "noise"
    t_init: float = Field(1.0, gt=0, le=1)
    template: int = Field(0, ge=0)
    sync_at: Literal["output", "input"] = "output"
    sync_init: bool = False
    view_schedule: list[tuple[float, int]] = []
    label: str = ""
    guidance: GuidanceModel = GuidanceModel()
    fit: FitModel = FitModel()
    splat_fit: SplatFitModel = SplatFitModel()
    suite: Optional[SuiteModel] = None


def parse_value(text: str):
    """Interpret an override value as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    out = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected KEY=VALUE"])
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        node = out
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError([f"override {key}: {part} is not a table"])
            node = nxt
        node[path[-1]] = parse_value(raw.strip())
    return out


def _problems(err: ValidationError) -> list:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "missing":
            out.append(f"{loc}: required field missing")
        elif e["type"] == "extra_forbidden":
            out.append(f"{loc}: unknown field")
        else:
            out.append(f"{loc}: {e['msg']}")
    return out


def validate(data: dict) -> RunModel:
    try:
        return RunModel.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_problems(err)) from None


def load_text(text: str, overrides=(), seed: int | None = None) -> RunModel:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise ConfigError([f"TOML syntax: {err}"]) from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = int(seed)
    return validate(data)


def load_file(path, overrides=(), seed: int | None = None) -> RunModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as err:
        raise ConfigError([f"file is not UTF-8: {err}"]) from None
    return load_text(text, overrides, seed)


def resolved(model: RunModel) -> dict:
    return json.loads(model.model_dump_json())


def canonical_json(model: RunModel) -> str:
    return json.dumps(resolved(model), sort_keys=True, separators=(",", ":"))


def config_hash(model: RunModel) -> str:
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()


def to_pipeline(model: RunModel) -> PipelineConfig:
    d = resolved(model)
    fit = d.pop("fit")
    weights = LossWeights(**fit.pop("weights"))
    fit["resolution_schedule"] = tuple(tuple(x) for x in fit["resolution_schedule"])
    d["fit"] = FitConfig(weights=weights, **fit)
    d["guidance"] = GuidanceConfig(**d.pop("guidance"))
    d["splat_fit"] = SplatFitConfig(**d.pop("splat_fit"))
    d["view_schedule"] = tuple(tuple(x) for x in d["view_schedule"])
    d.pop("suite")
    return PipelineConfig(**d)


def suite_configs(model: RunModel) -> dict:
    """Config id -> PipelineConfig for the suite, built on the run settings.

    The row presets fix mode, guidance scale and the fields that distinguish
    rows; everything else comes from the file.
    """
    suite = model.suite or SuiteModel()
    base = to_pipeline(model)
    rows = table1_configs(base.world)
    keep = sorted(rows) if suite.rows is None else list(suite.rows)
    unknown = [r for r in keep if r not in rows]
    if unknown:
        raise ConfigError([f"suite.rows: unknown row ids {unknown}"])
    shared = {
        k: getattr(base, k)
        for k in ("world_resolution", "view_noise", "steps", "deterministic", "scope", "condition", "reconstructor", "fit", "splat_fit", "grid_resolution", "nerf_to_mesh_fraction", "init", "t_init", "template", "view_schedule")
    }
    out = {}
    for cid in keep:
        row = rows[cid]
        g = row.guidance
        out[cid] = PipelineConfig(**{
            **shared,
            "mode": row.mode,
            "world": row.world,
            "fit_budget": row.fit_budget,
            "bias_cancel": row.bias_cancel,
            "label": row.label,
            "sync_at": row.sync_at,
            "feedback_rho": suite.feedback_rho,
            "guidance": GuidanceConfig(base.guidance.lambda_c, g.lambda_aug, base.guidance.zero_feedback_prob),
        })
    return out

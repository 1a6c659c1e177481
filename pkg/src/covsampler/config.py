"""Run configuration: a versioned TOML file parsed into :class:`RunConfig`.

Example::

    version = 1
    seeds = [0, 1, 2]
    out = "results"            # optional, overridden by --out

    [model]
    kind = "stationary"        # gaussian | stationary | blockdiag | gmm | mlp
    size = 16
    channels = 3

    [schedule]
    name = "cosine"
    spacing = "uniform-t"

    [sampling]
    samplers = ["covaware", "ddim"]
    budgets = [24, 36, 60]     # or: steps = [12]
    count = 1000

    [guidance]
    enabled = true
    scale = 1.2
    cond_shift = 0.2

    [estimator]
    first_step_var = 0.25
    averaging = "channel"
    transform = "convdct"

    [ablation]
    transforms = ["convdct", "blockdct"]
    averaging = ["channel", "isotropic"]
    budgets = [24, 36]

Everything is validated by :func:`load_config` before any sampling starts.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Optional

import numpy as np
import tomli

from .denoiser import GaussianMixtureModel, load_mlp, train_mlp
from .evaluation import (
    AblationGrid,
    Experiment,
    anisotropic_gaussian,
    block_diagonal_model,
    guided_experiment,
    stationary_field_model,
)
from .samplers import NFE_PER_STEP, SAMPLER_KINDS, SamplerSpec
from .schedule import make_schedule
from .transforms import TRANSFORM_NAMES
from .tweedie import AVERAGING_MODES, CovEstimatorConfig

CONFIG_VERSION = 1
MODEL_KINDS = ("gaussian", "stationary", "blockdiag", "gmm", "mlp")
_SECTIONS = {"model", "schedule", "sampling", "guidance", "estimator", "ablation"}
_TOP_KEYS = {"version", "seeds", "out"} | _SECTIONS

_SECTION_KEYS = {
    "model": {
        "kind", "event_shape", "decay", "scale", "model_seed", "size", "channels", "block", "exponent",
        "pixel_var", "mean", "weights", "means", "scales", "reference_count", "params", "data",
        "train_steps", "hidden", "activation",
    },
    "schedule": {"name", "shift", "l_min", "l_max", "spacing"},
    "sampling": {"samplers", "budgets", "steps", "count", "chunk_size", "addim_calibration"},
    "guidance": {"enabled", "scale", "cond_shift", "interval"},
    "estimator": {f.name for f in dataclasses.fields(CovEstimatorConfig)},
    "ablation": {"transforms", "averaging", "budgets"},
}


class ConfigError(ValueError):
    """The configuration is unreadable or inconsistent."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: dict
    schedule: dict
    samplers: tuple
    budgets: tuple
    steps: tuple
    count: int
    chunk_size: int
    addim_calibration: int
    guidance: dict
    estimator: CovEstimatorConfig
    seeds: tuple
    out: Optional[str]
    ablation: Optional[dict]
    base_dir: str = "."

    @property
    def guided(self) -> bool:
        return bool(self.guidance.get("enabled", False))

    def sampler_specs(self) -> list:
        return [SamplerSpec(k, self.estimator) if k == "covaware" else SamplerSpec(k) for k in self.samplers]

    def ablation_grid(self) -> AblationGrid:
        if self.ablation is None:
            raise ConfigError("config has no [ablation] section")
        a = self.ablation
        return AblationGrid(tuple(a["transforms"]), tuple(a["averaging"]), tuple(a["budgets"]), self.estimator)


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _int_list(value, where: str) -> tuple:
    if not isinstance(value, list) or not value or not all(isinstance(v, int) and v > 0 for v in value):
        raise ConfigError(f"{where} must be a non-empty list of positive integers")
    return tuple(value)


def parse_config(doc: dict, base_dir: str = ".") -> RunConfig:
    _check_keys(doc, _TOP_KEYS, "top level")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {doc.get('version')!r}; expected {CONFIG_VERSION}")
    for name in _SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"[{name}] must be a table")
        _check_keys(doc.get(name, {}), _SECTION_KEYS[name], f"[{name}]")

    model = dict(doc.get("model", {}))
    kind = model.get("kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"[model] kind must be one of {MODEL_KINDS}, got {kind!r}")
    if kind == "mlp":
        data = model.get("data")
        if not isinstance(data, dict) or data.get("kind") not in ("gaussian", "gmm"):
            raise ConfigError("[model] kind = 'mlp' needs a [model.data] table with kind 'gaussian' or 'gmm'")
        if "params" in model:
            path = os.path.join(base_dir, model["params"])
            if not os.path.isfile(path):
                raise ConfigError(f"[model] params file not found: {path}")

    schedule = dict(doc.get("schedule", {}))
    try:
        make_schedule(schedule.get("name", "cosine"), schedule.get("shift", 0.0), schedule.get("l_min", -10.0), schedule.get("l_max", 10.0))
    except ValueError as e:
        raise ConfigError(f"[schedule] {e}") from None
    if schedule.get("spacing", "uniform-t") not in ("uniform-t", "uniform-logsnr"):
        raise ConfigError("[schedule] spacing must be 'uniform-t' or 'uniform-logsnr'")

    sampling = doc.get("sampling", {})
    samplers = sampling.get("samplers", ["covaware", "ddim"])
    if not isinstance(samplers, list) or not samplers or any(s not in SAMPLER_KINDS for s in samplers):
        raise ConfigError(f"[sampling] samplers must be a non-empty list drawn from {SAMPLER_KINDS}")
    if "budgets" in sampling and "steps" in sampling:
        raise ConfigError("[sampling] give either budgets or steps, not both")
    budgets = _int_list(sampling["budgets"], "[sampling] budgets") if "budgets" in sampling else ()
    steps = _int_list(sampling.get("steps", [8]), "[sampling] steps") if not budgets else ()
    count = sampling.get("count", 1000)
    chunk = sampling.get("chunk_size", 256)
    calib = sampling.get("addim_calibration", 2000)
    for name, v in (("count", count), ("chunk_size", chunk), ("addim_calibration", calib)):
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"[sampling] {name} must be a positive integer")

    guidance = dict(doc.get("guidance", {}))
    if guidance.get("enabled", False):
        if kind not in ("gaussian", "stationary", "blockdiag"):
            raise ConfigError("guidance is supported for Gaussian model kinds only")
        interval = guidance.get("interval", [-np.inf, np.inf])
        if not (isinstance(interval, list) and len(interval) == 2 and interval[0] < interval[1]):
            raise ConfigError("[guidance] interval must be [lo, hi] with lo < hi")
    guided = bool(guidance.get("enabled", False))
    for b in budgets:
        for s in samplers:
            per = NFE_PER_STEP[s][0 if guided else 1]
            if b % per:
                raise ConfigError(f"[sampling] budget {b} is not a multiple of {per} NFE/step for {s}")

    try:
        estimator = CovEstimatorConfig(**doc.get("estimator", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[estimator] {e}") from None

    ablation = doc.get("ablation")
    if ablation is not None:
        for key, allowed in (("transforms", TRANSFORM_NAMES), ("averaging", AVERAGING_MODES)):
            vals = ablation.get(key)
            if not isinstance(vals, list) or not vals or any(v not in allowed for v in vals):
                raise ConfigError(f"[ablation] {key} must be a non-empty list drawn from {allowed}")
        abl_budgets = _int_list(ablation.get("budgets"), "[ablation] budgets")
        per = NFE_PER_STEP["covaware"][0 if guided else 1]
        if any(b % per for b in abl_budgets):
            raise ConfigError(f"[ablation] budgets must be multiples of {per}")
        for t in ablation["transforms"]:
            try:
                dataclasses.replace(estimator, transform=t)
            except ValueError as e:
                raise ConfigError(f"[ablation] {e}") from None

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    out = doc.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string path")

    cfg = RunConfig(
        model=model,
        schedule=schedule,
        samplers=tuple(samplers),
        budgets=budgets,
        steps=steps,
        count=count,
        chunk_size=chunk,
        addim_calibration=calib,
        guidance=guidance,
        estimator=estimator,
        seeds=tuple(seeds),
        out=out,
        ablation=ablation,
        base_dir=base_dir,
    )
    try:
        build_reference_model(cfg.model, cfg.base_dir)  # shapes and parameters checked before any sampling
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"[model] {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))


def _gmm(spec: dict) -> GaussianMixtureModel:
    shape = tuple(spec.get("event_shape", (2,)))
    if "means" in spec:
        return GaussianMixtureModel(spec["weights"], np.asarray(spec["means"], dtype=float), spec["scales"], shape)
    # default: ring of components
    k = 8
    d = int(np.prod(shape))
    angles = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = 2.0 * np.cos(angles)
    if d > 1:
        means[:, 1] = 2.0 * np.sin(angles)
    return GaussianMixtureModel(np.full(k, 1.0 / k), means, np.full(k, 0.2), shape)


def build_reference_model(spec: dict, base_dir: str = "."):
    """The analytic distribution a model spec describes (for ``mlp``, its data)."""
    kind = spec["kind"]
    if kind == "gaussian":
        return anisotropic_gaussian(tuple(spec.get("event_shape", (4, 4, 1))), spec.get("decay", 1.5), spec.get("model_seed", 0), spec.get("scale", 1.0))
    if kind == "stationary":
        return stationary_field_model(spec.get("size", 16), spec.get("channels", 3), spec.get("exponent", 2.0), spec.get("pixel_var", 0.25), spec.get("mean", 0.0))
    if kind == "blockdiag":
        return block_diagonal_model(spec.get("size", 16), spec.get("channels", 3), spec.get("block", 8), spec.get("exponent", 2.0), spec.get("pixel_var", 0.25), spec.get("mean", 0.0))
    if kind == "gmm":
        return _gmm(spec)
    if kind == "mlp":
        return build_reference_model(spec["data"], base_dir)
    raise ValueError(f"unknown model kind {kind!r}")


def build_experiment(cfg: RunConfig) -> Experiment:
    """Denoiser plus reference for the configured model."""
    sched = cfg.schedule
    kwargs = dict(
        schedule=make_schedule(sched.get("name", "cosine"), sched.get("shift", 0.0), sched.get("l_min", -10.0), sched.get("l_max", 10.0)),
        count=cfg.count,
        spacing=sched.get("spacing", "uniform-t"),
        addim_calibration=cfg.addim_calibration,
        chunk_size=cfg.chunk_size,
    )
    spec = cfg.model
    ref_model = build_reference_model(spec, cfg.base_dir)
    if cfg.guided:
        g = cfg.guidance
        return guided_experiment(
            ref_model,
            cond_shift=g.get("cond_shift", 0.2),
            scale=g.get("scale", 1.2),
            interval=tuple(g.get("interval", (-np.inf, np.inf))),
            **kwargs,
        )
    if spec["kind"] in ("gaussian", "stationary", "blockdiag"):
        return Experiment(handle=ref_model, reference=ref_model, **kwargs)
    ref_count = spec.get("reference_count", 2000)
    reference = ref_model.sample(ref_count, np.random.default_rng([spec.get("model_seed", 0), 0xDA7A]))
    if spec["kind"] == "gmm":
        return Experiment(handle=ref_model, reference=reference, **kwargs)
    if "params" in spec:
        handle = load_mlp(os.path.join(cfg.base_dir, spec["params"]))
    else:
        train = ref_model.sample(max(ref_count, 4096), np.random.default_rng([spec.get("model_seed", 0), 0x7EA1]))
        handle = train_mlp(
            train,
            hidden=tuple(spec.get("hidden", (64, 64))),
            steps=spec.get("train_steps", 2000),
            seed=spec.get("model_seed", 0),
            schedule=kwargs["schedule"],
            activation=spec.get("activation", "tanh"),
        )
    if tuple(handle.event_shape) != tuple(reference.shape[1:]):
        raise ConfigError(f"MLP event shape {handle.event_shape} does not match the data {reference.shape[1:]}")
    return Experiment(handle=handle, reference=reference, **kwargs)

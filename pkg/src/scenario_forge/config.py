"""Run configuration: one JSON document with a section per component."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .diffusion import DenoiserHyper
from .vae import EDGE_DIM
from .guidance import GuidanceConfig
from .planner import PlannerConfig
from .selection import FeasibilityLimits, SelectionConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "runs"


@dataclass(frozen=True)
class GeneratorSettings:
    layout: str = "mixed"
    n_agents: tuple = (2, 8)
    dt: float = 0.5
    t_hist: int = 4
    t_future: int = 12
    resolution: float = 0.5
    val_fraction: float = 0.2


@dataclass(frozen=True)
class VaeSettings:
    latent_dim: int = 32
    cond_dim: int = 64
    hidden_dim: int = 128
    mp_rounds: int = 2
    beta_kl: float = 0.1
    kl_warmup: float = 0.2
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    grad_clip: float = 10.0


@dataclass(frozen=True)
class DiffusionSettings:
    K: int = 100
    beta_start: float = 1e-4
    beta_end: float = 5e-2
    ddim_steps: int = 20
    samples: int = 10
    hidden_dim: int = 128
    time_dim: int = 32
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 5e-4


SECTIONS = {
    "paths": PathsConfig,
    "generator": GeneratorSettings,
    "vae": VaeSettings,
    "diffusion": DiffusionSettings,
    "guidance": GuidanceConfig,
    "selection": SelectionConfig,
    "limits": FeasibilityLimits,
    "planner": PlannerConfig,
}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    vae: VaeSettings = field(default_factory=VaeSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    limits: FeasibilityLimits = field(default_factory=FeasibilityLimits)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["generator"]["n_agents"] = list(self.generator.n_agents)
        out["seed"] = self.seed
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {}
        for name, kind in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name: f for f in fields(kind)}
            bad = set(section) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            values = dict(section)
            if name == "generator" and "n_agents" in values:
                n = values["n_agents"]
                values["n_agents"] = (int(n), int(n)) if isinstance(n, int) else tuple(int(v) for v in n)
            try:
                kwargs[name] = kind(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        return cls(seed=seed, **kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
        return cls.from_dict(data)

    def with_overrides(self, **sections) -> "RunConfig":
        """Replace fields inside sections, e.g. ``with_overrides(diffusion={"samples": 5})``."""
        cfg = self
        for name, values in sections.items():
            if name == "seed":
                cfg = replace(cfg, seed=int(values))
                continue
            try:
                cfg = replace(cfg, **{name: replace(getattr(cfg, name), **values)})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid override for {name!r}: {exc}") from exc
        return cfg

    def denoiser_hyper(self) -> DenoiserHyper:
        d = self.diffusion
        return DenoiserHyper(self.vae.latent_dim, self.vae.cond_dim, d.hidden_dim, d.time_dim, d.K, d.beta_start, d.beta_end, EDGE_DIM)

"""Input-validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .scene import InvalidInputError, Scenario


def check_scenarios(scenarios, require_future: bool = False) -> list[Scenario]:
    """Coerce to a non-empty list of validated scenarios with matching horizons."""
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    if not isinstance(scenarios, Iterable):
        raise InvalidInputError(f"expected a sequence of Scenario, got {type(scenarios).__name__}")
    out = list(scenarios)
    if not out:
        raise InvalidInputError("at least one scenario is required")
    first = out[0]
    for i, sc in enumerate(out):
        if not isinstance(sc, Scenario):
            raise InvalidInputError(f"item {i} is {type(sc).__name__}, not Scenario")
        if (sc.dt, sc.t_hist, sc.t_future) != (first.dt, first.t_hist, first.t_future):
            raise InvalidInputError(f"scenario {i} horizons differ from scenario 0")
        if require_future:
            for a in sc.agents:
                if a.role != "ego" and a.future is None:
                    raise InvalidInputError(f"scenario {i} agent {a.id} has no future track")
    return out


def check_latents(latents, counts: list[int], dim: int) -> list[np.ndarray]:
    """Validate one ``(n_i, dim)`` finite latent array per scenario."""
    if len(latents) != len(counts):
        raise InvalidInputError(f"expected {len(counts)} latent sets, got {len(latents)}")
    out = []
    for i, (z, n) in enumerate(zip(latents, counts)):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (n, dim):
            raise InvalidInputError(f"latent set {i} has shape {z.shape}, expected {(n, dim)}")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError(f"latent set {i} contains non-finite values")
        out.append(z)
    return out


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise InvalidInputError(f"{name} must be positive and finite, got {value}")
    return value


def check_nonnegative(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise InvalidInputError(f"{name} must be non-negative and finite, got {value}")
    return value

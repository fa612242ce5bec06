"""Guidance objectives, routed latent gradients and guided-noise injection.

The composite cost is ``J = w_b J_br + w_ar J_ar + w_a J_adv``:

* ``J_br`` penalises close approaches among non-adversarial agents (ego
  included, using its planned future) and their proximity to the road edge;
* ``J_ar`` penalises the adversary approaching other background agents and
  the road edge;
* ``J_adv = sum_t min(0, d_adv_ego(t) - p)`` rewards the adversary for
  reaching the ego.

Two evaluation paths exist. :func:`composite_objective` works on plain arrays
and sums with :func:`math.fsum`, which makes it exactly comparable to a naive
per-pair loop. :func:`objective_nodes` builds the same quantities on the
autodiff tape for guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .scene import InvalidInputError, MapStack, SceneMap, Scenario

THRESHOLD_MODES = ("contact", "buffered", "reach")


class GuidanceError(RuntimeError):
    """Guidance produced an unusable (non-finite) gradient."""

    def __init__(self, message: str, candidate_index: int | None = None):
        super().__init__(message)
        self.candidate_index = candidate_index


class ObjectiveContractError(ValueError):
    """Inputs to an objective violate its preconditions."""


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 0.5
    w_b: float = 1.0
    w_ar: float = 1.0
    w_a: float = 2.0
    d_buffer: float = 0.25
    env_margin: float = 0.25
    adv_threshold_mode: str = "reach"
    adv_reach: float = 15.0

    def __post_init__(self):
        for name in ("scale", "w_b", "w_ar", "w_a", "d_buffer", "env_margin", "adv_reach"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"GuidanceConfig.{name} must be finite and >= 0, got {v}")
        if self.adv_threshold_mode not in THRESHOLD_MODES:
            raise InvalidInputError(f"adv_threshold_mode must be one of {THRESHOLD_MODES}")

    def with_scale(self, scale: float) -> "GuidanceConfig":
        return replace(self, scale=scale)

    def adv_threshold(self, r_adv: float, r_ego: float) -> float:
        p = r_adv + r_ego
        if self.adv_threshold_mode == "buffered":
            return p + self.d_buffer
        if self.adv_threshold_mode == "reach":
            return p + self.adv_reach
        return p


@dataclass(frozen=True)
class ObjectiveBreakdown:
    j_br: float
    j_ar: float
    j_adv: float
    j_total: float

    def as_dict(self) -> dict:
        return {"j_br": self.j_br, "j_ar": self.j_ar, "j_adv": self.j_adv, "j_total": self.j_total}


def guided_noise(eps_hat, gradients, s: float) -> np.ndarray:
    """Perturbed noise ``eps_hat - s * gradients``."""
    return np.asarray(eps_hat) - s * np.asarray(gradients)


# --------------------------------------------------------------------------
# penalties on plain arrays


def veh_coll_penalty(d, p):
    """``1 - d/p`` inside the threshold disc, 0 outside."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr <= 0):
        raise InvalidInputError("collision threshold p must be positive")
    d = np.asarray(d, dtype=np.float64)
    out = np.where(d <= p_arr, 1.0 - d / p_arr, 0.0)
    return float(out) if out.ndim == 0 else out


def env_coll_penalty(track, scene_map: SceneMap, p_i: float) -> np.ndarray:
    """Per-step road-edge penalty for a track of states or positions ``(T, >=2)``."""
    if p_i <= 0:
        raise InvalidInputError("env threshold p_i must be positive")
    pos = _positions(track)
    d = np.maximum(0.0, scene_map.query(pos))
    return np.where(d <= p_i, 1.0 - d / p_i, 0.0)


def adv_objective(adv_track, ego_track, p: float) -> float:
    """``sum_t min(0, |adv(t) - ego(t)| - p)``."""
    if p <= 0:
        raise InvalidInputError("adversarial threshold p must be positive")
    a, e = _positions(adv_track), _positions(ego_track)
    if a.shape != e.shape:
        raise ObjectiveContractError(f"track lengths differ: {len(a)} vs {len(e)}")
    dx = a[:, 0] - e[:, 0]
    dy = a[:, 1] - e[:, 1]
    d = np.sqrt(dx * dx + dy * dy)
    return math.fsum(np.minimum(0.0, d - p).tolist())


def _positions(track) -> np.ndarray:
    if hasattr(track, "positions"):
        track = track.positions
    arr = np.asarray(track, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ObjectiveContractError(f"expected a (T, >=2) track, got shape {arr.shape}")
    return arr[:, :2]


@dataclass(frozen=True)
class RoleLayout:
    """Index sets derived from agent roles and sizes."""

    ego: int
    adv: int
    br_pairs: np.ndarray  # (P, 2)
    ar_pairs: np.ndarray  # (Q, 2), first column is the adversary
    br_env: np.ndarray  # agents whose map penalty enters J_br
    p_br: np.ndarray
    p_ar: np.ndarray
    p_env_br: np.ndarray
    p_env_adv: float
    p_adv: float

    @classmethod
    def build(cls, roles: Sequence[str], radii, widths, config: GuidanceConfig) -> "RoleLayout":
        roles = list(roles)
        if roles.count("ego") != 1:
            raise ObjectiveContractError("exactly one ego is required")
        if roles.count("adversary") != 1:
            raise ObjectiveContractError("exactly one adversary is required")
        radii = [float(r) for r in radii]
        widths = [float(w) for w in widths]
        if len(radii) != len(roles) or len(widths) != len(roles):
            raise ObjectiveContractError("radii/widths must match the number of agents")
        ego, adv = roles.index("ego"), roles.index("adversary")
        non_adv = [i for i in range(len(roles)) if i != adv]
        others = [i for i in non_adv if i != ego]
        br = [(i, j) for a, i in enumerate(non_adv) for j in non_adv[a + 1 :]]
        ar = [(adv, j) for j in others]
        br_arr = np.array(br, dtype=np.intp).reshape(-1, 2)
        ar_arr = np.array(ar, dtype=np.intp).reshape(-1, 2)
        return cls(
            ego=ego,
            adv=adv,
            br_pairs=br_arr,
            ar_pairs=ar_arr,
            br_env=np.array(non_adv, dtype=np.intp),
            p_br=np.array([radii[i] + radii[j] + config.d_buffer for i, j in br], dtype=np.float64),
            p_ar=np.array([radii[i] + radii[j] + config.d_buffer for i, j in ar], dtype=np.float64),
            p_env_br=np.array([0.5 * widths[i] + config.env_margin for i in non_adv], dtype=np.float64),
            p_env_adv=0.5 * widths[adv] + config.env_margin,
            p_adv=config.adv_threshold(radii[adv], radii[ego]),
        )


def _pair_terms(pos: np.ndarray, pairs: np.ndarray, p: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros(0)
    dx = pos[pairs[:, 0], :, 0] - pos[pairs[:, 1], :, 0]
    dy = pos[pairs[:, 0], :, 1] - pos[pairs[:, 1], :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    pp = p[:, None]
    return np.where(d <= pp, 1.0 - d / pp, 0.0).ravel()


def _env_terms(pos: np.ndarray, agents, p, scene_map: SceneMap) -> np.ndarray:
    d = np.maximum(0.0, scene_map.query(pos[agents]))
    pp = np.asarray(p, dtype=np.float64).reshape(-1, 1)
    return np.where(d <= pp, 1.0 - d / pp, 0.0).ravel()


def composite_objective(
    trajectories,
    roles: Sequence[str],
    radii,
    widths,
    scene_map: SceneMap,
    config: GuidanceConfig | None = None,
) -> ObjectiveBreakdown:
    """Exact objective breakdown for future tracks ``(N, T, >=2)`` of all agents.

    The ego row holds the ego's predicted future; ``roles`` must name exactly
    one ego and one adversary.
    """
    cfg = config or GuidanceConfig()
    pos = np.asarray(trajectories, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[2] < 2 or pos.shape[0] != len(roles):
        raise ObjectiveContractError(f"trajectories must be (N, T, >=2) with N = {len(roles)}, got {pos.shape}")
    pos = pos[:, :, :2]
    lay = RoleLayout.build(roles, radii, widths, cfg)
    j_br = math.fsum(
        _pair_terms(pos, lay.br_pairs, lay.p_br).tolist() + _env_terms(pos, lay.br_env, lay.p_env_br, scene_map).tolist()
    )
    j_ar = math.fsum(
        _pair_terms(pos, lay.ar_pairs, lay.p_ar).tolist() + _env_terms(pos, [lay.adv], [lay.p_env_adv], scene_map).tolist()
    )
    j_adv = adv_objective(pos[lay.adv], pos[lay.ego], lay.p_adv)
    total = math.fsum([cfg.w_b * j_br, cfg.w_ar * j_ar, cfg.w_a * j_adv])
    return ObjectiveBreakdown(j_br, j_ar, j_adv, total)


def scenario_objective(scenario: Scenario, ego_future: np.ndarray | None = None, config: GuidanceConfig | None = None) -> ObjectiveBreakdown:
    """Objective of a scenario's stored futures; the ego row may be replaced by a plan."""
    rows = []
    for a in scenario.agents:
        if a.role == "ego" and ego_future is not None:
            rows.append(np.asarray(ego_future)[:, :2])
        elif a.future is None:
            raise ObjectiveContractError(f"agent {a.id} has no future")
        else:
            rows.append(a.future[:, :2])
    return composite_objective(
        np.stack(rows),
        [a.role for a in scenario.agents],
        [a.radius for a in scenario.agents],
        [a.width for a in scenario.agents],
        scenario.map,
        config,
    )


# --------------------------------------------------------------------------
# differentiable path


def objective_nodes(X, Y, lay: RoleLayout, maps: MapStack, map_index: int = 0):
    """Per-candidate ``(j_br, j_ar, j_adv)`` nodes of shape ``(M,)`` from positions ``(M, N, T)``."""
    X, Y = ad.as_node(X), ad.as_node(Y)
    M, _, T = X.shape

    def pair_sum(pairs, p):
        if len(pairs) == 0:
            return ad.as_node(np.zeros(M))
        dx = ad.take(X, pairs[:, 0], axis=1) - ad.take(X, pairs[:, 1], axis=1)
        dy = ad.take(Y, pairs[:, 0], axis=1) - ad.take(Y, pairs[:, 1], axis=1)
        d = ad.sqrt(dx * dx + dy * dy)
        pen = ad.relu(1.0 - d / p[None, :, None])
        return ad.sum(ad.sum(pen, axis=2), axis=1)

    def env_sum(agents, p):
        px, py = ad.take(X, agents, axis=1), ad.take(Y, agents, axis=1)
        sdf = maps.query_nodes(np.full(px.shape, map_index, dtype=np.intp), px, py)
        d = ad.relu(sdf)
        pen = ad.relu(1.0 - d / np.asarray(p, dtype=np.float64)[None, :, None])
        return ad.sum(ad.sum(pen, axis=2), axis=1)

    j_br = pair_sum(lay.br_pairs, lay.p_br) + env_sum(lay.br_env, lay.p_env_br)
    j_ar = pair_sum(lay.ar_pairs, lay.p_ar) + env_sum(np.array([lay.adv]), [lay.p_env_adv])
    adx = X[:, lay.adv, :] - X[:, lay.ego, :]
    ady = Y[:, lay.adv, :] - Y[:, lay.ego, :]
    d_adv = ad.sqrt(adx * adx + ady * ady)
    j_adv = -ad.sum(ad.relu(lay.p_adv - d_adv), axis=1)
    return j_br, j_ar, j_adv


# --------------------------------------------------------------------------
# routed gradients through the decoder


class GuidanceContext:
    """Everything fixed during one scene's guided sampling.

    Holds the decoder batch for ``n_candidates`` copies of the scene, the
    prior conditioning, the frozen ego prediction and the role layout. The
    objective sees generated agents first (in scenario order) and the ego
    last.
    """

    def __init__(
        self,
        scenario: Scenario,
        vae_params,
        config: GuidanceConfig | None = None,
        ego_prediction: np.ndarray | None = None,
        n_candidates: int = 1,
        z_mean: np.ndarray | None = None,
        z_std: np.ndarray | None = None,
        conditioning: np.ndarray | None = None,
    ):
        from . import vae
        from .planner import plan_ego

        self.config = config or GuidanceConfig()
        if scenario.adversary_index is None:
            raise ObjectiveContractError("guidance needs a scenario with an adversary role")
        self.scenario = scenario
        self.vae_params = vae_params
        hyper = vae_params.hyper
        self.M = int(n_candidates)
        gen = scenario.non_ego_indices
        self.n = len(gen)
        self.adv_row = gen.index(scenario.adversary_index)
        self.batch = vae.build_batch([scenario] * self.M, hyper)
        self.P = vae.nn.bind(vae_params.arrays, None)
        if conditioning is None:
            conditioning = vae.encode_prior([scenario], vae_params)[0]
        self.cond = np.tile(np.asarray(conditioning), (self.M, 1))
        self.ego_prediction = plan_ego(scenario) if ego_prediction is None else np.asarray(ego_prediction, dtype=np.float64)
        d = hyper.latent_dim
        self.z_mean = np.zeros(d) if z_mean is None else np.asarray(z_mean)
        self.z_std = np.ones(d) if z_std is None else np.asarray(z_std)
        agents = [scenario.agents[i] for i in gen] + [scenario.ego]
        self.roles = [a.role for a in agents]
        self.layout = RoleLayout.build(self.roles, [a.radius for a in agents], [a.width for a in agents], self.config)
        self.maps = MapStack([scenario.map])
        T = scenario.t_future
        self._ego_x = np.broadcast_to(self.ego_prediction[:, 0], (self.M, 1, T))
        self._ego_y = np.broadcast_to(self.ego_prediction[:, 1], (self.M, 1, T))

    def _objective(self, zn):
        from . import vae

        M, n, d = self.M, self.n, zn.shape[-1]
        z = ad.reshape(zn, (M * n, d)) * self.z_std + self.z_mean
        x, y, _, _ = vae.decode_nodes(self.P, z, self.cond, self.batch, self.vae_params.hyper)
        T = x.shape[1]
        X = ad.concat([ad.reshape(x, (M, n, T)), self._ego_x], axis=1)
        Y = ad.concat([ad.reshape(y, (M, n, T)), self._ego_y], axis=1)
        return objective_nodes(X, Y, self.layout, self.maps)

    def cost(self, zn):
        """Weighted total cost summed over candidates, as a node of ``zn``."""
        cfg = self.config
        j_br, j_ar, j_adv = self._objective(ad.as_node(zn))
        return ad.sum(j_br) * cfg.w_b + ad.sum(j_ar) * cfg.w_ar + ad.sum(j_adv) * cfg.w_a

    def evaluate(self, z_norm: np.ndarray) -> np.ndarray:
        """Per-candidate ``(j_br, j_ar, j_adv)`` rows for normalized latents ``(M, n, d_z)``."""
        j_br, j_ar, j_adv = self._objective(ad.as_node(np.asarray(z_norm, dtype=np.float64)))
        return np.stack([j_br.value, j_ar.value, j_adv.value], axis=1)

    def gradient(self, z_norm: np.ndarray) -> np.ndarray:
        """Routed gradient of the cost w.r.t. normalized latents ``(M, n, d_z)``.

        Non-adversarial rows receive the gradient of ``w_b J_br`` only; the
        adversary row receives the gradient of ``w_ar J_ar + w_a J_adv`` only.
        """
        cfg = self.config
        z_norm = np.asarray(z_norm, dtype=np.float64)
        if z_norm.shape[:2] != (self.M, self.n):
            raise ObjectiveContractError(f"expected latents of shape ({self.M}, {self.n}, d), got {z_norm.shape}")
        with ad.Tape() as tape:
            zn = tape.variable(z_norm)
            j_br, j_ar, j_adv = self._objective(zn)
            background = ad.sum(j_br) * cfg.w_b
            adversarial = ad.sum(j_ar) * cfg.w_ar + ad.sum(j_adv) * cfg.w_a
        grad = tape.backward(background)[zn]
        grad[:, self.adv_row] = tape.backward(adversarial)[zn][:, self.adv_row]
        bad = ~np.all(np.isfinite(grad.reshape(self.M, -1)), axis=1)
        if np.any(bad):
            raise GuidanceError("non-finite guidance gradient", int(np.argmax(bad)))
        return grad

    def hook(self, z0_hat: np.ndarray, z_k: np.ndarray, k: int) -> np.ndarray:
        """Sampler hook: the cost gradient evaluated at the clean-latent estimate."""
        try:
            return self.gradient(z0_hat)
        except GuidanceError as exc:
            from .diffusion import GuidanceHookError

            raise GuidanceHookError(str(exc), exc.candidate_index) from exc


def guidance_gradient(z, scenario: Scenario, vae_params, ego_prediction=None, config: GuidanceConfig | None = None) -> np.ndarray:
    """Routed cost gradient ``(n_non_ego, d_z)`` for one latent set in VAE scale."""
    z = np.asarray(z, dtype=np.float64)
    ctx = GuidanceContext(scenario, vae_params, config, ego_prediction, n_candidates=1)
    return ctx.gradient(z[None])[0]

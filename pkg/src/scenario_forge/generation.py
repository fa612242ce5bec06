"""End-to-end scene generation: sample M candidates, score them, pick one."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffusion, vae
from .guidance import GuidanceConfig, GuidanceContext, ObjectiveBreakdown, composite_objective
from .planner import PlannerConfig, plan_ego
from .scene import Scenario, select_adversary
from .selection import CandidateScore, FeasibilityLimits, SelectionConfig, feasibility, score_candidate, select_best


@dataclass
class GenerationResult:
    scenario: Scenario  # input scene with the adversary role assigned
    latents: np.ndarray  # (M, n, d_z) in VAE scale
    futures: np.ndarray  # (M, n, T, 4) decoded non-ego futures
    breakdowns: list
    scores: list
    selected: int
    ego_prediction: np.ndarray
    elapsed: float = 0.0
    meta: dict = field(default_factory=dict)

    def candidate_futures(self, m: int) -> dict:
        gen = self.scenario.non_ego_indices
        return {self.scenario.agents[i].id: self.futures[m, r] for r, i in enumerate(gen)}

    def candidate_scenario(self, m: int) -> Scenario:
        return self.scenario.with_futures(self.candidate_futures(m))

    @property
    def selected_scenario(self) -> Scenario:
        return self.candidate_scenario(self.selected)


def prepare_scenario(scenario: Scenario) -> Scenario:
    """Assign the adversary role (closest eligible agent) unless one exists."""
    if scenario.adversary_index is not None:
        return scenario
    return scenario.with_adversary(select_adversary(scenario))


def score_candidates(
    scenario: Scenario,
    futures: np.ndarray,
    ego_prediction: np.ndarray,
    guidance: GuidanceConfig,
    selection: SelectionConfig,
    limits: FeasibilityLimits,
) -> tuple[list[ObjectiveBreakdown], list[CandidateScore]]:
    gen = scenario.non_ego_indices
    agents = [scenario.agents[i] for i in gen] + [scenario.ego]
    roles = [a.role for a in agents]
    radii = [a.radius for a in agents]
    widths = [a.width for a in agents]
    init = np.array([a.current for a in agents[:-1]])
    breakdowns, scores = [], []
    for m, fut in enumerate(futures):
        traj = np.concatenate([fut[:, :, :2], ego_prediction[None, :, :2]], axis=0)
        b = composite_objective(traj, roles, radii, widths, scenario.map, guidance)
        phi = feasibility(fut, limits, scenario.dt, initial=init)
        breakdowns.append(b)
        scores.append(CandidateScore(m, b.j_total, phi, score_candidate(b.j_total, phi, selection), b.j_br, b.j_ar, b.j_adv))
    return breakdowns, scores


def generate(
    scenario: Scenario,
    vae_params: vae.VaeParams,
    ldm_params: diffusion.DenoiserParams,
    guidance: GuidanceConfig | None = None,
    selection: SelectionConfig | None = None,
    limits: FeasibilityLimits | None = None,
    n_samples: int = 10,
    ddim_steps: int = 20,
    seed: int = 0,
    planner: PlannerConfig | None = None,
) -> GenerationResult:
    """Guided (``guidance.scale > 0``) or unguided generation of ``n_samples`` candidates."""
    t0 = time.perf_counter()
    guidance = guidance or GuidanceConfig()
    selection = selection or SelectionConfig()
    limits = limits or FeasibilityLimits()
    sc = prepare_scenario(scenario)
    cond = vae.encode_prior([sc], vae_params)[0]
    ego_pred = plan_ego(sc, planner)
    ctx = GuidanceContext(sc, vae_params, guidance, ego_pred, n_samples, ldm_params.z_mean, ldm_params.z_std, cond)
    edges = vae.latent_pair_features(sc) if ldm_params.hyper.edge_dim else None
    zn = diffusion.sample_normalized(ldm_params, cond, n_samples, seed, ddim_steps, ctx.hook, guidance.scale, edge_feat=edges)
    z = ldm_params.denormalize(zn)
    M, n, d = z.shape
    x = vae.decode_nodes(ctx.P, z.reshape(M * n, d), ctx.cond, ctx.batch, vae_params.hyper)
    futures = vae._as_states(*x).reshape(M, n, sc.t_future, 4)
    breakdowns, scores = score_candidates(sc, futures, ego_pred, guidance, selection, limits)
    selected = select_best(scores)
    return GenerationResult(sc, z, futures, breakdowns, scores, selected, ego_pred, time.perf_counter() - t0)


def generate_many(scenarios: Sequence[Scenario], *args, seed: int = 0, **kwargs) -> list[GenerationResult]:
    """Per-scene generation with seeds ``seed + 1000 * scene_index``."""
    return [generate(sc, *args, seed=seed + 1000 * i, **kwargs) for i, sc in enumerate(scenarios)]


def encode_corpus(scenarios: Sequence[Scenario], vae_params: vae.VaeParams, batch_size: int = 64) -> diffusion.LatentDataset:
    """Posterior statistics and prior conditioning for every scene (frozen VAE)."""
    means, log_stds, conds, edges = [], [], [], []
    for b0 in range(0, len(scenarios), batch_size):
        chunk = list(scenarios[b0 : b0 + batch_size])
        post = vae.encode_posterior(chunk, vae_params)
        means += [p.mean for p in post]
        log_stds += [p.log_std for p in post]
        conds += vae.encode_prior(chunk, vae_params)
        edges += [vae.latent_pair_features(sc) for sc in chunk]
    return diffusion.LatentDataset(means, log_stds, conds, edges)

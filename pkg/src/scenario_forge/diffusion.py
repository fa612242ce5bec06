"""Latent diffusion: noise schedule, forward noising, denoiser and DDIM sampling.

Step indices are 0-based: ``alpha_cum[k]`` is the cumulative signal level after
``k + 1`` noising steps. The clean endpoint of the reverse chain is the
sentinel ``k_prev = CLEAN`` (-1), for which the cumulative level is 1.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import nn
from .guidance import guided_noise
from .scene import InvalidInputError

logger = logging.getLogger(__name__)

CLEAN = -1


class ContractError(ValueError):
    """A call violated a documented precondition."""


class DenoiserTrainingError(RuntimeError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class GuidanceHookError(RuntimeError):
    """Guidance failed for a specific candidate."""

    def __init__(self, message: str, candidate_index: int | None = None):
        super().__init__(message)
        self.candidate_index = candidate_index


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_cum: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    def alpha(self, k: int) -> float:
        """Cumulative signal level at step ``k`` (1 at the clean endpoint)."""
        if k == CLEAN or k is None:
            return 1.0
        if not 0 <= k < self.K:
            raise ContractError(f"step {k} outside [0, {self.K})")
        return float(self.alpha_cum[k])


def build_schedule(K: int = 100, beta_start: float = 1e-4, beta_end: float = 5e-2) -> NoiseSchedule:
    """Linear beta schedule and its cumulative product."""
    if int(K) != K or K < 1:
        raise InvalidInputError(f"K must be a positive integer, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidInputError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(K)) if K > 1 else np.array([float(beta_start)])
    return NoiseSchedule(beta=beta, alpha_cum=np.cumprod(1.0 - beta))


def forward_noise(z0, k: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form ``z^k = sqrt(a_k) z0 + sqrt(1 - a_k) eps``; ``k`` may be an array of steps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ContractError(f"eps shape {eps.shape} differs from z0 shape {z0.shape}")
    if np.ndim(k) == 0:
        a = schedule.alpha(int(k))
    else:
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= schedule.K):
            raise ContractError("step index out of range")
        a = schedule.alpha_cum[k].reshape(k.shape + (1,) * (z0.ndim - k.ndim))
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def predict_clean(z_k, eps_hat, k: int, schedule: NoiseSchedule) -> np.ndarray:
    """Clean-latent estimate ``(z_k - sqrt(1 - a_k) eps_hat) / sqrt(a_k)``."""
    a = schedule.alpha(k)
    return (np.asarray(z_k) - math.sqrt(1.0 - a) * np.asarray(eps_hat)) / math.sqrt(a)


def ddim_step(z_k, eps_hat, k: int, k_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from step ``k`` to ``k_prev`` (``CLEAN`` for the endpoint)."""
    if k_prev is None:
        k_prev = CLEAN
    if k_prev >= k:
        raise ContractError(f"k_prev ({k_prev}) must be smaller than k ({k})")
    z0_hat = predict_clean(z_k, eps_hat, k, schedule)
    if k_prev == CLEAN:
        return z0_hat
    a_prev = schedule.alpha(k_prev)
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * np.asarray(eps_hat)


def ddim_timesteps(K: int, steps: int) -> list[int]:
    """Visited steps: ``K-1, K-1-stride, ...`` (``steps`` values); the chain then ends at ``CLEAN``."""
    if not 1 <= steps <= K:
        raise ContractError(f"ddim steps must lie in [1, {K}], got {steps}")
    stride = K // steps
    return [K - 1 - stride * i for i in range(steps)]


# --------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserHyper:
    latent_dim: int = 32
    cond_dim: int = 64
    hidden_dim: int = 128
    time_dim: int = 32
    K: int = 100
    beta_start: float = 1e-4
    beta_end: float = 5e-2
    edge_dim: int = 0
    active_kl: float = 0.02  # mean posterior KL (nats) above which a latent dimension is modelled by the network


@dataclass
class DenoiserParams:
    """Denoiser weights plus the latent normalization and the active-dimension index."""

    hyper: DenoiserHyper
    arrays: "OrderedDict[str, np.ndarray]"
    z_mean: np.ndarray
    z_std: np.ndarray
    active: np.ndarray | None = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.arange(self.hyper.latent_dim)
        self.active = np.asarray(self.active, dtype=np.intp)

    @property
    def schedule(self) -> NoiseSchedule:
        h = self.hyper
        return build_schedule(h.K, h.beta_start, h.beta_end)

    def normalize(self, z):
        return (np.asarray(z) - self.z_mean) / self.z_std

    def denormalize(self, zn):
        return np.asarray(zn) * self.z_std + self.z_mean

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.hyper, OrderedDict((k, v.copy()) for k, v in self.arrays.items()), self.z_mean.copy(), self.z_std.copy(), self.active.copy()
        )


def active_dimensions(log_stds: Sequence[np.ndarray] | None, means: Sequence[np.ndarray], threshold: float) -> np.ndarray:
    """Latent dimensions whose mean posterior KL to N(0, I) exceeds ``threshold``.

    Without posterior scales every dimension counts as active. At least one
    dimension (the most informative) is always returned.
    """
    d = means[0].shape[1]
    if log_stds is None:
        return np.arange(d)
    m = np.concatenate(means)
    ls = np.concatenate(log_stds)
    kl = 0.5 * (np.exp(2 * ls) + m * m - 1.0 - 2.0 * ls).mean(axis=0)
    active = np.flatnonzero(kl > threshold)
    return active if len(active) else np.array([int(np.argmax(kl))])


def init_denoiser(hyper: DenoiserHyper, seed: int = 0, n_active: int | None = None) -> "OrderedDict[str, np.ndarray]":
    rng = np.random.default_rng(seed)
    H = hyper.hidden_dim
    A = hyper.latent_dim if n_active is None else int(n_active)
    P: OrderedDict = OrderedDict()
    nn.init_linear(P, rng, "den.in", A + hyper.cond_dim + hyper.time_dim, H)
    nn.init_mlp(P, rng, "den.msg", [2 * H + hyper.edge_dim, H, H])
    nn.init_linear(P, rng, "den.res0", 2 * H, H, gain=0.5)
    nn.init_linear(P, rng, "den.res1", H, H, gain=0.5)
    nn.init_linear(P, rng, "den.res2", H, H, gain=0.5)
    nn.init_linear(P, rng, "den.out", H, A, gain=0.0)
    P["den.skip"] = np.zeros(hyper.latent_dim)
    return P


@dataclass
class AgentGraph:
    """Agents grouped into scenes; messages flow only within a group.

    Edges are ordered destination-major within each scene: ``(i, j)`` for
    ``i != j`` in row-major order. ``edge_feat`` rows follow the same order.
    """

    n_rows: int
    src: np.ndarray
    dst: np.ndarray
    inv_degree: np.ndarray
    edge_feat: np.ndarray | None = None

    @classmethod
    def from_counts(cls, counts: Sequence[int], edge_feat: np.ndarray | None = None) -> "AgentGraph":
        src, dst = [], []
        row = 0
        for n in counts:
            idx = np.arange(row, row + n)
            if n > 1:
                a, b = np.meshgrid(idx, idx, indexing="ij")
                mask = a != b
                dst.append(a[mask])
                src.append(b[mask])
            row += n
        src = np.concatenate(src) if src else np.zeros(0, dtype=np.intp)
        dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.intp)
        deg = np.bincount(dst, minlength=row).astype(np.float64)
        if edge_feat is not None:
            edge_feat = np.asarray(edge_feat, dtype=np.float64)
            if edge_feat.shape[0] != len(src):
                raise ContractError(f"expected {len(src)} edge feature rows, got {edge_feat.shape[0]}")
        return cls(row, src.astype(np.intp), dst.astype(np.intp), (1.0 / np.maximum(deg, 1.0))[:, None], edge_feat)


def _selector(active: np.ndarray, d: int) -> np.ndarray:
    S = np.zeros((len(active), d))
    S[np.arange(len(active)), active] = 1.0
    return S


def denoiser_nodes(
    P: dict, z_k, k_rows: np.ndarray, cond, graph: AgentGraph, hyper: DenoiserHyper, active: np.ndarray, sigma_rows: np.ndarray
) -> ad.Node:
    """Noise prediction ``eps_theta(z_k, k, c)`` with one cross-agent message round.

    The output is a learned per-dimension Gaussian skip ``g * sigma_k * z_k``
    (the exact noise estimate for standard-normal data when ``g = 1``) plus a
    network correction on the ``active`` dimensions. ``sigma_rows`` holds
    ``sqrt(1 - alpha_cum[k])`` for every row.
    """
    S = _selector(active, hyper.latent_dim)
    z = ad.as_node(z_k)
    temb = nn.sinusoidal_embedding(k_rows, hyper.time_dim, max_period=float(hyper.K))
    parts = [ad.matmul(z, S.T)]
    if hyper.cond_dim:
        parts.append(ad.as_node(cond))
    parts.append(ad.as_node(temb))
    h = ad.relu(nn.linear(ad.concat(parts, axis=1), P, "den.in"))
    if len(graph.src):
        msg_in = [ad.take(h, graph.dst), ad.take(h, graph.src)]
        if hyper.edge_dim:
            if graph.edge_feat is None or graph.edge_feat.shape[1] != hyper.edge_dim:
                raise ContractError(f"denoiser expects {hyper.edge_dim} edge features per agent pair")
            msg_in.append(ad.as_node(graph.edge_feat))
        msg = nn.mlp(ad.concat(msg_in, axis=1), P, "den.msg", 2)
        agg = ad.segment_sum(msg, graph.dst, graph.n_rows) * graph.inv_degree
    else:
        agg = ad.as_node(np.zeros(h.shape))
    h = h + ad.relu(nn.linear(ad.concat([h, agg], axis=1), P, "den.res0"))
    h = h + ad.relu(nn.linear(h, P, "den.res1"))
    h = h + ad.relu(nn.linear(h, P, "den.res2"))
    skip = z * np.asarray(sigma_rows, dtype=np.float64).reshape(-1, 1) * P["den.skip"]
    return skip + ad.matmul(nn.linear(h, P, "den.out"), S)


def predict_noise(params: DenoiserParams, z_k: np.ndarray, k: int | np.ndarray, cond: np.ndarray | None, graph: AgentGraph) -> np.ndarray:
    """Inference-mode denoiser on normalized latents."""
    k_rows = np.broadcast_to(np.asarray(k), (z_k.shape[0],)).astype(np.intp)
    sigma = np.sqrt(1.0 - params.schedule.alpha_cum[k_rows])
    P = nn.bind(params.arrays, None)
    return np.asarray(denoiser_nodes(P, z_k, k_rows.astype(np.float64), cond, graph, params.hyper, params.active, sigma).value)


@dataclass
class LatentDataset:
    """Per-scene latent statistics: posterior means/log-stds, conditioning and pair features."""

    means: list
    log_stds: list | None
    conds: list | None
    edges: list | None = None

    @property
    def counts(self) -> list[int]:
        return [len(m) for m in self.means]


def train_denoiser(
    data: LatentDataset,
    hyper: DenoiserHyper,
    *,
    epochs: int = 200,
    batch_size: int = 32,
    learning_rate: float = 5e-4,
    grad_clip: float = 10.0,
    seed: int = 0,
    params: DenoiserParams | None = None,
    optimizer: nn.Adam | None = None,
    start_epoch: int = 0,
    callback: Callable | None = None,
) -> tuple[DenoiserParams, list[dict], nn.Adam]:
    """Minimise the per-scene summed squared noise-prediction error.

    Each batch draws ``z0`` from the stored posteriors, one step index per
    scene uniformly over the schedule and ``eps ~ N(0, I)``.
    """
    n = len(data.means)
    if n == 0:
        raise InvalidInputError("empty latent dataset")
    all_means = np.concatenate(data.means)
    if params is None:
        if data.log_stds is not None:
            var = np.concatenate([np.exp(2 * s) for s in data.log_stds]).mean(axis=0)
        else:
            var = 0.0
        z_mean = all_means.mean(axis=0)
        z_std = np.sqrt(all_means.var(axis=0) + var)
        z_std = np.where(z_std > 1e-6, z_std, 1.0)
        active = active_dimensions(data.log_stds, data.means, hyper.active_kl)
        params = DenoiserParams(hyper, init_denoiser(hyper, seed, len(active)), z_mean, z_std, active)
    opt = optimizer or nn.Adam(learning_rate)
    schedule = params.schedule
    history: list[dict] = []
    last_good = params.copy()
    counts = data.counts
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        lr = learning_rate * (0.5 * (1.0 + math.cos(math.pi * epoch / epochs)) * 0.9 + 0.1)
        total, nb = 0.0, 0
        for b0 in range(0, n, batch_size):
            idx = order[b0 : b0 + batch_size]
            bc = [counts[i] for i in idx]
            mean = np.concatenate([data.means[i] for i in idx])
            if data.log_stds is not None:
                z0 = mean + np.exp(np.concatenate([data.log_stds[i] for i in idx])) * rng.standard_normal(mean.shape)
            else:
                z0 = mean
            z0 = params.normalize(z0)
            k_scene = rng.integers(0, schedule.K, size=len(idx))
            k_rows = np.repeat(k_scene, bc)
            eps = rng.standard_normal(z0.shape)
            z_k = forward_noise(z0, k_rows, eps, schedule)
            cond = np.concatenate([data.conds[i] for i in idx]) if data.conds is not None else None
            edges = np.concatenate([data.edges[i] for i in idx]) if data.edges is not None else None
            graph = AgentGraph.from_counts(bc, edges)
            with ad.Tape() as tape:
                P = nn.bind(params.arrays, tape)
                sigma = np.sqrt(1.0 - schedule.alpha_cum[k_rows])
                pred = denoiser_nodes(P, z_k, k_rows.astype(np.float64), cond, graph, hyper, params.active, sigma)
                diff = pred - eps
                loss = ad.sum(diff * diff) * (1.0 / len(idx))
            value = float(loss.value)
            if not math.isfinite(value):
                raise DenoiserTrainingError(f"non-finite denoiser loss at epoch {epoch}", last_good)
            g = tape.backward(loss)
            grads = {k: g[P[k]] for k in params.arrays}
            nn.clip_by_global_norm(grads, grad_clip)
            opt.step(params.arrays, grads, lr)
            total += value
            nb += 1
        rec = {"epoch": epoch + 1, "loss": total / max(nb, 1)}
        history.append(rec)
        last_good = params.copy()
        logger.info("ldm epoch %d loss %.4f", epoch + 1, rec["loss"])
        if callback is not None:
            callback(rec, params, opt)
    return params, history, opt


# --------------------------------------------------------------------------
# sampling

GuidanceHook = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def initial_noise(seed: int, n_candidates: int, n_agents: int, latent_dim: int) -> np.ndarray:
    """``z^K`` for every candidate; candidate ``m`` uses the stream ``seed + m``."""
    return np.stack([np.random.default_rng(seed + m).standard_normal((n_agents, latent_dim)) for m in range(n_candidates)])


def sample_normalized(
    params: DenoiserParams,
    cond: np.ndarray | None,
    n_candidates: int,
    seed: int,
    ddim_steps: int = 20,
    guidance: GuidanceHook | None = None,
    scale: float = 0.0,
    n_agents: int | None = None,
    edge_feat: np.ndarray | None = None,
) -> np.ndarray:
    """DDIM chain for ``n_candidates`` copies of one scene; returns normalized clean latents ``(M, n, d_z)``.

    ``guidance(z0_hat, z_k, k)`` must return the gradient of the guidance cost
    w.r.t. the normalized latent ``(M, n, d_z)``. The predicted noise is
    perturbed so that the cost decreases; when the hook raises
    :class:`GuidanceHookError` the step falls back to the unguided noise.
    """
    hyper = params.hyper
    n = cond.shape[0] if cond is not None else int(n_agents)
    M = int(n_candidates)
    if M < 1:
        raise ContractError("sample count must be >= 1")
    schedule = params.schedule
    z = initial_noise(seed, M, n, hyper.latent_dim)
    graph = AgentGraph.from_counts([n] * M, None if edge_feat is None else np.tile(edge_feat, (M, 1)))
    cond_rows = np.tile(cond, (M, 1)) if cond is not None else None
    steps = ddim_timesteps(schedule.K, ddim_steps)
    for i, k in enumerate(steps):
        k_prev = steps[i + 1] if i + 1 < len(steps) else CLEAN
        eps = predict_noise(params, z.reshape(M * n, -1), k, cond_rows, graph).reshape(M, n, -1)
        if guidance is not None and scale != 0.0:
            try:
                grad = guidance(predict_clean(z, eps, k, schedule), z, k)
                if not np.all(np.isfinite(grad)):
                    raise GuidanceHookError("non-finite guidance gradient")
                # the hook returns the gradient of a cost; injecting its negative
                # makes the DDIM update descend the cost
                eps = guided_noise(eps, -grad, scale)
            except GuidanceHookError as exc:
                logger.warning("guidance failed at step %d (candidate %s): %s; using unguided noise", k, exc.candidate_index, exc)
        z = ddim_step(z, eps, k, k_prev, schedule)
    return z


def sample(
    params: DenoiserParams,
    cond: np.ndarray | None,
    n_candidates: int,
    seed: int,
    ddim_steps: int = 20,
    guidance: GuidanceHook | None = None,
    scale: float = 0.0,
    n_agents: int | None = None,
    edge_feat: np.ndarray | None = None,
) -> np.ndarray:
    """As :func:`sample_normalized` but returns latents in the VAE's scale."""
    return params.denormalize(sample_normalized(params, cond, n_candidates, seed, ddim_steps, guidance, scale, n_agents, edge_feat))


# --------------------------------------------------------------------------
# checkpoints


def save_params(path, params: DenoiserParams, extra: dict | None = None, optimizer: nn.Adam | None = None) -> None:
    hyper = asdict(params.hyper)
    header = {"kind": "latent_diffusion", "hyper": hyper, "config_hash": checkpoint.config_hash(hyper), **(extra or {})}
    arrays = OrderedDict(params.arrays)
    arrays["norm.mean"] = params.z_mean
    arrays["norm.std"] = params.z_std
    arrays["norm.active"] = params.active.astype(np.float64)
    if optimizer is not None:
        header["adam_t"] = optimizer.t
        arrays.update(optimizer.state_arrays())
    checkpoint.save(path, checkpoint.LDM_MAGIC, header, arrays)


def load_params(path, expect: DenoiserHyper | None = None) -> tuple[DenoiserParams, dict, dict]:
    header, arrays = checkpoint.load(path, checkpoint.LDM_MAGIC)
    hyper = DenoiserHyper(**header["hyper"])
    if checkpoint.config_hash(asdict(hyper)) != header.get("config_hash"):
        raise checkpoint.CheckpointError("denoiser checkpoint hash does not match its header")
    if expect is not None and asdict(expect) != asdict(hyper):
        raise checkpoint.CheckpointError(f"denoiser architecture mismatch: checkpoint {asdict(hyper)} vs requested {asdict(expect)}")
    model = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith(("adam.", "norm.")))
    if "norm.active" not in arrays:
        raise checkpoint.CheckpointError("denoiser checkpoint has no active-dimension index")
    active = arrays["norm.active"].astype(np.intp)
    for k, v in init_denoiser(hyper, n_active=len(active)).items():
        if k not in model or model[k].shape != v.shape:
            raise checkpoint.CheckpointError(f"denoiser checkpoint missing or misshapen array {k!r}")
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return DenoiserParams(hyper, model, arrays["norm.mean"], arrays["norm.std"], active), header, opt_arrays

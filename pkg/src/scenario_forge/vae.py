"""Graph VAE over multi-agent scenes.

* prior encoder: past states (ego frame) + local map probes, message passing
  over the fully connected agent graph -> conditioning ``c`` per non-ego agent;
* posterior encoder: same topology with future states appended -> Gaussian
  over the latent ``z`` per non-ego agent;
* decoder: a GRU that, at every future step, reads the agent's current state,
  map probes around it and ``z`` and emits ``(accel, yaw_rate)`` which the
  kinematic model integrates. Decoded tracks are feasible by construction.

The ego takes part in message passing but receives no latent.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import checkpoint
from . import nn
from .scene import MapStack, Scenario, step_nodes
from .validation import check_scenarios

logger = logging.getLogger(__name__)

PROBE_FORWARD = np.array([0.0, 5.0, 10.0, 15.0, 20.0])
PROBE_LATERAL = np.array([-3.0, 0.0, 3.0])
PROBE_FX = np.repeat(PROBE_FORWARD, len(PROBE_LATERAL))
PROBE_LY = np.tile(PROBE_LATERAL, len(PROBE_FORWARD))
N_PROBES = PROBE_FX.size
POS_SCALE = 20.0
SPEED_SCALE = 10.0
SDF_SCALE = 3.0
EDGE_DIM = 6


class TrainingError(RuntimeError):
    """Training diverged; ``last_good`` holds the last finite parameters."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class VaeHyper:
    latent_dim: int = 32
    cond_dim: int = 64
    hidden_dim: int = 128
    mp_rounds: int = 2
    t_hist: int = 4
    t_future: int = 12
    dt: float = 0.5
    max_accel: float = 6.0
    max_yaw_rate: float = 1.0


@dataclass
class VaeParams:
    hyper: VaeHyper
    arrays: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "VaeParams":
        return VaeParams(self.hyper, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, eps: np.ndarray) -> np.ndarray:
        return self.mean + np.exp(self.log_std) * eps


def kl_standard_normal(mean, log_std):
    """Closed-form KL(N(mean, exp(log_std)^2) || N(0, I)) summed over the last axis."""
    mean = np.asarray(mean)
    log_std = np.asarray(log_std)
    return 0.5 * np.sum(np.exp(2.0 * log_std) + mean * mean - 1.0 - 2.0 * log_std, axis=-1)


def init_params(hyper: VaeHyper, seed: int = 0) -> VaeParams:
    rng = np.random.default_rng(seed)
    H = hyper.hidden_dim
    P: OrderedDict = OrderedDict()
    prior_in = 5 * (hyper.t_hist + 1) + N_PROBES + 3
    post_in = prior_in + 5 * hyper.t_future + 1
    for name, fin, fout in (("prior", prior_in, hyper.cond_dim), ("post", post_in, 2 * hyper.latent_dim)):
        nn.init_mlp(P, rng, f"{name}.embed", [fin, H, H])
        for r in range(hyper.mp_rounds):
            nn.init_mlp(P, rng, f"{name}.msg{r}", [2 * H + EDGE_DIM, H, H])
            nn.init_mlp(P, rng, f"{name}.upd{r}", [2 * H, H, H], out_gain=0.5)
        nn.init_linear(P, rng, f"{name}.out", H, fout, gain=0.5)
    step_in = 5 + N_PROBES + 1 + hyper.latent_dim
    nn.init_linear(P, rng, "dec.h0", hyper.cond_dim + hyper.latent_dim, H)
    nn.init_gru(P, rng, "dec.gru", step_in, H)
    nn.init_mlp(P, rng, "dec.head", [H, 64, 2], out_gain=0.1)
    return VaeParams(hyper, P)


# --------------------------------------------------------------------------
# batching


def _rotate(dx, dy, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def pair_features(cur: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Pose of agent ``src`` in the frame of agent ``dst`` (one row per edge)."""
    if not len(src):
        return np.zeros((0, EDGE_DIM))
    rx, ry = _rotate(cur[src, 0] - cur[dst, 0], cur[src, 1] - cur[dst, 1], cur[dst, 2])
    dth = cur[src, 2] - cur[dst, 2]
    return np.stack(
        [rx / POS_SCALE, ry / POS_SCALE, np.cos(dth), np.sin(dth), cur[src, 3] / SPEED_SCALE, np.hypot(rx, ry) / POS_SCALE],
        axis=1,
    )


def latent_pair_features(scenario: Scenario) -> np.ndarray:
    """Pair features among the non-ego agents, destination-major (the latent graph's edge order)."""
    cur = np.array([scenario.agents[i].current for i in scenario.non_ego_indices])
    n = len(cur)
    dst, src = np.nonzero(~np.eye(n, dtype=bool))
    return pair_features(cur, src, dst)


def _state_features(states: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """``(x, y, cos, sin, v)`` of ``states (..., 4)`` expressed in ``frame (..., 3)``."""
    fx, fy, fth = frame[..., 0], frame[..., 1], frame[..., 2]
    x, y = _rotate(states[..., 0] - fx, states[..., 1] - fy, fth)
    dth = states[..., 2] - fth
    return np.stack([x / POS_SCALE, y / POS_SCALE, np.cos(dth), np.sin(dth), states[..., 3] / SPEED_SCALE], axis=-1)


def _probe_points(x, y, h):
    c, s = np.cos(h)[..., None], np.sin(h)[..., None]
    px = x[..., None] + c * PROBE_FX - s * PROBE_LY
    py = y[..., None] + s * PROBE_FX + c * PROBE_LY
    return px, py


_STACK_CACHE: "OrderedDict[tuple, MapStack]" = OrderedDict()


def map_stack(maps: Sequence) -> tuple[MapStack, np.ndarray]:
    """Deduplicated :class:`MapStack` plus the index of each input map."""
    uniq, index, seen = [], [], {}
    for m in maps:
        key = id(m)
        if key not in seen:
            seen[key] = len(uniq)
            uniq.append(m)
        index.append(seen[key])
    key = tuple(id(m) for m in uniq)
    stack = _STACK_CACHE.get(key)
    if stack is None or any(a is not b for a, b in zip(stack.maps, uniq)):
        stack = MapStack(uniq)
        _STACK_CACHE[key] = stack
        while len(_STACK_CACHE) > 16:
            _STACK_CACHE.popitem(last=False)
    return stack, np.asarray(index, dtype=np.intp)


@dataclass
class SceneBatch:
    """Several scenes flattened into one agent graph."""

    n_scenes: int
    scene_of: np.ndarray  # (A,)
    gen_rows: np.ndarray  # (G,) rows of non-ego agents
    gen_scene: np.ndarray  # (G,)
    gen_counts: list
    src: np.ndarray
    dst: np.ndarray
    inv_degree: np.ndarray  # (A, 1)
    edge_feat: np.ndarray
    node_prior: np.ndarray
    node_post: np.ndarray | None
    init_state: np.ndarray  # (G, 4)
    future: np.ndarray | None  # (G, T, 4)
    maps: MapStack
    gen_map: np.ndarray  # (G,)
    t_future: int
    dt: float
    extras: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.scene_of)

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return np.split(arr, np.cumsum(self.gen_counts)[:-1])


def build_batch(scenarios: Sequence[Scenario], hyper: VaeHyper, need_future: bool = False) -> SceneBatch:
    scene_of, gen_rows, gen_scene, gen_counts = [], [], [], []
    past, future_all, has_future, flags, frames, map_of = [], [], [], [], [], []
    src, dst = [], []
    T = hyper.t_future
    row = 0
    for si, sc in enumerate(scenarios):
        if sc.t_hist != hyper.t_hist or sc.t_future != hyper.t_future or sc.dt != hyper.dt:
            raise ValueError("scenario horizons do not match the model")
        n = len(sc.agents)
        ego = sc.ego.current
        gcount = 0
        for i, a in enumerate(sc.agents):
            scene_of.append(si)
            past.append(a.past)
            frames.append(ego[:3])
            map_of.append(sc.map)
            flags.append([1.0 if a.role == "ego" else 0.0, a.length / 5.0, a.width / 2.0])
            if a.future is not None:
                future_all.append(a.future)
                has_future.append(1.0)
            else:
                if need_future and a.role != "ego":
                    raise ValueError(f"agent {a.id} has no future; posterior encoding needs futures")
                future_all.append(np.zeros((T, 4)))
                has_future.append(0.0)
            if a.role != "ego":
                gen_rows.append(row + i)
                gen_scene.append(si)
                gcount += 1
        for i in range(n):
            for j in range(n):
                if i != j:
                    src.append(row + j)
                    dst.append(row + i)
        gen_counts.append(gcount)
        row += n
    A = row
    past = np.asarray(past)
    frames = np.asarray(frames)
    future_all = np.asarray(future_all)
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    scene_of = np.asarray(scene_of, dtype=np.intp)
    stack, map_index = map_stack(map_of)

    cur = past[:, -1]
    past_feat = _state_features(past, frames[:, None, :]).reshape(A, -1)
    px, py = _probe_points(cur[:, 0], cur[:, 1], cur[:, 2])
    probes, _, _ = stack.query_with_grad(map_index[:, None], np.stack([px, py], axis=-1))
    node_prior = np.concatenate([past_feat, np.tanh(probes / SDF_SCALE), np.asarray(flags)], axis=1)
    node_post = None
    if need_future:
        fut_feat = _state_features(future_all, cur[:, None, :3]).reshape(A, -1)
        node_post = np.concatenate([node_prior, fut_feat, np.asarray(has_future)[:, None]], axis=1)

    edge_feat = pair_features(cur, src, dst)
    deg = np.bincount(dst, minlength=A).astype(np.float64)
    inv_degree = (1.0 / np.maximum(deg, 1.0))[:, None]

    gen_rows = np.asarray(gen_rows, dtype=np.intp)
    fut = future_all[gen_rows] if need_future else None
    return SceneBatch(
        n_scenes=len(scenarios),
        scene_of=scene_of,
        gen_rows=gen_rows,
        gen_scene=np.asarray(gen_scene, dtype=np.intp),
        gen_counts=gen_counts,
        src=src,
        dst=dst,
        inv_degree=inv_degree,
        edge_feat=edge_feat,
        node_prior=node_prior,
        node_post=node_post,
        init_state=cur[gen_rows].copy(),
        future=fut,
        maps=stack,
        gen_map=map_index[gen_rows],
        t_future=T,
        dt=hyper.dt,
    )


# --------------------------------------------------------------------------
# networks


def _encode(P: dict, name: str, nodes: np.ndarray, batch: SceneBatch, rounds: int) -> ad.Node:
    h = nn.mlp(ad.as_node(nodes), P, f"{name}.embed", 2)
    h = ad.relu(h)
    edge = ad.as_node(batch.edge_feat)
    for r in range(rounds):
        if len(batch.src):
            msg_in = ad.concat([ad.take(h, batch.dst), ad.take(h, batch.src), edge], axis=1)
            msg = nn.mlp(msg_in, P, f"{name}.msg{r}", 2)
            agg = ad.segment_sum(msg, batch.dst, batch.n_agents) * batch.inv_degree
        else:
            agg = ad.as_node(np.zeros(h.shape))
        h = h + nn.mlp(ad.concat([h, agg], axis=1), P, f"{name}.upd{r}", 2)
    return nn.linear(ad.take(h, batch.gen_rows), P, f"{name}.out")


def prior_nodes(P: dict, batch: SceneBatch, hyper: VaeHyper) -> ad.Node:
    return _encode(P, "prior", batch.node_prior, batch, hyper.mp_rounds)


def posterior_nodes(P: dict, batch: SceneBatch, hyper: VaeHyper) -> tuple[ad.Node, ad.Node]:
    if batch.node_post is None:
        raise ValueError("batch was built without futures")
    out = _encode(P, "post", batch.node_post, batch, hyper.mp_rounds)
    d = hyper.latent_dim
    return out[:, :d], out[:, d:]


def decode_nodes(P: dict, z, cond, batch: SceneBatch, hyper: VaeHyper):
    """Differentiable rollout. Returns ``(x, y, heading, speed)`` nodes of shape ``(G, T)``."""
    z, cond = ad.as_node(z), ad.as_node(cond)
    init = batch.init_state
    x0, y0, h0 = init[:, 0:1], init[:, 1:2], init[:, 2:3]
    c0, s0 = np.cos(h0), np.sin(h0)
    x, y = ad.as_node(init[:, 0:1]), ad.as_node(init[:, 1:2])
    h, v = ad.as_node(init[:, 2:3]), ad.as_node(init[:, 3:4])
    hid = ad.tanh(nn.linear(ad.concat([cond, z], axis=1), P, "dec.h0"))
    map_idx = batch.gen_map[:, None]
    T = batch.t_future
    xs, ys, hs, vs = [], [], [], []
    for t in range(T):
        dx, dy = x - x0, y - y0
        rel_x = (dx * c0 + dy * s0) * (1.0 / POS_SCALE)
        rel_y = (dy * c0 - dx * s0) * (1.0 / POS_SCALE)
        ch, sh = ad.cos(h), ad.sin(h)
        cos_rel = ch * c0 + sh * s0
        sin_rel = sh * c0 - ch * s0
        px = x + ch * PROBE_FX - sh * PROBE_LY
        py = y + sh * PROBE_FX + ch * PROBE_LY
        probes = ad.tanh(batch.maps.query_nodes(map_idx, px, py) * (1.0 / SDF_SCALE))
        tcol = ad.as_node(np.full((init.shape[0], 1), t / T))
        step_in = ad.concat([rel_x, rel_y, cos_rel, sin_rel, v * (1.0 / SPEED_SCALE), probes, tcol, z], axis=1)
        hid = nn.gru_cell(step_in, hid, P, "dec.gru")
        act = ad.tanh(nn.mlp(hid, P, "dec.head", 2))
        accel = act[:, 0:1] * hyper.max_accel
        yaw = act[:, 1:2] * hyper.max_yaw_rate
        x, y, h, v = step_nodes(x, y, h, v, accel, yaw, batch.dt)
        xs.append(x)
        ys.append(y)
        hs.append(h)
        vs.append(v)
    return ad.concat(xs, axis=1), ad.concat(ys, axis=1), ad.concat(hs, axis=1), ad.concat(vs, axis=1)


def _as_states(x, y, h, v) -> np.ndarray:
    return np.stack([np.asarray(x.value), np.asarray(y.value), np.asarray(h.value), np.asarray(v.value)], axis=-1)


# --------------------------------------------------------------------------
# functional API


def encode_prior(scenarios: Sequence[Scenario], params: VaeParams) -> list[np.ndarray]:
    """Conditioning vectors ``(n_non_ego, d_c)`` per scenario."""
    batch = build_batch(scenarios, params.hyper)
    if len(batch.gen_rows) == 0:
        raise ValueError("scenarios contain no non-ego agents")
    P = nn.bind(params.arrays, None)
    return batch.split(np.asarray(prior_nodes(P, batch, params.hyper).value))


def encode_posterior(scenarios: Sequence[Scenario], params: VaeParams) -> list[GaussianPosterior]:
    batch = build_batch(scenarios, params.hyper, need_future=True)
    P = nn.bind(params.arrays, None)
    mean, log_std = posterior_nodes(P, batch, params.hyper)
    return [GaussianPosterior(m, s) for m, s in zip(batch.split(mean.value), batch.split(log_std.value))]


def decode(latents: Sequence[np.ndarray], scenarios: Sequence[Scenario], params: VaeParams, conditioning=None) -> list[np.ndarray]:
    """Decoded non-ego futures ``(n_non_ego, t_future, 4)`` per scenario."""
    batch = build_batch(scenarios, params.hyper)
    P = nn.bind(params.arrays, None)
    z = np.concatenate([np.asarray(l, dtype=np.float64).reshape(-1, params.hyper.latent_dim) for l in latents])
    if z.shape[0] != len(batch.gen_rows):
        raise ValueError(f"expected {len(batch.gen_rows)} latent vectors, got {z.shape[0]}")
    cond = prior_nodes(P, batch, params.hyper) if conditioning is None else np.concatenate(conditioning)
    return batch.split(_as_states(*decode_nodes(P, z, cond, batch, params.hyper)))


def _batch_loss(P: dict, batch: SceneBatch, hyper: VaeHyper, eps: np.ndarray, beta: float):
    mean, log_std = posterior_nodes(P, batch, hyper)
    z = mean + ad.exp(log_std) * eps
    cond = prior_nodes(P, batch, hyper)
    x, y, _, _ = decode_nodes(P, z, cond, batch, hyper)
    dx = x - batch.future[:, :, 0]
    dy = y - batch.future[:, :, 1]
    recon = ad.mean(ad.sum(dx * dx + dy * dy, axis=1))
    kl = ad.mean(0.5 * ad.sum(ad.exp(2.0 * log_std) + mean * mean - 1.0 - 2.0 * log_std, axis=1))
    ade = float(np.mean(np.sqrt(dx.value**2 + dy.value**2)))
    return recon + beta * kl, recon, kl, ade


def train_vae(
    scenarios: Sequence[Scenario],
    hyper: VaeHyper | None = None,
    *,
    epochs: int = 200,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    beta_kl: float = 0.1,
    kl_warmup: float = 0.2,
    grad_clip: float = 10.0,
    seed: int = 0,
    params: VaeParams | None = None,
    optimizer: nn.Adam | None = None,
    start_epoch: int = 0,
    callback: Callable | None = None,
) -> tuple[VaeParams, list[dict], nn.Adam]:
    """Minimise reconstruction SSE + beta_KL * KL(q || N(0, I)) with Adam.

    ``start_epoch``, ``params`` and ``optimizer`` resume an interrupted run;
    shuffling depends only on ``(seed, epoch)`` so resumed runs match.
    """
    hyper = hyper or VaeHyper(t_hist=scenarios[0].t_hist, t_future=scenarios[0].t_future, dt=scenarios[0].dt)
    params = params or init_params(hyper, seed)
    opt = optimizer or nn.Adam(learning_rate)
    history: list[dict] = []
    n = len(scenarios)
    last_good = params.copy()
    warm = max(1, int(round(kl_warmup * epochs)))
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        beta = beta_kl * min(1.0, (epoch + 1) / warm)
        lr = learning_rate * (0.5 * (1.0 + math.cos(math.pi * epoch / epochs)) * 0.9 + 0.1)
        tot = rec = kls = ades = 0.0
        nb = 0
        for b0 in range(0, n, batch_size):
            batch = build_batch([scenarios[i] for i in order[b0 : b0 + batch_size]], hyper, need_future=True)
            if len(batch.gen_rows) == 0:
                continue
            eps = rng.standard_normal((len(batch.gen_rows), hyper.latent_dim))
            with ad.Tape() as tape:
                P = nn.bind(params.arrays, tape)
                loss, recon, kl, ade = _batch_loss(P, batch, hyper, eps, beta)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite VAE loss at epoch {epoch}", last_good)
            g = tape.backward(loss)
            grads = {k: g[P[k]] for k in params.arrays}
            nn.clip_by_global_norm(grads, grad_clip)
            opt.step(params.arrays, grads, lr)
            tot += value
            rec += float(recon.value)
            kls += float(kl.value)
            ades += ade
            nb += 1
        nb = max(nb, 1)
        rec_ = {"epoch": epoch + 1, "loss": tot / nb, "recon": rec / nb, "kl": kls / nb, "ade": ades / nb, "beta": beta}
        if not all(math.isfinite(v) for v in rec_.values()):
            raise TrainingError(f"non-finite VAE statistics at epoch {epoch}", last_good)
        last_good = params.copy()
        history.append(rec_)
        logger.info("vae epoch %d loss %.4f recon %.4f kl %.3f ade %.3f", epoch + 1, rec_["loss"], rec_["recon"], rec_["kl"], rec_["ade"])
        if callback is not None:
            callback(rec_, params, opt)
    return params, history, opt


def reconstruction_ade(scenarios: Sequence[Scenario], params: VaeParams, batch_size: int = 64) -> float:
    """Mean displacement of posterior-mean reconstructions from the true futures."""
    errs = []
    for b0 in range(0, len(scenarios), batch_size):
        chunk = scenarios[b0 : b0 + batch_size]
        post = encode_posterior(chunk, params)
        dec = decode([p.mean for p in post], chunk, params)
        for sc, d in zip(chunk, dec):
            truth = np.array([sc.agents[i].future for i in sc.non_ego_indices])
            errs.append(np.linalg.norm(d[:, :, :2] - truth[:, :, :2], axis=-1).ravel())
    return float(np.mean(np.concatenate(errs)))


# --------------------------------------------------------------------------
# checkpoints


def save_params(path, params: VaeParams, extra: dict | None = None, optimizer: nn.Adam | None = None) -> None:
    hyper = asdict(params.hyper)
    header = {"kind": "traffic_vae", "hyper": hyper, "config_hash": checkpoint.config_hash(hyper), **(extra or {})}
    arrays = OrderedDict(params.arrays)
    if optimizer is not None:
        header["adam_t"] = optimizer.t
        arrays.update(optimizer.state_arrays())
    checkpoint.save(path, checkpoint.VAE_MAGIC, header, arrays)


def load_params(path, expect: VaeHyper | None = None) -> tuple[VaeParams, dict, dict]:
    header, arrays = checkpoint.load(path, checkpoint.VAE_MAGIC)
    hyper = VaeHyper(**header["hyper"])
    if checkpoint.config_hash(asdict(hyper)) != header.get("config_hash"):
        raise checkpoint.CheckpointError("VAE checkpoint hash does not match its header")
    if expect is not None and asdict(expect) != asdict(hyper):
        raise checkpoint.CheckpointError(f"VAE architecture mismatch: checkpoint {asdict(hyper)} vs requested {asdict(expect)}")
    model = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith("adam."))
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    expected = init_params(hyper)
    for k, v in expected.arrays.items():
        if k not in model or model[k].shape != v.shape:
            raise checkpoint.CheckpointError(f"VAE checkpoint missing or misshapen array {k!r}")
    return VaeParams(hyper, model), header, opt_arrays


# --------------------------------------------------------------------------
# estimator


class TrafficVAE(BaseEstimator):
    """Scikit-learn style wrapper around the graph VAE.

    ``fit`` trains on complete scenarios; ``transform`` returns posterior-mean
    latents per scenario and ``inverse_transform`` decodes latents back into
    non-ego futures.
    """

    def __init__(
        self,
        latent_dim: int = 32,
        cond_dim: int = 64,
        hidden_dim: int = 128,
        mp_rounds: int = 2,
        beta_kl: float = 0.1,
        kl_warmup: float = 0.2,
        epochs: int = 200,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        grad_clip: float = 10.0,
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.hidden_dim = hidden_dim
        self.mp_rounds = mp_rounds
        self.beta_kl = beta_kl
        self.kl_warmup = kl_warmup
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.seed = seed

    def _hyper(self, sc: Scenario) -> VaeHyper:
        return VaeHyper(self.latent_dim, self.cond_dim, self.hidden_dim, self.mp_rounds, sc.t_hist, sc.t_future, sc.dt)

    def fit(self, scenarios, y=None, callback=None):
        scenarios = check_scenarios(scenarios, require_future=True)
        self.params_, self.history_, self.optimizer_ = train_vae(
            scenarios,
            self._hyper(scenarios[0]),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta_kl=self.beta_kl,
            kl_warmup=self.kl_warmup,
            grad_clip=self.grad_clip,
            seed=self.seed,
            callback=callback,
        )
        return self

    def encode_prior(self, scenarios) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return encode_prior(check_scenarios(scenarios), self.params_)

    def encode_posterior(self, scenarios) -> list[GaussianPosterior]:
        check_is_fitted(self, "params_")
        return encode_posterior(check_scenarios(scenarios, require_future=True), self.params_)

    def transform(self, scenarios) -> list[np.ndarray]:
        return [p.mean for p in self.encode_posterior(scenarios)]

    def inverse_transform(self, latents, scenarios) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return decode(latents, check_scenarios(scenarios), self.params_)

    decode = inverse_transform

    def score(self, scenarios, y=None) -> float:
        """Negative posterior-reconstruction ADE (higher is better)."""
        check_is_fitted(self, "params_")
        return -reconstruction_ade(check_scenarios(scenarios, require_future=True), self.params_)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_params(path, self.params_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "TrafficVAE":
        params, header, _ = load_params(path)
        est = cls(**header.get("estimator", {}))
        est.params_ = params
        est.history_ = []
        return est

    @classmethod
    def from_params(cls, params: VaeParams) -> "TrafficVAE":
        h = params.hyper
        est = cls(latent_dim=h.latent_dim, cond_dim=h.cond_dim, hidden_dim=h.hidden_dim, mp_rounds=h.mp_rounds)
        est.params_ = params
        est.history_ = []
        return est

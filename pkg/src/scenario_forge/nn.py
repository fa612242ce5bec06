"""Small neural-network toolkit on top of :mod:`scenario_forge.autodiff`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad

Params = "OrderedDict[str, np.ndarray]"


def init_linear(params: OrderedDict, rng: np.random.Generator, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> None:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)


def init_mlp(params: OrderedDict, rng: np.random.Generator, name: str, sizes: list[int], out_gain: float = 1.0) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(params, rng, f"{name}.{i}", a, b, gain=out_gain if last else 1.0)


def init_gru(params: OrderedDict, rng: np.random.Generator, name: str, input_dim: int, hidden: int) -> None:
    init_linear(params, rng, f"{name}.x", input_dim, 3 * hidden)
    init_linear(params, rng, f"{name}.h", hidden, 3 * hidden)


def bind(params: OrderedDict, tape: ad.Tape | None) -> dict[str, ad.Node]:
    """Wrap arrays as tape variables (training) or constants (inference)."""
    if tape is None:
        return {k: ad.Node(v) for k, v in params.items()}
    return {k: tape.variable(v) for k, v in params.items()}


def linear(x, P: dict, name: str) -> ad.Node:
    return ad.matmul(x, P[f"{name}.W"]) + P[f"{name}.b"]


def mlp(x, P: dict, name: str, n_layers: int, act=ad.relu) -> ad.Node:
    for i in range(n_layers):
        x = linear(x, P, f"{name}.{i}")
        if i < n_layers - 1:
            x = act(x)
    return x


def gru_cell(x, h, P: dict, name: str) -> ad.Node:
    hidden = h.shape[1]
    gx = linear(x, P, f"{name}.x")
    gh = linear(h, P, f"{name}.h")
    r = ad.sigmoid(gx[:, :hidden] + gh[:, :hidden])
    u = ad.sigmoid(gx[:, hidden : 2 * hidden] + gh[:, hidden : 2 * hidden])
    n = ad.tanh(gx[:, 2 * hidden :] + r * gh[:, 2 * hidden :])
    return n + u * (h - n)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Adam optimizer operating in place on a parameter dictionary."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: OrderedDict, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        for name, arr in arrays.items():
            if name.startswith("adam.m."):
                self.m[name[len("adam.m.") :]] = np.array(arr)
            elif name.startswith("adam.v."):
                self.v[name[len("adam.v.") :]] = np.array(arr)


def sinusoidal_embedding(steps: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Standard transformer-style timestep embedding, shape ``(len(steps), dim)``."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = steps * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)

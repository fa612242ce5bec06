"""Shared fixtures: handcrafted scenes, tiny models and the desk-scale models.

The desk-scale models take a few minutes to train. They are cached in the
pytest cache directory under a key derived from the training recipe and the
package source, so a code change retrains them. ``pytest --cache-clear``
forces a retrain.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

import scenario_forge
from scenario_forge import diffusion, vae
from scenario_forge.generation import encode_corpus, prepare_scenario
from scenario_forge.scene import Agent, Scenario, SceneMap
from scenario_forge.synthetic import GeneratorConfig, generate_corpus

# desk recipe used by the quality and ablation checks
DESK_TRAIN_SEEDS = range(0, 1000)
DESK_VAE = dict(epochs=100, batch_size=32, learning_rate=1e-3, seed=0)
DESK_LDM = dict(epochs=400, batch_size=32, learning_rate=1e-3, seed=0)
EVAL_SEED0 = 100_000

TINY_VAE = vae.VaeHyper(latent_dim=4, cond_dim=8, hidden_dim=16, mp_rounds=1)
TINY_LDM = diffusion.DenoiserHyper(latent_dim=4, cond_dim=8, hidden_dim=16, time_dim=8, edge_dim=vae.EDGE_DIM)


# --------------------------------------------------------------------------
# handcrafted scenes


def straight_map(x0=-20.0, x1=120.0, half_width=6.0, res=0.5, margin=4.0) -> SceneMap:
    """East-west road of the given half width centred on y = 0."""
    cols = int(round((x1 - x0) / res))
    rows = int(round((2 * (half_width + margin)) / res))
    ys = -(half_width + margin) + (np.arange(rows) + 0.5) * res
    xs = x0 + (np.arange(cols) + 0.5) * res
    mask = np.abs(ys)[:, None] < half_width
    mask = np.repeat(mask, cols, axis=1)
    line = np.stack([xs[::4], np.zeros_like(xs[::4])], axis=1)
    return SceneMap.from_mask(mask, (x0, -(half_width + margin)), res, [line])


def straight_track(x, y, v, n, dt=0.5, heading=0.0, start=1):
    """States ``start..start+n-1`` steps along a constant-velocity line."""
    k = np.arange(start, start + n)[:, None]
    c, s = math.cos(heading), math.sin(heading)
    return np.hstack([x + c * v * dt * k, y + s * v * dt * k, np.full((n, 1), heading), np.full((n, 1), v)])


def make_agent(aid, role, x, y, v, t_hist=4, t_future=12, dt=0.5, length=4.0, width=2.0, heading=0.0, future=True):
    past = straight_track(x, y, v, t_hist + 1, dt, heading, start=-t_hist)
    fut = straight_track(x, y, v, t_future, dt, heading) if future else None
    return Agent(aid, role, length, width, past, fut)


def make_scene(specs, scene_map=None, t_hist=4, t_future=12, dt=0.5) -> Scenario:
    """``specs`` are ``(id, role, x, y, v)`` tuples on the default straight road."""
    m = scene_map if scene_map is not None else straight_map()
    agents = tuple(make_agent(*s, t_hist=t_hist, t_future=t_future, dt=dt) for s in specs)
    return Scenario(dt, t_hist, t_future, agents, m).validate()


@pytest.fixture
def road():
    return straight_map()


@pytest.fixture
def three_agent_scene():
    return make_scene([(0, "ego", 0.0, -2.0, 6.0), (1, "adversary", 12.0, 2.0, 5.0), (2, "other", 30.0, -2.0, 7.0)])


@pytest.fixture(scope="session")
def corpus_small():
    return generate_corpus(GeneratorConfig(), range(24))


# --------------------------------------------------------------------------
# tiny models for fast plumbing tests


@pytest.fixture(scope="session")
def tiny_models(corpus_small):
    vp, _, _ = vae.train_vae(corpus_small[:16], TINY_VAE, epochs=2, batch_size=8, seed=0)
    data = encode_corpus(corpus_small[:16], vp)
    lp, _, _ = diffusion.train_denoiser(data, TINY_LDM, epochs=2, batch_size=8, seed=0)
    return vp, lp


# --------------------------------------------------------------------------
# desk-scale models


def _source_key() -> str:
    h = hashlib.sha256()
    root = Path(scenario_forge.__file__).parent
    for name in ("autodiff.py", "nn.py", "scene.py", "synthetic.py", "vae.py", "diffusion.py", "generation.py", "checkpoint.py"):
        h.update((root / name).read_bytes())
    h.update(repr((list(DESK_TRAIN_SEEDS), DESK_VAE, DESK_LDM)).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_train_corpus():
    return generate_corpus(GeneratorConfig(), DESK_TRAIN_SEEDS)


@pytest.fixture(scope="session")
def desk_models(request, desk_train_corpus):
    """``(vae_params, ldm_params)`` trained with the desk recipe."""
    cache = Path(request.config.cache.mkdir("scenario_forge_desk_" + _source_key()))
    vae_path, ldm_path = cache / "vae.ckpt", cache / "ldm.ckpt"
    if vae_path.exists():
        vp, _, _ = vae.load_params(vae_path)
    else:
        vp, _, _ = vae.train_vae(desk_train_corpus, vae.VaeHyper(), **DESK_VAE)
        vae.save_params(vae_path, vp)
    if ldm_path.exists():
        lp, _, _ = diffusion.load_params(ldm_path)
    else:
        data = encode_corpus(desk_train_corpus, vp)
        hyper = diffusion.DenoiserHyper(edge_dim=vae.EDGE_DIM)
        lp, _, _ = diffusion.train_denoiser(data, hyper, **DESK_LDM)
        diffusion.save_params(ldm_path, lp)
    return vp, lp


@pytest.fixture(scope="session")
def eval_scenes():
    """Held-out evaluation scenes with the adversary assigned."""
    return [prepare_scenario(s) for s in generate_corpus(GeneratorConfig(), range(EVAL_SEED0, EVAL_SEED0 + 150))]


# --------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, details = _CRITERIA[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))

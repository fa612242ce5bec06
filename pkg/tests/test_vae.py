import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import TINY_VAE, make_scene
from scenario_forge import autodiff as ad
from scenario_forge import nn, vae
from scenario_forge.scene import Agent, Scenario, recurrence_error
from scenario_forge.synthetic import GeneratorConfig, generate_synthetic_scenario


@pytest.fixture(scope="module")
def untrained():
    return vae.init_params(TINY_VAE, seed=3)


def _permuted(sc: Scenario, order) -> Scenario:
    return Scenario(sc.dt, sc.t_hist, sc.t_future, tuple(sc.agents[i] for i in order), sc.map)


def test_prior_shape(untrained, corpus_small):
    for sc in corpus_small[:6]:
        c = vae.encode_prior([sc], untrained)[0]
        assert c.shape == (len(sc.agents) - 1, TINY_VAE.cond_dim)
        assert np.all(np.isfinite(c))


def test_posterior_shape(untrained, corpus_small):
    sc = corpus_small[1]
    post = vae.encode_posterior([sc], untrained)[0]
    n = len(sc.agents) - 1
    assert post.mean.shape == post.log_std.shape == (n, TINY_VAE.latent_dim)
    assert np.all(post.std > 0)


def test_batched_encoding_matches_single(untrained, corpus_small):
    batch = vae.encode_prior(corpus_small[:4], untrained)
    for sc, c in zip(corpus_small[:4], batch):
        np.testing.assert_allclose(vae.encode_prior([sc], untrained)[0], c, rtol=1e-12, atol=1e-12)


def test_permutation_equivariance(untrained, corpus_small):
    sc = max(corpus_small, key=lambda s: len(s.agents))
    order = list(range(len(sc.agents)))[::-1]
    perm = _permuted(sc, order)
    c, cp = vae.encode_prior([sc], untrained)[0], vae.encode_prior([perm], untrained)[0]
    post, postp = vae.encode_posterior([sc], untrained)[0], vae.encode_posterior([perm], untrained)[0]
    # rows follow non-ego agent order in each scenario
    ids = [sc.agents[i].id for i in sc.non_ego_indices]
    ids_p = [perm.agents[i].id for i in perm.non_ego_indices]
    idx = [ids.index(i) for i in ids_p]
    np.testing.assert_allclose(cp, c[idx], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(postp.mean, post.mean[idx], rtol=1e-10, atol=1e-12)


def test_translation_invariance(untrained, corpus_small):
    for sc in corpus_small[:5]:
        moved = sc.translated(10.0, 10.0)
        np.testing.assert_allclose(vae.encode_prior([moved], untrained)[0], vae.encode_prior([sc], untrained)[0], atol=1e-9)


def test_sample_with_vanishing_std_is_mean():
    mean = np.array([[0.3, -1.2]])
    post = vae.GaussianPosterior(mean, np.full((1, 2), -800.0))
    np.testing.assert_array_equal(post.sample(np.array([[5.0, -7.0]])), mean)


def test_reparameterized_sample_is_deterministic():
    post = vae.GaussianPosterior(np.array([[0.5]]), np.array([[np.log(2.0)]]))
    assert post.sample(np.array([[1.5]]))[0, 0] == 3.5


def test_kl_identity_and_closed_form():
    assert vae.kl_standard_normal(np.zeros(4), np.zeros(4)) == 0.0
    rng = np.random.default_rng(0)
    m, ls = rng.normal(0, 1, 5), rng.normal(0, 0.5, 5)
    s = np.exp(ls)
    # KL(N(m, s^2) || N(0, 1)) per dimension: log(1/s) + (s^2 + m^2)/2 - 1/2
    want = sum(math.log(1 / si) + (si * si + mi * mi) / 2 - 0.5 for mi, si in zip(m, s))
    assert math.isclose(vae.kl_standard_normal(m, ls), want, rel_tol=1e-12)


def test_decoded_tracks_are_kinematic_and_deterministic(untrained, corpus_small):
    sc = corpus_small[2]
    n = len(sc.agents) - 1
    z = np.random.default_rng(0).normal(0, 2, (n, TINY_VAE.latent_dim))
    a = vae.decode([z], [sc], untrained)[0]
    b = vae.decode([z], [sc], untrained)[0]
    assert a.shape == (n, sc.t_future, 4)
    assert a.tobytes() == b.tobytes()
    for row, i in enumerate(sc.non_ego_indices):
        track = np.vstack([sc.agents[i].current[None], a[row]])
        assert recurrence_error(track, sc.dt) <= 1e-9


def test_decode_final_position_gradient_matches_fd(untrained, corpus_small):
    sc = corpus_small[3]
    hyper = untrained.hyper
    batch = vae.build_batch([sc], hyper)
    P = nn.bind(untrained.arrays, None)
    cond = vae.prior_nodes(P, batch, hyper).value
    n = len(batch.gen_rows)
    w = np.random.default_rng(1).normal(0, 1, (n, 2))

    def final_position(z):
        x, y, _, _ = vae.decode_nodes(P, z, cond, batch, hyper)
        return ad.sum(ad.take(x, [sc.t_future - 1], axis=1) * w[:, :1] + ad.take(y, [sc.t_future - 1], axis=1) * w[:, 1:])

    z0 = np.random.default_rng(2).normal(0, 1, (n, hyper.latent_dim))
    res = ad.finite_diff_check(final_position, z0)
    assert res.n_compared > 0
    assert res.max_rel_error < 1e-4


def test_missing_future_is_contract_error(untrained):
    sc = make_scene([(0, "ego", 0, 0, 5), (1, "other", 10, 2, 5)])
    no_future = Scenario(sc.dt, sc.t_hist, sc.t_future, (sc.agents[0], Agent(1, "other", 4.0, 2.0, sc.agents[1].past)), sc.map)
    with pytest.raises(ValueError):
        vae.encode_posterior([no_future], untrained)
    assert vae.encode_prior([no_future], untrained)[0].shape == (1, TINY_VAE.cond_dim)


def test_ego_only_scene_has_no_conditioning(untrained):
    with pytest.raises(ValueError):
        vae.encode_prior([make_scene([(0, "ego", 0, 0, 5)])], untrained)


def test_overfit_identical_scenes():
    sc = generate_synthetic_scenario(GeneratorConfig(layout="curve", n_agents=2), 3)
    hyper = vae.VaeHyper(latent_dim=4, cond_dim=8, hidden_dim=32, mp_rounds=1)
    params, hist, _ = vae.train_vae([sc] * 50, hyper, epochs=30, batch_size=10, learning_rate=3e-3, beta_kl=0.0)
    assert vae.reconstruction_ade([sc], params) < 0.1
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert [h["beta"] for h in hist] == [0.0] * 30


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good(corpus_small):
    with pytest.raises(vae.TrainingError) as exc:
        vae.train_vae(corpus_small[:8], TINY_VAE, epochs=5, batch_size=4, learning_rate=1e200)
    assert isinstance(exc.value.last_good, vae.VaeParams)


def test_training_is_deterministic_and_resumable(corpus_small):
    data = corpus_small[:8]
    full, _, _ = vae.train_vae(data, TINY_VAE, epochs=3, batch_size=4, seed=5)
    state = {}

    def snapshot(rec, p, o):
        if rec["epoch"] == 2:
            state["params"] = p.copy()
            state["opt"] = (o.t, {k: v.copy() for k, v in o.state_arrays().items()})

    again, _, _ = vae.train_vae(data, TINY_VAE, epochs=3, batch_size=4, seed=5, callback=snapshot)
    opt = nn.Adam(1e-3)
    opt.load_state(*state["opt"])
    resumed, rest, _ = vae.train_vae(data, TINY_VAE, epochs=3, batch_size=4, seed=5, params=state["params"], optimizer=opt, start_epoch=2)
    assert [r["epoch"] for r in rest] == [3]
    for k in full.arrays:
        assert full.arrays[k].tobytes() == again.arrays[k].tobytes() == resumed.arrays[k].tobytes()


def test_checkpoint_round_trip(tmp_path, untrained):
    p = tmp_path / "vae.ckpt"
    vae.save_params(p, untrained, {"epoch": 7})
    loaded, header, _ = vae.load_params(p, expect=TINY_VAE)
    assert header["epoch"] == 7
    for k, v in untrained.arrays.items():
        assert loaded.arrays[k].tobytes() == v.tobytes()


def test_checkpoint_hyper_mismatch(tmp_path, untrained):
    from scenario_forge.checkpoint import CheckpointError

    p = tmp_path / "vae.ckpt"
    vae.save_params(p, untrained)
    with pytest.raises(CheckpointError):
        vae.load_params(p, expect=vae.VaeHyper())


def test_estimator_api(corpus_small, tmp_path):
    est = vae.TrafficVAE(latent_dim=4, cond_dim=8, hidden_dim=16, mp_rounds=1, epochs=2, batch_size=8)
    assert clone(est).get_params() == est.get_params()
    est.fit(corpus_small[:8])
    z = est.transform(corpus_small[8:10])
    assert [a.shape for a in z] == [(len(s.agents) - 1, 4) for s in corpus_small[8:10]]
    futures = est.inverse_transform(z, corpus_small[8:10])
    assert futures[0].shape == (len(corpus_small[8].agents) - 1, 12, 4)
    assert est.score(corpus_small[8:10]) <= 0
    est.save(tmp_path / "v.ckpt")
    again = vae.TrafficVAE.load(tmp_path / "v.ckpt")
    np.testing.assert_array_equal(again.transform(corpus_small[8:9])[0], z[0])


def test_different_futures_give_different_means(desk_models, eval_scenes):
    vp, _ = desk_models
    sc = eval_scenes[0]
    other = sc.non_ego_indices[0]
    fut = sc.agents[other].future.copy()
    slowed = fut.copy()
    # a stopping variant of the same past
    slowed[:, :2] = sc.agents[other].current[:2] + (fut[:, :2] - sc.agents[other].current[:2]) * 0.5
    alt = sc.with_futures({sc.agents[other].id: slowed})
    a = vae.encode_posterior([sc], vp)[0].mean
    b = vae.encode_posterior([alt], vp)[0].mean
    assert np.max(np.abs(a[0] - b[0])) > 1e-3


@given(st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=15, deadline=None)
def test_encoders_translation_property(dx, dy):
    params = vae.init_params(TINY_VAE, seed=1)
    sc = make_scene([(0, "ego", 0.0, -2.0, 6.0), (1, "other", 12.0, 2.0, 5.0), (2, "other", 30.0, -2.0, 7.0)])
    np.testing.assert_allclose(vae.encode_prior([sc.translated(dx, dy)], params)[0], vae.encode_prior([sc], params)[0], atol=1e-9)

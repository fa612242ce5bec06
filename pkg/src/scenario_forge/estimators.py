"""Scikit-learn style estimators wrapping the functional API."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diffusion
from .diffusion import DenoiserHyper, LatentDataset
from .generation import GenerationResult, encode_corpus, generate
from .guidance import GuidanceConfig
from .planner import PlannerConfig
from .selection import FeasibilityLimits, SelectionConfig
from .validation import check_scenarios
from .vae import EDGE_DIM, TrafficVAE

__all__ = ["TrafficVAE", "LatentDiffusion", "AdversarialScenarioGenerator"]


def _as_dataset(X, conditioning=None) -> LatentDataset:
    if isinstance(X, LatentDataset):
        return X
    arr = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in X] if not isinstance(X, np.ndarray) else None
    if arr is None:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a (n_samples, latent_dim) array, got shape {X.shape}")
        arr = [row[None] for row in X]
    for a in arr:
        if not np.all(np.isfinite(a)):
            raise ValueError("latents must be finite")
    conds = None
    if conditioning is not None:
        conds = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in conditioning]
        if len(conds) != len(arr):
            raise ValueError("conditioning must have one entry per latent set")
    return LatentDataset(arr, None, conds)


class LatentDiffusion(BaseEstimator):
    """DDIM latent diffusion model.

    ``fit`` accepts a :class:`LatentDataset`, a list of per-scene latent
    arrays or a plain ``(n_samples, latent_dim)`` array (one agent per
    sample). ``sample`` draws latents for one scene's conditioning.
    """

    def __init__(
        self,
        latent_dim: int = 32,
        cond_dim: int = 64,
        hidden_dim: int = 128,
        time_dim: int = 32,
        K: int = 100,
        beta_start: float = 1e-4,
        beta_end: float = 5e-2,
        edge_dim: int = 0,
        ddim_steps: int = 20,
        epochs: int = 200,
        batch_size: int = 32,
        learning_rate: float = 5e-4,
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.K = K
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.edge_dim = edge_dim
        self.ddim_steps = ddim_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _hyper(self) -> DenoiserHyper:
        return DenoiserHyper(self.latent_dim, self.cond_dim, self.hidden_dim, self.time_dim, self.K, self.beta_start, self.beta_end, self.edge_dim)

    def fit(self, X, y=None, conditioning=None, callback=None):
        data = _as_dataset(X, conditioning)
        if data.means[0].shape[1] != self.latent_dim:
            raise ValueError(f"latent_dim={self.latent_dim} but data has dimension {data.means[0].shape[1]}")
        if (data.conds is None) != (self.cond_dim == 0):
            raise ValueError("conditioning must be given iff cond_dim > 0")
        self.params_, self.history_, self.optimizer_ = diffusion.train_denoiser(
            data, self._hyper(), epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate, seed=self.seed, callback=callback
        )
        return self

    @property
    def schedule_(self) -> diffusion.NoiseSchedule:
        check_is_fitted(self, "params_")
        return self.params_.schedule

    def sample(
        self,
        conditioning=None,
        n_samples: int = 10,
        seed: int = 0,
        n_agents: int = 1,
        guidance=None,
        scale: float = 0.0,
        ddim_steps: int | None = None,
        edge_feat=None,
    ) -> np.ndarray:
        """Latents ``(n_samples, n_agents, latent_dim)``; ``n_agents`` follows ``conditioning`` when given."""
        check_is_fitted(self, "params_")
        cond = None if conditioning is None else np.atleast_2d(np.asarray(conditioning, dtype=np.float64))
        return diffusion.sample(self.params_, cond, n_samples, seed, ddim_steps or self.ddim_steps, guidance, scale, n_agents, edge_feat)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        diffusion.save_params(path, self.params_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "LatentDiffusion":
        params, header, _ = diffusion.load_params(path)
        est = cls(**header.get("estimator", {}))
        est.params_ = params
        est.history_ = []
        return est

    @classmethod
    def from_params(cls, params: diffusion.DenoiserParams) -> "LatentDiffusion":
        h = params.hyper
        est = cls(h.latent_dim, h.cond_dim, h.hidden_dim, h.time_dim, h.K, h.beta_start, h.beta_end, h.edge_dim)
        est.params_ = params
        est.history_ = []
        return est


class AdversarialScenarioGenerator(BaseEstimator):
    """Frozen VAE + latent diffusion + guidance + feasibility-based selection.

    ``fit`` trains the VAE (unless already fitted) and then the diffusion
    model on the frozen VAE's latents. ``predict`` returns one
    :class:`GenerationResult` per input scenario.
    """

    def __init__(
        self,
        vae: TrafficVAE | None = None,
        diffusion: LatentDiffusion | None = None,
        guidance: GuidanceConfig | None = None,
        selection: SelectionConfig | None = None,
        limits: FeasibilityLimits | None = None,
        planner: PlannerConfig | None = None,
        n_samples: int = 10,
        ddim_steps: int = 20,
        seed: int = 0,
    ):
        self.vae = vae
        self.diffusion = diffusion
        self.guidance = guidance
        self.selection = selection
        self.limits = limits
        self.planner = planner
        self.n_samples = n_samples
        self.ddim_steps = ddim_steps
        self.seed = seed

    def fit(self, scenarios, y=None):
        scenarios = check_scenarios(scenarios, require_future=True)
        vae_est = self.vae if self.vae is not None else TrafficVAE(seed=self.seed)
        if not hasattr(vae_est, "params_"):
            vae_est.fit(scenarios)
        ldm = self.diffusion if self.diffusion is not None else LatentDiffusion(latent_dim=vae_est.latent_dim, cond_dim=vae_est.cond_dim, edge_dim=EDGE_DIM, seed=self.seed)
        if not hasattr(ldm, "params_"):
            ldm.fit(encode_corpus(scenarios, vae_est.params_))
        self.vae_, self.diffusion_ = vae_est, ldm
        return self

    def predict(self, scenarios, guided: bool = True) -> list[GenerationResult]:
        check_is_fitted(self, ["vae_", "diffusion_"])
        scenarios = check_scenarios(scenarios)
        cfg = self.guidance or GuidanceConfig()
        if not guided:
            cfg = cfg.with_scale(0.0)
        return [
            generate(
                sc,
                self.vae_.params_,
                self.diffusion_.params_,
                cfg,
                self.selection,
                self.limits,
                self.n_samples,
                self.ddim_steps,
                self.seed + 1000 * i,
                self.planner,
            )
            for i, sc in enumerate(scenarios)
        ]

    def predict_scenarios(self, scenarios: Sequence, guided: bool = True) -> list:
        """Selected candidate of each scene as a complete :class:`Scenario`."""
        return [g.selected_scenario for g in self.predict(scenarios, guided)]

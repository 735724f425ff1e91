"""Comparison optimizers sharing the BO environment: random search, GP-EI, NP-EI and NAP."""
from __future__ import annotations

import logging
from typing import Protocol

import numpy as np
from scipy.stats import norm

from .architecture import ModelParams, forward_batch, pack
from .distribution import expected_improvement
from .environment import BOState, candidate_set
from .tasks import GPModel, TaskDataset, gp_fit, gp_posterior
from .trainer import ablation_modes  # noqa: F401  (re-exported mode selector)

log = logging.getLogger(__name__)


class Optimizer(Protocol):
    name: str

    def start_episode(self, task: TaskDataset) -> None: ...

    def select(self, state: BOState, rng: np.random.Generator) -> int: ...


def random_search(state: BOState, rng: np.random.Generator) -> int:
    n = len(state.remaining)
    if n == 0:
        raise ValueError("no candidates left")
    return int(rng.integers(n))


def gaussian_ei(mean, std, best: float) -> np.ndarray:
    """Closed-form expected improvement over ``best``; zero spread gives ``max(mean - best, 0)``."""
    mu = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(std, dtype=np.float64)
    gap = mu - best
    safe = np.where(sd > 0, sd, 1.0)
    z = gap / safe
    ei = np.where(sd > 0, gap * norm.cdf(z) + sd * norm.pdf(z), np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def _history_task(state: BOState) -> TaskDataset:
    return TaskDataset(f"{state.task.id}/history", state.history_x, state.history_y)


def gp_ei_scores(state: BOState, log_params: np.ndarray, kernel: str = "matern52") -> np.ndarray:
    dim = state.task.dim
    p = np.asarray(log_params, dtype=np.float64)
    hy = state.history_y
    model = GPModel.build(kernel, np.exp(p[:dim]), np.exp(p[dim]), np.exp(p[dim + 1]),
                          state.history_x, hy, float(hy.mean()))
    mu, cov = gp_posterior(model, candidate_set(state))
    return gaussian_ei(mu, np.sqrt(np.clip(np.diag(cov), 0.0, None)), float(hy.max()))


def gp_ei(state: BOState, gp_hyperparams: np.ndarray, rng: np.random.Generator | None = None,
          kernel: str = "matern52") -> int:
    """Argmax of GP expected improvement under fixed log hyperparameters."""
    if not state.history:
        return random_search(state, rng if rng is not None else np.random.default_rng(0))
    return int(np.argmax(gp_ei_scores(state, gp_hyperparams, kernel)))


def _single(state: BOState, params: ModelParams):
    if state.task.dim != params.config.input_dim:
        raise ValueError(f"task dimension {state.task.dim} != model input dimension {params.config.input_dim}")
    return pack([(state.history_x, state.history_y, candidate_set(state), state.step, state.budget)],
                params.config.input_dim)


def np_ei_scores(state: BOState, params: ModelParams) -> np.ndarray:
    spec = params.config.bucket_spec
    _, logits = forward_batch(params, _single(state, params), acq=False)
    best = state.best_y if state.history else spec.lower
    return expected_improvement(logits[0, : len(state.remaining)], spec, best)


def np_ei(state: BOState, trained_np_params: ModelParams) -> int:
    return int(np.argmax(np_ei_scores(state, trained_np_params)))


class RandomSearch:
    name = "random"

    def start_episode(self, task: TaskDataset) -> None:
        pass

    def select(self, state: BOState, rng: np.random.Generator) -> int:
        return random_search(state, rng)


class GPEI:
    """GP-EI with hyperparameters refit on the history every ``refit_every`` acquisitions."""

    name = "gp-ei"

    def __init__(self, init_log_params: np.ndarray, kernel: str = "matern52", refit_every: int = 5,
                 restarts: int = 2, steps: int = 100):
        self.init_log_params = np.asarray(init_log_params, dtype=np.float64)
        self.kernel = kernel
        self.refit_every = refit_every
        self.restarts = restarts
        self.steps = steps
        self.start_episode(None)

    def start_episode(self, task: TaskDataset | None) -> None:
        self.log_params = self.init_log_params.copy()
        self.acquisitions = 0

    def _refit(self, state: BOState) -> None:
        model = gp_fit(_history_task(state), self.kernel, restarts=self.restarts, steps=self.steps,
                       rng=self.acquisitions, init=self.log_params)
        self.log_params = np.log(np.concatenate([model.lengthscales, [model.signal_variance, model.noise_variance]]))

    def select(self, state: BOState, rng: np.random.Generator) -> int:
        self.acquisitions += 1
        if not state.history:
            return random_search(state, rng)
        try:
            if self.refit_every and self.acquisitions % self.refit_every == 0 and len(state.history) >= 2:
                self._refit(state)
            return gp_ei(state, self.log_params, rng, self.kernel)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as err:
            log.warning("GP-EI failed on %s (%s); falling back to random search", state.task.id, err)
            return random_search(state, rng)


class NPEIOptimizer:
    name = "np-ei"

    def __init__(self, params: ModelParams):
        self.params = params

    def start_episode(self, task: TaskDataset) -> None:
        pass

    def select(self, state: BOState, rng: np.random.Generator) -> int:
        return np_ei(state, self.params)


class NAPOptimizer:
    """Greedy (argmax) acquisition from the learned acquisition head."""

    name = "nap"

    def __init__(self, params: ModelParams, name: str = "nap"):
        self.params = params
        self.name = name

    def start_episode(self, task: TaskDataset) -> None:
        pass

    def select(self, state: BOState, rng: np.random.Generator) -> int:
        acq, _ = forward_batch(self.params, _single(state, self.params), dist=False)
        return int(np.argmax(acq[0, : len(state.remaining)]))

"""Finite-candidate BO episodes: states, transitions, running-max rewards and policy rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .architecture import ARGMAX, ModelParams, forward_batch, pack, value_features, value_head
from .tasks import TaskDataset


@dataclass(frozen=True)
class BOState:
    task: TaskDataset = field(repr=False)
    history: tuple[int, ...]  # dataset indices, initial points first
    step: int  # t, 1-based
    budget: int  # T
    remaining: tuple[int, ...]  # unselected dataset indices, ascending
    n_init: int = 0

    @property
    def history_x(self) -> np.ndarray:
        return self.task.inputs[list(self.history)] if self.history else np.zeros((0, self.task.dim))

    @property
    def history_y(self) -> np.ndarray:
        return self.task.outputs[list(self.history)]

    @property
    def best_y(self) -> float | None:
        return float(self.history_y.max()) if self.history else None

    @property
    def done(self) -> bool:
        return self.step > self.budget or not self.remaining


def reset(task: TaskDataset, n_init: int, rng: np.random.Generator, budget: int = 1) -> BOState:
    if n_init >= task.n or n_init < 0:
        raise ValueError(f"n_init={n_init} must be in [0, {task.n})")
    init = tuple(int(i) for i in rng.choice(task.n, size=n_init, replace=False)) if n_init else ()
    chosen = set(init)
    remaining = tuple(i for i in range(task.n) if i not in chosen)
    return BOState(task, init, 1, budget, remaining, n_init)


def candidate_set(state: BOState) -> np.ndarray:
    if not state.remaining:
        raise ValueError(f"task {state.task.id}: no candidates left")
    return state.task.inputs[list(state.remaining)]


def step(state: BOState, action_index: int) -> tuple[BOState, float, bool]:
    """Query the candidate at position ``action_index`` of :func:`candidate_set`."""
    if not 0 <= action_index < len(state.remaining):
        raise IndexError(f"action {action_index} not in [0, {len(state.remaining)})")
    chosen = state.remaining[action_index]
    remaining = state.remaining[:action_index] + state.remaining[action_index + 1:]
    nxt = replace(state, history=state.history + (chosen,), step=state.step + 1, remaining=remaining)
    reward = float(nxt.history_y.max())
    return nxt, reward, nxt.done


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    r = np.asarray(rewards, dtype=np.float64)
    return float((gamma ** np.arange(len(r)) * r).sum())


@dataclass
class StepRecord:
    history: tuple[int, ...]
    t: int
    T: int
    candidates: tuple[int, ...]
    action: int  # position within candidates
    reward: float
    log_prob: float
    value: float
    y: float


@dataclass
class Trajectory:
    task: TaskDataset = field(repr=False)
    steps: list[StepRecord] = field(default_factory=list)
    done: bool = False

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.steps])

    @property
    def log_probs(self) -> np.ndarray:
        return np.array([s.log_prob for s in self.steps])

    @property
    def ys(self) -> np.ndarray:
        return np.array([s.y for s in self.steps])


def state_tuple(s: BOState) -> tuple:
    """``(hist_x, hist_y, query_x, t, T)`` as consumed by :func:`architecture.pack`."""
    return s.history_x, s.history_y, candidate_set(s), s.step, s.budget


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def rollout_batch(params: ModelParams, states: Sequence[BOState], temperature,
                  rngs: Sequence[np.random.Generator], chunk: int = 64) -> list[Trajectory]:
    """Run the policy on several episodes in lockstep, one batched forward per step."""
    if len(rngs) != len(states):
        raise ValueError("one rng stream per episode is required")
    states = list(states)
    trajs = [Trajectory(s.task) for s in states]
    dim = params.config.input_dim
    w = params.tensors()
    while True:
        live = [i for i, s in enumerate(states) if not s.done]
        if not live:
            break
        for start in range(0, len(live), chunk):
            group = live[start:start + chunk]
            batch = pack([state_tuple(states[i]) for i in group], dim)
            acq, _ = forward_batch(params, batch, dist=False)
            best = [states[i].best_y if states[i].history else 0.0 for i in group]
            vals = value_head(w, value_features([states[i].step for i in group],
                                                [states[i].budget for i in group], best)).data
            for row, i in enumerate(group):
                s = states[i]
                a = acq[row, : len(s.remaining)]
                if temperature == ARGMAX or temperature is None:
                    action, logp = int(np.argmax(a)), 0.0
                else:
                    lp = _log_softmax(a / temperature)
                    action = int(rngs[i].choice(len(a), p=np.exp(lp)))
                    logp = float(lp[action])
                nxt, reward, done = step(s, action)
                trajs[i].steps.append(StepRecord(
                    s.history, s.step, s.budget, s.remaining, action, reward, logp,
                    float(vals[row]), float(s.task.outputs[s.remaining[action]]),
                ))
                trajs[i].done = done
                states[i] = nxt
    return trajs


def rollout(params: ModelParams, task: TaskDataset, T: int, temperature, rng: np.random.Generator,
            n_init: int = 0) -> Trajectory:
    if task.dim != params.config.input_dim:
        raise ValueError(f"task dimension {task.dim} != model input dimension {params.config.input_dim}")
    state = reset(task, n_init, rng, budget=T)
    return rollout_batch(params, [state], temperature, [rng])[0]

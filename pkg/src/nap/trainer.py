"""PPO + GAE on BO rollouts with the auxiliary predictive-likelihood loss."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .architecture import (
    ModelConfig,
    ModelParams,
    TokenBatch,
    acquisition_head,
    distribution_head,
    init_params,
    pack,
    parameter_group,
    query_features,
    value_features,
    value_head,
)
from .distribution import BucketSpec, log_prob_tensor
from .environment import BOState, StepRecord, Trajectory, discounted_return, rollout_batch
from .tasks import GPModel, SplitPair, TaskDataset, augment, gp_fit, split_obs_pred

log = logging.getLogger(__name__)

MODES = ("NAP", "NAP-RL", "NP-EI", "Pre-NAP")
METRIC_COLUMNS = ("iteration", "lr", "mean_return", "ppo_loss", "value_loss", "aux_nll", "grad_norm", "val_regret")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 200
    horizon: int = 12
    trajectories_per_iteration: int = 16
    minibatch: int = 32
    aux_weight: float = 1.0
    value_loss_weight: float = 1.0
    gae_lambda: float = 0.98
    gamma: float = 0.98
    clip_eps: float = 0.15
    grad_clip: float = 0.5
    temperature: float = 0.1
    ppo_epochs: int = 4
    aux_splits: int = 16
    mode: str = "NAP"
    pretrain_fraction: float = 0.5
    augment: bool = False
    augment_perturb: float = 0.05
    augment_size: int = 0  # 0 -> max(n, 256)
    val_interval: int = 20
    val_seeds: int = 2
    val_n_init: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Hyperparameters of the full-scale runs."""
        base = dict(learning_rate=3e-5, iterations=2000, horizon=24, trajectories_per_iteration=60, ppo_epochs=1)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        for name in ("learning_rate", "iterations", "horizon", "trajectories_per_iteration", "minibatch",
                     "ppo_epochs", "temperature", "grad_clip", "aux_splits", "val_interval", "val_seeds"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        for name in ("aux_weight", "value_loss_weight", "augment_perturb", "val_n_init", "augment_size"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if not 0 <= self.gamma < 1:
            out.append("gamma must lie in [0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            out.append("gae_lambda must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            out.append("clip_eps must lie in (0, 1)")
        if not 0 <= self.pretrain_fraction <= 1:
            out.append("pretrain_fraction must lie in [0, 1]")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}")
        elif self.mode in ("NP-EI", "Pre-NAP") and self.aux_weight <= 0:
            out.append(f"mode {self.mode} needs aux_weight > 0")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ----------------------------------------------------------------------------
# training modes


@dataclass(frozen=True)
class ModePlan:
    """What one iteration optimises."""

    use_rl: bool
    use_aux: bool
    trainable: frozenset[str] | None  # None = all parameters


RL_HEAD = ("acq", "budget", "value")


def ablation_modes(config: TrainConfig, iteration: int = 0, params: ModelParams | None = None) -> ModePlan:
    """Per-iteration plan for NAP, NAP-RL, NP-EI and Pre-NAP."""
    mode = config.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "NAP":
        return ModePlan(True, config.aux_weight > 0, None)
    if mode == "NAP-RL":
        return ModePlan(True, False, None)
    if mode == "NP-EI":
        return ModePlan(False, True, None)
    names = params.arrays if params is not None else None
    pretrain_iters = int(round(config.pretrain_fraction * config.iterations))
    if iteration < pretrain_iters:
        keep = None if names is None else frozenset(n for n in names if parameter_group(n) not in RL_HEAD)
        return ModePlan(False, True, keep)
    keep = None if names is None else frozenset(n for n in names if parameter_group(n) in RL_HEAD)
    return ModePlan(True, False, keep)


# ----------------------------------------------------------------------------
# estimators


def compute_gae(rewards, values, gamma: float, gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantages with a zero bootstrap after the last step."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have the same length")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + gamma * nxt - v[t]
        running = delta + gamma * gae_lambda * running
        adv[t] = running
    return adv, adv + v


def ppo_surrogate(new_logp, old_logp, advantage, eps: float):
    ratio = np.exp(np.asarray(new_logp, dtype=np.float64) - np.asarray(old_logp, dtype=np.float64))
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * a, np.clip(ratio, 1 - eps, 1 + eps) * a)
    return float(out) if out.ndim == 0 else out


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    return config.learning_rate * (1.0 - iteration / config.iterations)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ----------------------------------------------------------------------------
# differentiable losses


def _split_batch(splits: Sequence[tuple[TaskDataset, SplitPair]], dim: int):
    states, ys = [], []
    for d, sp in splits:
        ox, oy, px, py = sp.arrays(d)
        states.append((ox, oy, px, 1, 1))
        ys.append(py)
    batch = pack(states, dim)
    y = np.full((len(splits), batch.q_max), 0.5)
    for i, py in enumerate(ys):
        y[i, : len(py)] = py
    return batch, y


def aux_nll_tensor(w, cfg: ModelConfig, splits, spec: BucketSpec | None = None) -> dc.Tensor:
    """Mean over splits of the mean negative log density of the held-out outputs."""
    spec = spec or cfg.bucket_spec
    batch, y = _split_batch(splits, cfg.input_dim)
    logits = distribution_head(w, query_features(w, batch, cfg))
    lp = log_prob_tensor(logits, y, spec)
    valid = batch.query_valid.astype(np.float64)
    per_split = (lp * valid).sum(axis=1) / batch.n_query.astype(np.float64)
    return -per_split.mean()


def aux_loss(params: ModelParams, d: TaskDataset, split: SplitPair, spec: BucketSpec | None = None) -> float:
    if len(split.observed) == 0 or len(split.prediction) == 0:
        raise ValueError("both sides of the split must be non-empty")
    return aux_nll_tensor(params.tensors(), params.config, [(d, split)], spec).item()


@dataclass
class PPOBatch:
    records: list[StepRecord]
    tasks: list[TaskDataset]
    advantages: np.ndarray
    returns: np.ndarray
    old_logp: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "PPOBatch":
        return PPOBatch([self.records[i] for i in idx], [self.tasks[i] for i in idx],
                        self.advantages[idx], self.returns[idx], self.old_logp[idx])


def _record_state(rec: StepRecord, task: TaskDataset):
    hist = list(rec.history)
    hx = task.inputs[hist] if hist else np.zeros((0, task.dim))
    return hx, task.outputs[hist], task.inputs[list(rec.candidates)], rec.t, rec.T


def ppo_terms(w, cfg: ModelConfig, mb: PPOBatch, temperature: float, eps: float):
    """Return (policy loss = -mean surrogate, mean squared value error) tensors."""
    batch = pack([_record_state(r, t) for r, t in zip(mb.records, mb.tasks)], cfg.input_dim)
    acq = acquisition_head(w, query_features(w, batch, cfg), batch)
    logits = acq / temperature
    actions = np.array([r.action for r in mb.records])[:, None]
    new_logp = dc.gather(logits, actions, axis=1)[:, 0] - dc.logsumexp(logits, axis=1, mask=batch.query_valid)
    ratio = dc.exp(new_logp - mb.old_logp)
    adv = mb.advantages
    surr = dc.minimum(ratio * adv, dc.clip(ratio, 1 - eps, 1 + eps) * adv)
    best = [float(t.outputs[list(r.history)].max()) if r.history else 0.0 for r, t in zip(mb.records, mb.tasks)]
    feats = value_features([r.t for r in mb.records], [r.T for r in mb.records], best)
    err = value_head(w, feats) - mb.returns
    return -surr.mean(), (err * err).mean()


# ----------------------------------------------------------------------------
# state & iteration


@dataclass
class TrainerState:
    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int = 0
    iteration: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainerState":
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return cls(params, zeros, {k: v.copy() for k, v in zeros.items()})


def adam_update(state: TrainerState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> TrainerState:
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.adam_t + 1
    m, v, new = dict(state.adam_m), dict(state.adam_v), {}
    for k, g in grads.items():
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        new[k] = state.params.arrays[k] - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return TrainerState(state.params.replace(new), m, v, t, state.iteration)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


@dataclass
class AugmentCache:
    """Per-task GP fits reused for every augmented draw."""

    kernel: str = "matern52"
    models: dict[str, GPModel] = field(default_factory=dict)

    def draw(self, task: TaskDataset, cfg: TrainConfig, rng: np.random.Generator) -> TaskDataset:
        if task.id not in self.models:
            self.models[task.id] = gp_fit(task, self.kernel, rng=0)
        size = cfg.augment_size or max(task.n, 256)
        return augment(task, self.models[task.id], cfg.augment_perturb, size, rng)


def collect(params: ModelParams, tasks: Sequence[TaskDataset], cfg: TrainConfig, rng: np.random.Generator,
            augment_cache: AugmentCache | None = None) -> tuple[list[Trajectory], list[TaskDataset]]:
    """Sample tasks uniformly and roll out the training policy once on each."""
    picks = rng.integers(0, len(tasks), cfg.trajectories_per_iteration)
    chosen = []
    for k in picks:
        task = tasks[int(k)]
        if cfg.augment:
            task = (augment_cache or AugmentCache()).draw(task, cfg, rng)
        chosen.append(task)
    streams = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63, size=len(chosen))]
    states = [BOState(t, (), 1, cfg.horizon, tuple(range(t.n)), 0) for t in chosen]
    trajs = rollout_batch(params, states, cfg.temperature, streams)
    return trajs, chosen


def build_ppo_batch(trajs: Sequence[Trajectory], cfg: TrainConfig) -> PPOBatch:
    records, tasks, advs, rets, logps = [], [], [], [], []
    for tr in trajs:
        a, r = compute_gae(tr.rewards, tr.values, cfg.gamma, cfg.gae_lambda)
        records += tr.steps
        tasks += [tr.task] * len(tr.steps)
        advs.append(a)
        rets.append(r)
        logps.append(tr.log_probs)
    adv = np.concatenate(advs)
    std = adv.std()
    adv = (adv - adv.mean()) / std if std > 1e-8 else np.zeros_like(adv)
    return PPOBatch(records, tasks, adv, np.concatenate(rets), np.concatenate(logps))


def train_iteration(state: TrainerState, tasks: Sequence[TaskDataset], cfg: TrainConfig,
                    rng: np.random.Generator | None = None,
                    augment_cache: AugmentCache | None = None) -> tuple[TrainerState, dict]:
    if not tasks:
        raise ValueError("train_iteration needs at least one training task")
    it = state.iteration
    rng = rng if rng is not None else iteration_rng(cfg.seed, it)
    plan = ablation_modes(cfg, it, state.params)
    mcfg = state.params.config
    lr = learning_rate_at(cfg, it)
    metrics = {"iteration": it, "lr": lr, "mean_return": None}

    if plan.use_rl:
        trajs, iter_tasks = collect(state.params, tasks, cfg, rng, augment_cache)
        ppo = build_ppo_batch(trajs, cfg)
        metrics["mean_return"] = float(np.mean([discounted_return(t.rewards, cfg.gamma) for t in trajs]))
        n_samples = len(ppo)
    else:
        ppo = None
        picks = rng.integers(0, len(tasks), cfg.trajectories_per_iteration)
        iter_tasks = [tasks[int(k)] for k in picks]
        if cfg.augment:
            cache = augment_cache or AugmentCache()
            iter_tasks = [cache.draw(t, cfg, rng) for t in iter_tasks]
        n_samples = cfg.trajectories_per_iteration * cfg.horizon
    aux_on = plan.use_aux
    aux_w = cfg.aux_weight if aux_on else 0.0

    sums = {"ppo_loss": 0.0, "value_loss": 0.0, "aux_nll": 0.0, "grad_norm": 0.0, "total_loss": 0.0}
    updates = 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            w = state.params.tensors(requires_grad=True, names=plan.trainable)
            with dc.Tape():
                total = dc.Tensor(0.0)
                pl = vl = an = None
                if ppo is not None:
                    pl, vl = ppo_terms(w, mcfg, ppo.subset(idx), cfg.temperature, cfg.clip_eps)
                    total = total + pl + cfg.value_loss_weight * vl
                if aux_on:
                    splits = [(iter_tasks[int(k)], None) for k in rng.integers(0, len(iter_tasks), cfg.aux_splits)]
                    splits = [(d, split_obs_pred(d, rng)) for d, _ in splits]
                    an = aux_nll_tensor(w, mcfg, splits)
                    total = total + aux_w * an
            trainable = {k: t for k, t in w.items() if t.requires_grad}
            try:
                value, grads = dc.value_and_grad(total, trainable)
            except dc.NumericError as err:
                raise TrainingError(f"iteration {it}: {err}") from err
            if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"iteration {it}: non-finite loss or gradient (loss={value})")
            grads, norm = clip_grads(grads, cfg.grad_clip)
            state = adam_update(state, grads, lr, cfg)
            updates += 1
            sums["ppo_loss"] += pl.item() if pl is not None else 0.0
            sums["value_loss"] += vl.item() if vl is not None else 0.0
            sums["aux_nll"] += an.item() if an is not None else 0.0
            sums["grad_norm"] += norm
            sums["total_loss"] += value
    avg = {k: v / updates for k, v in sums.items()}
    metrics.update(
        ppo_loss=avg["ppo_loss"] if plan.use_rl else None,
        value_loss=avg["value_loss"] if plan.use_rl else None,
        aux_nll=avg["aux_nll"] if aux_on else None,
        grad_norm=avg["grad_norm"],
        total_loss=avg["total_loss"],
        aux_weight=aux_w,
        updates=updates,
        val_regret=None,
    )
    state.iteration = it + 1
    return state, metrics


# ----------------------------------------------------------------------------
# full run


def format_metric(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        if new:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([format_metric(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    final: ModelParams
    best: ModelParams
    best_val_regret: float | None
    metrics: list[dict]
    state: TrainerState


def initial_params(model_cfg: ModelConfig, seed: int) -> ModelParams:
    return init_params(model_cfg, np.random.default_rng(np.random.SeedSequence([seed, 2**31])))


def validate(params: ModelParams, val_tasks: Sequence[TaskDataset], cfg: TrainConfig) -> float:
    from .baselines import NAPOptimizer, NPEIOptimizer
    from .evaluate import run_bo

    method = NPEIOptimizer(params) if cfg.mode == "NP-EI" else NAPOptimizer(params)
    finals = [
        run_bo(method, task, cfg.horizon, cfg.val_n_init, seed).regret[-1]
        for task in val_tasks
        for seed in range(cfg.val_seeds)
    ]
    return float(np.mean(finals))


def train(cfg: TrainConfig, model_cfg: ModelConfig, tasks: Sequence[TaskDataset],
          validation_tasks: Sequence[TaskDataset] = (), state: TrainerState | None = None,
          on_iteration: Callable[[TrainerState, dict, bool], None] | None = None,
          best: ModelParams | None = None, best_val: float | None = None) -> TrainResult:
    """Run (or continue) training; ``on_iteration(state, metrics, is_best)`` sees every row.

    When resuming, pass the restored ``state`` and the best-so-far ``best``/``best_val``.
    """
    if state is None:
        state = TrainerState.fresh(initial_params(model_cfg, cfg.seed))
    cache = AugmentCache() if cfg.augment else None
    best = best if best is not None else state.params
    metrics = []
    while state.iteration < cfg.iterations:
        state, row = train_iteration(state, tasks, cfg, augment_cache=cache)
        is_best = False
        last = state.iteration == cfg.iterations
        if validation_tasks and (state.iteration % cfg.val_interval == 0 or last):
            row["val_regret"] = validate(state.params, validation_tasks, cfg)
            if best_val is None or row["val_regret"] < best_val:
                best, best_val, is_best = state.params, row["val_regret"], True
        metrics.append(row)
        log.info("iter %d lr %.2e return %s aux %s val %s", row["iteration"], row["lr"],
                 format_metric(row["mean_return"]), format_metric(row["aux_nll"]), format_metric(row["val_regret"]))
        if on_iteration is not None:
            on_iteration(state, row, is_best)
    if best_val is None:
        best = state.params
    return TrainResult(state.params, best, best_val, metrics, state)

"""Task datasets, context/prediction splits, exact GP surrogates and synthetic task families."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

log = logging.getLogger(__name__)

KERNELS = ("matern52", "se")
JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class TaskDataset:
    """A finite black-box: ``inputs`` (n, D) and ``outputs`` (n,).

    When ``normalized`` is set, ``x_min``/``x_max``/``y_min``/``y_max`` describe the raw data
    so :func:`denormalize` can recover it.
    """

    id: str
    inputs: np.ndarray
    outputs: np.ndarray
    normalized: bool = False
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    y_min: float | None = None
    y_max: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.outputs, dtype=np.float64).ravel()
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"task {self.id}: {x.shape[0]} inputs but {y.shape[0]} outputs")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def normalize(raw: TaskDataset) -> TaskDataset:
    """Per-dimension min-max scaling of inputs and outputs to [0, 1]; constant columns map to 0.5."""
    if raw.n < 2:
        raise ValueError(f"task {raw.id}: need at least 2 points, got {raw.n}")
    if not (np.isfinite(raw.inputs).all() and np.isfinite(raw.outputs).all()):
        raise ValueError(f"task {raw.id}: non-finite values")
    x_min, x_max = raw.inputs.min(axis=0), raw.inputs.max(axis=0)
    y_min, y_max = float(raw.outputs.min()), float(raw.outputs.max())
    return replace(
        raw,
        inputs=_scale(raw.inputs, x_min, x_max),
        outputs=_scale(raw.outputs, y_min, y_max),
        normalized=True,
        x_min=x_min,
        x_max=x_max,
        y_min=y_min,
        y_max=y_max,
    )


def _scale(v, lo, hi):
    span = np.asarray(hi - lo, dtype=np.float64)
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (v - lo) / safe, 0.5)


def denormalize(d: TaskDataset) -> TaskDataset:
    if not d.normalized:
        return d
    x_span = d.x_max - d.x_min
    x = np.where(x_span > 0, d.inputs * x_span + d.x_min, d.x_min)
    y_span = d.y_max - d.y_min
    y = d.outputs * y_span + d.y_min if y_span > 0 else np.full(d.n, d.y_min)
    return replace(d, inputs=x, outputs=y, normalized=False, x_min=None, x_max=None, y_min=None, y_max=None)


# ----------------------------------------------------------------------------
# context / prediction splits


@dataclass(frozen=True)
class SplitPair:
    observed: np.ndarray  # indices into the source dataset
    prediction: np.ndarray

    def arrays(self, d: TaskDataset):
        o, p = self.observed, self.prediction
        return d.inputs[o], d.outputs[o], d.inputs[p], d.outputs[p]


def split_obs_pred(d: TaskDataset, rng: np.random.Generator) -> SplitPair:
    """Uniform context size in {1, ..., n-1}, then a uniform subset of that size."""
    if d.n < 2:
        raise ValueError("split needs at least 2 points")
    c = int(rng.integers(1, d.n))
    perm = rng.permutation(d.n)
    return SplitPair(np.sort(perm[:c]), np.sort(perm[c:]))


# ----------------------------------------------------------------------------
# exact GP


def _scaled_sqdist(a: np.ndarray, b: np.ndarray, ls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = (a[:, None, :] - b[None, :, :]) / ls
    sq = diff * diff
    return sq.sum(-1), sq


def kernel_matrix(kernel: str, a, b, lengthscales, signal_variance: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    r2, _ = _scaled_sqdist(a, b, np.asarray(lengthscales, dtype=np.float64))
    return signal_variance * _kernel_shape(kernel, r2)


def _kernel_shape(kernel: str, r2: np.ndarray) -> np.ndarray:
    if kernel == "se":
        return np.exp(-0.5 * r2)
    if kernel == "matern52":
        r = np.sqrt(np.maximum(r2, 0.0))
        s5r = np.sqrt(5.0) * r
        return (1.0 + s5r + 5.0 / 3.0 * r2) * np.exp(-s5r)
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def _kernel_and_lengthscale_grads(kernel, x, ls, sv):
    """K (no noise) and dK/dlog(lengthscale_d) for every input dimension."""
    r2, sq = _scaled_sqdist(x, x, ls)
    if kernel == "se":
        k = sv * np.exp(-0.5 * r2)
        return k, [k * sq[..., d] for d in range(x.shape[1])]
    if kernel == "matern52":
        r = np.sqrt(np.maximum(r2, 0.0))
        s5r = np.sqrt(5.0) * r
        e = np.exp(-s5r)
        k = sv * (1.0 + s5r + 5.0 / 3.0 * r2) * e
        common = sv * (5.0 / 3.0) * (1.0 + s5r) * e
        return k, [common * sq[..., d] for d in range(x.shape[1])]
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def cholesky_with_jitter(a: np.ndarray, start_with_zero: bool = True) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter*I`` with jitter escalated 1e-10 -> 1e-4."""
    levels = ((0.0,) if start_with_zero else ()) + JITTERS
    eye = np.eye(a.shape[0])
    for j in levels:
        try:
            return np.linalg.cholesky(a + j * eye), j
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("Cholesky failed even with jitter 1e-4")


@dataclass(frozen=True)
class GPModel:
    kernel: str
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    inputs: np.ndarray
    outputs: np.ndarray
    mean: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)
    jitter: float = 0.0

    @classmethod
    def build(cls, kernel, lengthscales, signal_variance, noise_variance, inputs, outputs, mean=0.0) -> "GPModel":
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        y = np.asarray(outputs, dtype=np.float64).ravel()
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (x.shape[1],)).copy()
        k = kernel_matrix(kernel, x, x, ls, signal_variance) + noise_variance * np.eye(len(y))
        chol, jitter = cholesky_with_jitter(k)
        if jitter:
            log.debug("GP Cholesky needed jitter %.0e", jitter)
        alpha = linalg.cho_solve((chol, True), y - mean)
        return cls(kernel, ls, float(signal_variance), float(noise_variance), x, y, float(mean), chol, alpha, jitter)

    def log_marginal_likelihood(self) -> float:
        r = self.outputs - self.mean
        n = len(r)
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum() - 0.5 * n * np.log(2 * np.pi))


def log_marginal_likelihood(kernel, log_params: np.ndarray, x, y, mean: float = 0.0, with_grad: bool = False):
    """LML at ``log_params = [log ls_1..D, log signal_var, log noise_var]`` and optionally its gradient."""
    x = np.atleast_2d(x)
    dim = x.shape[1]
    ls = np.exp(log_params[:dim])
    sv, nv = np.exp(log_params[dim]), np.exp(log_params[dim + 1])
    kf, dls = _kernel_and_lengthscale_grads(kernel, x, ls, sv)
    n = len(y)
    chol, jitter = cholesky_with_jitter(kf + nv * np.eye(n))
    r = y - mean
    alpha = linalg.cho_solve((chol, True), r)
    lml = -0.5 * r @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * np.log(2 * np.pi)
    if not with_grad:
        return float(lml)
    kinv = linalg.cho_solve((chol, True), np.eye(n))
    inner = np.outer(alpha, alpha) - kinv
    grads = [0.5 * np.sum(inner * dk) for dk in dls]
    grads.append(0.5 * np.sum(inner * kf))
    grads.append(0.5 * nv * np.trace(inner))
    return float(lml), np.array(grads)


LOG_BOUNDS = {
    "lengthscale": (np.log(1e-3), np.log(1e2)),
    "signal": (np.log(1e-4), np.log(1e2)),
    "noise": (np.log(1e-8), np.log(1e1)),
}


def _bounds(dim: int):
    return [LOG_BOUNDS["lengthscale"]] * dim + [LOG_BOUNDS["signal"], LOG_BOUNDS["noise"]]


def _maximise_lml(objective, starts, dim, steps):
    results = []
    for s in starts:
        try:
            res = optimize.minimize(objective, s, jac=True, method="L-BFGS-B", bounds=_bounds(dim),
                                    options={"maxiter": steps})
        except np.linalg.LinAlgError:
            continue
        results.append((-float(res.fun), res.x))
    if not results:
        raise np.linalg.LinAlgError("GP fit failed for every restart")
    return results


def gp_fit(d: TaskDataset, kernel: str = "matern52", restarts: int = 8, steps: int = 200,
           rng: np.random.Generator | int = 0, init: np.ndarray | None = None,
           return_restarts: bool = False):
    """Type-II maximum likelihood with multi-start L-BFGS in log space.

    The constant mean is fixed at the output mean. ``init`` (log parameters) becomes the
    first start when given.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    rng = np.random.default_rng(rng)
    x, y = d.inputs, d.outputs
    dim = x.shape[1]
    mean = float(y.mean())
    var = max(float(y.var()), 1e-4)

    def objective(p):
        lml, g = log_marginal_likelihood(kernel, p, x, y, mean, with_grad=True)
        return -lml, -g

    starts = [] if init is None else [np.asarray(init, dtype=np.float64)]
    starts.append(np.concatenate([np.full(dim, np.log(0.2)), [np.log(var), np.log(1e-3 * var)]]))
    while len(starts) < restarts:
        starts.append(np.concatenate([
            rng.uniform(np.log(0.02), np.log(2.0), dim),
            [np.log(var) + rng.uniform(-1.0, 1.0), rng.uniform(np.log(1e-6), np.log(1e-1))],
        ]))
    bounds = np.array(_bounds(dim))
    starts = [np.clip(s, bounds[:, 0], bounds[:, 1]) for s in starts[:restarts]]
    results = _maximise_lml(objective, starts, dim, steps)
    best_lml, best = max(results, key=lambda r: r[0])
    model = GPModel.build(kernel, np.exp(best[:dim]), np.exp(best[dim]), np.exp(best[dim + 1]), x, y, mean)
    if return_restarts:
        return model, [r[0] for r in results]
    return model


def gp_fit_shared(tasks: Sequence[TaskDataset], kernel: str = "matern52", restarts: int = 4,
                  steps: int = 200, rng: np.random.Generator | int = 0) -> np.ndarray:
    """Log hyperparameters maximising the summed LML of several tasks (each with its own mean)."""
    rng = np.random.default_rng(rng)
    dim = tasks[0].dim

    def objective(p):
        total, grad = 0.0, np.zeros_like(p)
        for t in tasks:
            lml, g = log_marginal_likelihood(kernel, p, t.inputs, t.outputs, float(t.outputs.mean()), True)
            total += lml
            grad += g
        return -total, -grad

    var = float(np.mean([max(t.outputs.var(), 1e-4) for t in tasks]))
    starts = [np.concatenate([np.full(dim, np.log(0.2)), [np.log(var), np.log(1e-3 * var)]])]
    while len(starts) < restarts:
        starts.append(np.concatenate([
            rng.uniform(np.log(0.02), np.log(2.0), dim),
            [np.log(var) + rng.uniform(-1.0, 1.0), rng.uniform(np.log(1e-6), np.log(1e-1))],
        ]))
    results = _maximise_lml(objective, starts, dim, steps)
    return max(results, key=lambda r: r[0])[1]


def gp_posterior(m: GPModel, x_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the latent function at ``x_star``."""
    xs = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    if xs.shape[1] != m.inputs.shape[1]:
        xs = xs.reshape(-1, m.inputs.shape[1])
    ks = kernel_matrix(m.kernel, m.inputs, xs, m.lengthscales, m.signal_variance)
    kss = kernel_matrix(m.kernel, xs, xs, m.lengthscales, m.signal_variance)
    mean = m.mean + ks.T @ m.alpha
    v = linalg.solve_triangular(m.chol, ks, lower=True)
    cov = kss - v.T @ v
    return mean, 0.5 * (cov + cov.T)


def gp_sample(m: GPModel, x_star, rng: np.random.Generator) -> np.ndarray:
    """One joint posterior draw.

    Uses the symmetric eigen square root with negative round-off eigenvalues clipped, so
    directions of zero posterior variance (noiseless training points) are reproduced exactly.
    """
    mean, cov = gp_posterior(m, x_star)
    evals, evecs = np.linalg.eigh(cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return mean + root @ rng.standard_normal(len(mean))


def augment(d: TaskDataset, m: GPModel, perturb: float = 0.05, size: int | None = None,
            rng: np.random.Generator | int = 0, base_indices: np.ndarray | None = None,
            renormalize: bool = True) -> TaskDataset:
    """Resample a dataset from the GP posterior at jittered copies of the original inputs."""
    if perturb < 0:
        raise ValueError("perturb must be non-negative")
    rng = np.random.default_rng(rng)
    size = max(d.n, 256) if size is None else size
    idx = rng.integers(0, d.n, size) if base_indices is None else np.asarray(base_indices)
    x = d.inputs[idx] + rng.uniform(-perturb, perturb, size=(len(idx), d.dim))
    x = np.clip(x, 0.0, 1.0)
    y = gp_sample(m, x, rng)
    if renormalize:
        y = _scale(y, y.min(), y.max())
    return TaskDataset(f"{d.id}+aug", x, y, normalized=True, meta=dict(d.meta, augmented=True))


def synthetic_family(seed: int, K: int, n: int, D: int, kernel: str = "matern52",
                     lengthscale_range: tuple[float, float] = (0.05, 0.5)) -> list[TaskDataset]:
    """K GP-prior tasks on uniform random inputs, normalised, deterministic in ``seed``."""
    if K < 1 or n < 2:
        raise ValueError("synthetic_family needs K >= 1 and n >= 2")
    lo, hi = lengthscale_range
    rng = np.random.default_rng(seed)
    tasks = []
    for k in range(K):
        ls = np.exp(rng.uniform(np.log(lo), np.log(hi), D))
        x = rng.uniform(0.0, 1.0, (n, D))
        cov = kernel_matrix(kernel, x, x, ls, 1.0)
        chol, _ = cholesky_with_jitter(cov)
        y = chol @ rng.standard_normal(n)
        raw = TaskDataset(f"gp{seed}-{k:03d}", x, y, meta={"lengthscales": ls.tolist(), "kernel": kernel})
        tasks.append(normalize(raw))
    return tasks


# ----------------------------------------------------------------------------
# files


def write_task_csv(d: TaskDataset, path: str | Path) -> None:
    raw = denormalize(d)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(raw.dim)] + ["y"])
        for xi, yi in zip(raw.inputs, raw.outputs):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def read_task_csv(path: str | Path, task_id: str | None = None) -> TaskDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty task file")
    header = rows[0]
    if not header or header[-1] != "y" or header[:-1] != [f"x_{i + 1}" for i in range(len(header) - 1)]:
        raise ValueError(f"{path}: header must be x_1..x_D,y, got {header}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as err:
        raise ValueError(f"{path}: {err}") from err
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return TaskDataset(task_id or path.stem, data[:, :-1], data[:, -1])


@dataclass
class Manifest:
    tasks: dict[str, str]  # id -> relative file name
    split: dict[str, list[str]]
    root: Path = Path(".")

    def load(self, part: str) -> list[TaskDataset]:
        if part not in self.split:
            raise KeyError(f"manifest has no split {part!r}")
        return [normalize(read_task_csv(self.root / self.tasks[i], i)) for i in self.split[part]]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "tasks": [{"id": k, "file": v} for k, v in self.tasks.items()],
            "split": self.split,
        }


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    tasks = {t["id"]: t["file"] for t in doc["tasks"]}
    split = {k: list(v) for k, v in doc["split"].items()}
    unknown = [i for ids in split.values() for i in ids if i not in tasks]
    if unknown:
        raise ValueError(f"{path}: split references unknown tasks {unknown[:5]}")
    return Manifest(tasks, split, path.parent)


def split_counts(k: int, proportions: Sequence[int] = (6, 1, 1)) -> tuple[int, int, int]:
    """Train/val/test counts for ``k`` tasks, each part non-empty when k >= 3."""
    total = sum(proportions)
    val = max(1, round(k * proportions[1] / total)) if k >= 3 else 0
    test = max(1, round(k * proportions[2] / total)) if k >= 3 else 0
    return k - val - test, val, test


def write_family(tasks: Sequence[TaskDataset], out: str | Path, counts: tuple[int, int, int] | None = None) -> Manifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    counts = counts or split_counts(len(tasks))
    if sum(counts) != len(tasks):
        raise ValueError(f"split {counts} does not cover {len(tasks)} tasks")
    files = {}
    for t in tasks:
        name = f"{t.id}.csv"
        write_task_csv(t, out / name)
        files[t.id] = name
    ids = [t.id for t in tasks]
    a, b = counts[0], counts[0] + counts[1]
    manifest = Manifest(files, {"train": ids[:a], "val": ids[a:b], "test": ids[b:]}, out)
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest

"""Command-line entry point: gen-tasks, train, eval, sparsity, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from .architecture import ModelConfig
from .checkpoint import Checkpoint, CheckpointError, describe, load_checkpoint, read_header, rng_digest, save_checkpoint
from .trainer import (
    MetricsWriter,
    TrainConfig,
    TrainerState,
    TrainingError,
    read_metrics,
    train,
)

log = logging.getLogger("nap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("nap", "np-ei", "gp-ei", "random")


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(ValueError):
    pass


# ----------------------------------------------------------------------------
# run configuration

# derived from the task manifest or tied to a training key
_MODEL_DERIVED = ("input_dim", "softmax_temperature_train")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in _MODEL_DERIVED)
PATH_KEYS = ("tasks", "out")


@dataclass
class RunConfig:
    train: TrainConfig
    model: dict  # ModelConfig fields except the derived ones
    tasks: str | None = None
    out: str | None = None

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, softmax_temperature_train=self.train.temperature, **self.model)

    def to_json(self) -> dict:
        doc = self.train.to_dict()
        doc.update(self.model)
        doc.update(tasks=self.tasks, out=self.out)
        return doc


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a flat config dict, collecting every problem before failing."""
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    problems = []
    known = set(TRAIN_KEYS) | set(MODEL_KEYS) | set(PATH_KEYS)
    for key in sorted(set(doc) - known):
        problems.append(f"unknown key {key!r}")
    train_defaults = {f.name: f.default for f in fields(TrainConfig)}
    model_defaults = {f.name: f.default for f in fields(ModelConfig) if f.name not in _MODEL_DERIVED}
    typed = {}
    for key, value in doc.items():
        if key in PATH_KEYS or key not in known:
            continue
        default = train_defaults.get(key, model_defaults.get(key))
        if not _type_ok(value, default):
            problems.append(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
        else:
            typed[key] = float(value) if isinstance(default, float) else value
    for key in PATH_KEYS:
        if doc.get(key) is not None and not isinstance(doc[key], str):
            problems.append(f"{key}: expected a path string")
    train_kw = {**train_defaults, **{k: v for k, v in typed.items() if k in TRAIN_KEYS}}
    model = {**model_defaults, **{k: v for k, v in typed.items() if k in MODEL_KEYS}}
    tc = None
    try:
        tc = TrainConfig(**train_kw)
    except ValueError as err:
        problems += str(err).split("; ")
    try:
        ModelConfig(input_dim=1, softmax_temperature_train=train_kw["temperature"] if tc else 1.0, **model)
    except ValueError as err:
        problems.append(str(err))
    if problems:
        raise ConfigError(problems)
    return RunConfig(tc, model, doc.get("tasks"), doc.get("out"))


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError([f"cannot read config {path}: {err}"]) from err
    except json.JSONDecodeError as err:
        raise ConfigError([f"{path}: invalid JSON ({err})"]) from err
    return parse_run_config(doc)


def resolve_seed(flag: int | None, default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("NAP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError([f"NAP_SEED must be an integer, got {env!r}"]) from None
    return default


# ----------------------------------------------------------------------------
# commands


def _load_split(manifest_path, part: str):
    from .tasks import read_manifest

    try:
        manifest = read_manifest(manifest_path)
        tasks = manifest.load(part) if manifest.split.get(part) else []
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load {part} tasks from {manifest_path}: {err}") from err
    return tasks


def cmd_gen_tasks(args) -> int:
    from .tasks import synthetic_family, write_family

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    seed = resolve_seed(args.seed, 0)
    tasks = synthetic_family(seed, args.num_tasks, args.points, args.dim, args.kernel)
    counts = tuple(args.split) if args.split else None
    try:
        manifest = write_family(tasks, out, counts)
    except OSError as err:
        raise DataError(f"cannot write tasks to {out}: {err}") from err
    print(f"wrote {len(tasks)} tasks to {out} "
          f"(train {len(manifest.split['train'])}, val {len(manifest.split['val'])}, test {len(manifest.split['test'])})")
    return EXIT_OK


def _metrics_rows(path: Path) -> int:
    return len(read_metrics(path)) if path.exists() else 0


def _truncate_metrics(path: Path, keep: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[: keep + 1]))


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    overrides = {}
    if args.tasks:
        run.tasks = args.tasks
    if args.out:
        run.out = args.out
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.mode is not None:
        overrides["mode"] = args.mode
    seed = resolve_seed(args.seed, run.train.seed)
    overrides["seed"] = seed
    run = parse_run_config({**run.to_json(), **overrides})
    missing = [k for k in PATH_KEYS if not getattr(run, k)]
    if missing:
        raise ConfigError([f"{k} must be given in the config or on the command line" for k in missing])

    train_tasks = _load_split(run.tasks, "train")
    val_tasks = _load_split(run.tasks, "val")
    if not train_tasks:
        raise DataError(f"{run.tasks}: empty train split")
    dims = {t.dim for t in train_tasks + val_tasks}
    if len(dims) != 1:
        raise DataError(f"{run.tasks}: tasks have mixed input dimensions {sorted(dims)}")
    model_cfg = run.model_config(dims.pop())
    cfg = run.train

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, last_path = out / "metrics.csv", out / "last.ckpt"
    state, best, best_val = None, None, None
    if args.resume and last_path.exists():
        ck = load_checkpoint(last_path)
        stored = ck.extra.get("run_config", {})
        if {k: v for k, v in stored.items() if k not in ("iterations",)} != \
                {k: v for k, v in run.to_json().items() if k not in ("iterations",)}:
            raise ConfigError([f"{last_path} was written with a different configuration"])
        if ck.params.config != model_cfg:
            raise ConfigError([f"{last_path}: model configuration does not match"])
        m = {k[2:]: v for k, v in ck.optimizer.items() if k.startswith("m/")}
        v = {k[2:]: v for k, v in ck.optimizer.items() if k.startswith("v/")}
        state = TrainerState(ck.params, m, v, int(ck.extra["adam_t"]), ck.iteration)
        best_val = ck.extra.get("best_val_regret")
        best_path = out / "best.ckpt"
        best = load_checkpoint(best_path).params if best_val is not None and best_path.exists() else None
        if _metrics_rows(metrics_path) < ck.iteration:
            raise DataError(f"{metrics_path} has fewer rows than the checkpoint iteration {ck.iteration}")
        _truncate_metrics(metrics_path, ck.iteration)
        writer = MetricsWriter(metrics_path, append=True)
        log.info("resuming %s at iteration %d", out, ck.iteration)
    else:
        writer = MetricsWriter(metrics_path)
    (out / "config.json").write_text(json.dumps(run.to_json(), indent=2, sort_keys=True) + "\n")
    tracker = {"best_val": best_val}

    def extra(st: TrainerState) -> dict:
        return {"run_config": run.to_json(), "adam_t": st.adam_t, "best_val_regret": tracker["best_val"]}

    def on_iteration(st: TrainerState, row: dict, is_best: bool) -> None:
        writer.write(row)
        if is_best:
            tracker["best_val"] = row["val_regret"]
            save_checkpoint(Checkpoint(st.params, cfg.mode, st.iteration, extra(st)), out / "best.ckpt")
        opt = {**{f"m/{k}": a for k, a in st.adam_m.items()}, **{f"v/{k}": a for k, a in st.adam_v.items()}}
        save_checkpoint(Checkpoint(st.params, cfg.mode, st.iteration, extra(st), opt, "float64",
                                   rng_digest(cfg.seed, st.iteration)), last_path)

    result = train(cfg, model_cfg, train_tasks, val_tasks, state, on_iteration, best, best_val)
    final = Checkpoint(result.final, cfg.mode, result.state.iteration, extra(result.state))
    save_checkpoint(final, out / "final.ckpt")
    if result.best_val_regret is None:
        save_checkpoint(final, out / "best.ckpt")
    print(f"trained {cfg.mode} for {result.state.iteration} iterations; "
          f"best validation regret {result.best_val_regret}; outputs in {out}")
    return EXIT_OK


def _mode_label(mode: str) -> str:
    return mode.lower()


def build_methods(names: Sequence[str], ckpts: Sequence[Checkpoint], train_tasks, input_dim: int,
                  kernel: str = "matern52") -> list:
    from .baselines import GPEI, NAPOptimizer, NPEIOptimizer, RandomSearch
    from .tasks import gp_fit_shared

    methods = []
    for ck in ckpts:
        if ck.params.config.input_dim != input_dim:
            raise DataError(f"checkpoint input dimension {ck.params.config.input_dim} "
                            f"does not match task dimension {input_dim}")
    for name in names:
        if name == "random":
            methods.append(RandomSearch())
        elif name == "gp-ei":
            if not train_tasks:
                raise DataError("gp-ei needs a train split to initialise its hyperparameters")
            methods.append(GPEI(gp_fit_shared(train_tasks, kernel), kernel))
        elif name == "nap":
            chosen = [ck for ck in ckpts if ck.mode != "NP-EI"]
            if not chosen:
                raise ConfigError(["method nap needs --ckpt with a NAP, NAP-RL or Pre-NAP checkpoint"])
            methods += [NAPOptimizer(ck.params, _mode_label(ck.mode)) for ck in chosen]
        elif name == "np-ei":
            chosen = [ck for ck in ckpts if ck.mode == "NP-EI"]
            if not chosen:
                raise ConfigError(["method np-ei needs --ckpt with an NP-EI checkpoint"])
            methods += [NPEIOptimizer(ck.params) for ck in chosen[:1]]
        else:
            raise ConfigError([f"unknown method {name!r}; expected one of {METHODS}"])
    labels = [m.name for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError([f"duplicate method labels {labels}; pass one checkpoint per mode"])
    return methods


def cmd_eval(args) -> int:
    from .evaluate import aggregate, emit, evaluate_methods, summary_table

    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad:
        raise ConfigError([f"unknown method {m!r}; expected one of {METHODS}" for m in bad])
    if any(m in ("nap", "np-ei") for m in names) and not args.ckpt:
        raise ConfigError(["--ckpt is required for methods nap and np-ei"])
    if args.seeds < 1 or args.budget < 1 or args.init < 0:
        raise ConfigError(["--seeds and --budget must be positive and --init non-negative"])
    ckpts = [load_checkpoint(p) for p in args.ckpt or []]
    tasks = _load_split(args.tasks, args.split)
    if not tasks:
        raise DataError(f"{args.tasks}: empty {args.split} split")
    train_tasks = _load_split(args.tasks, "train") if "gp-ei" in names else []
    methods = build_methods(names, ckpts, train_tasks, tasks[0].dim)
    base = resolve_seed(args.seed, 0)
    curves = evaluate_methods(methods, tasks, args.budget, args.init, range(base, base + args.seeds))
    csv_path, svg_path = emit(curves, args.out)
    print(summary_table(aggregate(curves)))
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def cmd_sparsity(args) -> int:
    from .sparsity import (
        MAX_ENUMERATE_T,
        exact_record_distribution,
        harmonic,
        monte_carlo_records,
        policy_record_profile,
        total_variation,
    )

    if any(t < 1 for t in args.T):
        raise ConfigError(["--T values must be >= 1"])
    if args.exact and max(args.T) > MAX_ENUMERATE_T:
        raise ConfigError([f"--exact supports T <= {MAX_ENUMERATE_T}"])
    if args.trials < 1:
        raise ConfigError(["--trials must be >= 1"])
    seed = resolve_seed(args.seed, 0)
    policy = None
    if args.ckpt:
        ck = load_checkpoint(args.ckpt)
        policy_tasks = _load_split(args.tasks, "train") if args.tasks else None
        if policy_tasks is None:
            from .tasks import synthetic_family
            policy_tasks = synthetic_family(seed, 8, 64, ck.params.config.input_dim)
        if policy_tasks[0].dim != ck.params.config.input_dim:
            raise DataError(f"checkpoint input dimension {ck.params.config.input_dim} "
                            f"does not match task dimension {policy_tasks[0].dim}")
        policy = (ck.params, policy_tasks)

    cols = ["T", "exact_mean", "mc_mean", "mc_stderr", "trials"]
    if args.exact:
        cols.append("tv_exact")
    if policy:
        cols.append("policy_mean")
    print("\t".join(cols))
    extra_lines = []
    for T in args.T:
        mc_mean, dist = monte_carlo_records(T, args.trials, np.random.SeedSequence([seed, T]))
        row = [str(T), f"{harmonic(T):.6f}", f"{mc_mean:.6f}", f"{dist.stderr:.6f}", str(args.trials)]
        if args.exact:
            exact = exact_record_distribution(T)
            row.append(f"{total_variation(exact, dist):.6f}")
            probs = ", ".join(f"P({k})={Fraction(p)}" for k, p in exact.probabilities().items())
            extra_lines.append(f"T={T} exact: {probs}")
        if policy:
            pm = policy_record_profile(policy[0], policy[1], T, args.episodes, np.random.SeedSequence([seed, T, 1]))
            row.append(f"{pm:.6f}")
        print("\t".join(row))
    for line in extra_lines:
        print(line)
    return EXIT_OK


def cmd_inspect(args) -> int:
    header, _ = read_header(args.ckpt)
    print(describe(header))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nap", description="Learned acquisition processes for meta-BO on finite task sets.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tasks", help="generate a synthetic GP task family")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--num-tasks", type=int, default=8)
    g.add_argument("--points", type=int, default=64)
    g.add_argument("--dim", type=int, default=1)
    g.add_argument("--kernel", choices=("matern52", "se"), default="matern52")
    g.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"), default=None,
                   help="explicit task counts (default: 6/1/1 proportions)")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_tasks)

    t = sub.add_parser("train", help="train a model on a task manifest")
    t.add_argument("--config", default=None, help="flat JSON run configuration")
    t.add_argument("--tasks", default=None, help="task directory or manifest.json")
    t.add_argument("--out", default=None)
    t.add_argument("--mode", choices=("NAP", "NAP-RL", "NP-EI", "Pre-NAP"), default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run BO with trained and baseline methods")
    e.add_argument("--ckpt", action="append", default=None, help="checkpoint (repeatable, one per mode)")
    e.add_argument("--tasks", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--budget", type=int, default=12)
    e.add_argument("--init", type=int, default=5)
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--seed", type=int, default=None, help="first seed (default 0)")
    e.add_argument("--methods", default="nap,gp-ei,random")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sparsity", help="record statistics of random and learned policies")
    s.add_argument("--T", type=int, nargs="+", required=True)
    s.add_argument("--trials", type=int, default=100000)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--ckpt", default=None)
    s.add_argument("--tasks", default=None, help="manifest for the policy profile (train split)")
    s.add_argument("--episodes", type=int, default=1000)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_sparsity)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, dc.NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

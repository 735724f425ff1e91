"""BO evaluation harness: regret curves, aggregation, CSV and SVG output."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.etree import ElementTree as ET

import numpy as np

from .environment import reset, step
from .tasks import TaskDataset

CSV_COLUMNS = ("method", "task", "seed", "step", "best_y", "regret")
Z95 = 1.96


@dataclass(frozen=True)
class RegretCurve:
    task: str
    method: str
    seed: int
    best_y: np.ndarray
    regret: np.ndarray

    def __len__(self) -> int:
        return len(self.regret)


def normalized_regret(best_so_far, task: TaskDataset):
    lo, hi = float(task.outputs.min()), float(task.outputs.max())
    if hi == lo:
        raise ValueError(f"task {task.id} has constant outputs; regret is undefined")
    r = (hi - np.asarray(best_so_far, dtype=np.float64)) / (hi - lo)
    return float(r) if r.ndim == 0 else r


def episode_seeds(task: TaskDataset, seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Initial-point and method streams; identical across methods for a (task, seed) cell."""
    root = np.random.SeedSequence([seed, zlib.crc32(task.id.encode())])
    init_seq, method_seq = root.spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(method_seq)


def run_bo(method, task: TaskDataset, T: int, n_init: int, seed: int) -> RegretCurve:
    """Run ``T`` greedy acquisitions after ``n_init`` random initial points."""
    if T < 1:
        raise ValueError("budget must be >= 1")
    if n_init + T > task.n:
        raise ValueError(f"task {task.id}: n_init + T = {n_init + T} exceeds {task.n} points")
    init_rng, method_rng = episode_seeds(task, seed)
    state = reset(task, n_init, init_rng, budget=T)
    method.start_episode(task)
    best = []
    for _ in range(T):
        action = method.select(state, method_rng)
        state, reward, _ = step(state, action)
        best.append(reward)
    best = np.array(best)
    return RegretCurve(task.id, method.name, seed, best, normalized_regret(best, task))


def evaluate_methods(methods: Iterable, tasks: Sequence[TaskDataset], T: int, n_init: int,
                     seeds: Iterable[int]) -> list[RegretCurve]:
    seeds = list(seeds)
    return [run_bo(m, t, T, n_init, s) for m in methods for t in tasks for s in seeds]


@dataclass(frozen=True)
class AggregateCurve:
    method: str
    mean: np.ndarray
    stderr: np.ndarray
    count: int

    @property
    def lower(self) -> np.ndarray:
        return self.mean - Z95 * self.stderr

    @property
    def upper(self) -> np.ndarray:
        return self.mean + Z95 * self.stderr


def aggregate(curves: Sequence[RegretCurve]) -> dict[str, AggregateCurve]:
    """Per-method mean regret and normal-approximation 95% interval at each step."""
    groups: dict[str, list[RegretCurve]] = {}
    for c in curves:
        groups.setdefault(c.method, []).append(c)
    out = {}
    for name in sorted(groups):
        group = sorted(groups[name], key=lambda c: (c.task, c.seed))
        if len(group) < 2:
            raise ValueError(f"method {name}: need at least 2 curves to aggregate, got {len(group)}")
        lengths = {len(c) for c in group}
        if len(lengths) != 1:
            raise ValueError(f"method {name}: curves have different lengths {sorted(lengths)}")
        r = np.stack([c.regret for c in group])
        out[name] = AggregateCurve(name, r.mean(axis=0), r.std(axis=0, ddof=1) / np.sqrt(len(group)), len(group))
    return out


def write_csv(curves: Sequence[RegretCurve], path: str | Path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for c in curves:
                for t, (b, r) in enumerate(zip(c.best_y, c.regret), start=1):
                    w.writerow([c.method, c.task, c.seed, t, repr(float(b)), repr(float(r))])
    except OSError as err:
        raise OSError(f"cannot write regret CSV {path}: {err}") from err
    return path


def read_csv(path: str | Path) -> list[RegretCurve]:
    rows: dict[tuple, list] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["task"], int(row["seed"]))
            rows.setdefault(key, []).append((int(row["step"]), float(row["best_y"]), float(row["regret"])))
    curves = []
    for (method, task, seed), items in rows.items():
        items.sort()
        curves.append(RegretCurve(task, method, seed, np.array([i[1] for i in items]), np.array([i[2] for i in items])))
    return curves


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def write_svg(summary: Mapping[str, AggregateCurve], path: str | Path, width: int = 640, height: int = 400) -> Path:
    """Mean regret per method as a polyline with its interval as a shaded polygon."""
    path = Path(path)
    left, right, top, bottom = 60, 140, 20, 50
    pw, ph = width - left - right, height - top - bottom
    steps = max(len(a.mean) for a in summary.values())
    ymax = max(1.0, max(float(a.upper.max()) for a in summary.values()))
    ymin = min(0.0, min(float(a.lower.min()) for a in summary.values()))

    def sx(t):
        return left + (t - 1) / max(steps - 1, 1) * pw

    def sy(v):
        return top + (ymax - v) / (ymax - ymin) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "line", x1=str(left), y1=str(top + ph), x2=str(left + pw), y2=str(top + ph), stroke="black")
    ET.SubElement(svg, "line", x1=str(left), y1=str(top), x2=str(left), y2=str(top + ph), stroke="black")
    for v in np.linspace(ymin, ymax, 5):
        ET.SubElement(svg, "text", x=str(left - 6), y=f"{sy(v) + 4:.1f}", **{"text-anchor": "end", "font-size": "11"}).text = f"{v:.2f}"
    for t in sorted({1, steps, *range(1, steps + 1, max(1, steps // 6))}):
        ET.SubElement(svg, "text", x=f"{sx(t):.1f}", y=str(top + ph + 16), **{"text-anchor": "middle", "font-size": "11"}).text = str(t)
    ET.SubElement(svg, "text", x=str(left + pw / 2), y=str(height - 10), **{"text-anchor": "middle", "font-size": "12"}).text = "BO step"
    ET.SubElement(svg, "text", x="14", y=str(top + ph / 2), transform=f"rotate(-90 14 {top + ph / 2})",
                  **{"text-anchor": "middle", "font-size": "12"}).text = "normalized regret"
    for i, (name, a) in enumerate(summary.items()):
        colour = PALETTE[i % len(PALETTE)]
        ts = np.arange(1, len(a.mean) + 1)
        band = [(sx(t), sy(v)) for t, v in zip(ts, a.upper)] + [(sx(t), sy(v)) for t, v in zip(ts[::-1], a.lower[::-1])]
        ET.SubElement(svg, "polygon", points=" ".join(f"{x:.2f},{y:.2f}" for x, y in band),
                      fill=colour, **{"fill-opacity": "0.15", "stroke": "none"})
        ET.SubElement(svg, "polyline", points=" ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in zip(ts, a.mean)),
                      fill="none", stroke=colour, **{"stroke-width": "2", "data-method": name})
        ly = top + 16 * i + 10
        ET.SubElement(svg, "line", x1=str(left + pw + 10), y1=str(ly), x2=str(left + pw + 30), y2=str(ly),
                      stroke=colour, **{"stroke-width": "2"})
        ET.SubElement(svg, "text", x=str(left + pw + 35), y=str(ly + 4), **{"font-size": "11"}).text = name
    try:
        ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    except OSError as err:
        raise OSError(f"cannot write regret plot {path}: {err}") from err
    return path


def emit(curves: Sequence[RegretCurve], out_path: str | Path) -> tuple[Path, Path]:
    """Write ``regret.csv`` and ``regret.svg`` into the directory ``out_path``."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err
    csv_path = write_csv(curves, out / "regret.csv")
    svg_path = write_svg(aggregate(curves), out / "regret.svg")
    return csv_path, svg_path


def summary_table(summary: Mapping[str, AggregateCurve]) -> str:
    lines = [f"{'method':<12} {'n':>4} {'final_regret':>13} {'ci_low':>9} {'ci_high':>9}"]
    for name, a in summary.items():
        lines.append(f"{name:<12} {a.count:>4} {a.mean[-1]:>13.4f} {a.lower[-1]:>9.4f} {a.upper[-1]:>9.4f}")
    return "\n".join(lines)

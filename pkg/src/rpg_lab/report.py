"""Learning-curve SVGs and cross-algorithm comparison tables from run outputs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trainer import read_metrics

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 800, 500
MARGIN = (70, 30, 30, 60)  # left, right, top, bottom


class ReportError(ValueError):
    pass


def load_series(paths, x_key: str = "episodes") -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for p in paths:
        try:
            rows = read_metrics(p)
        except (ValueError, KeyError) as exc:
            raise ReportError(f"{p}: {exc}") from exc
        out.append((np.array([r[x_key] for r in rows], dtype=float), np.array([r["mean_return"] for r in rows])))
    return out


def aggregate(series) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean, min and max across series at every x any series reports."""
    xs = np.unique(np.concatenate([s[0] for s in series]))
    mean, lo, hi = [], [], []
    for x in xs:
        ys = [s[1][s[0] == x][0] for s in series if np.any(s[0] == x)]
        mean.append(float(np.mean(ys)))
        lo.append(float(np.min(ys)))
        hi.append(float(np.max(ys)))
    return xs, np.array(mean), np.array(lo), np.array(hi)


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def render_svg(groups: dict[str, list], x_label: str = "episodes", title: str = "") -> str:
    """One mean line per label with a shaded min-max band when it has several series."""
    aggs = {k: aggregate(v) for k, v in groups.items()}
    all_x = np.concatenate([a[0] for a in aggs.values()])
    all_y = np.concatenate([np.concatenate([a[2], a[3]]) for a in aggs.values()])
    x0, x1 = float(all_x.min()), float(all_x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _nice_ticks(x0, x1):
        if x0 <= t <= x1:
            out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" stroke="#444"/>')
            out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        if y0 <= t <= y1:
            out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" stroke="#444"/>')
            out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">{x_label}</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.2f})">mean return</text>')
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="20" text-anchor="middle">{title}</text>')
    for i, (label, (xs, mean, lo, hi)) in enumerate(sorted(aggs.items())):
        color = PALETTE[i % len(PALETTE)]
        if len(groups[label]) > 1:
            pts = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, hi)]
            pts += [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, mean))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 16 + 16 * i
        out.append(f'<line x1="{left + 10}" y1="{ly - 4}" x2="{left + 30}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + 36}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- comparison ---------------------------------------------------------------

def find_summaries(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_file() and p.name == "summary.json":
            found.append(p)
        elif (p / "summary.json").is_file():
            found.append(p / "summary.json")
        elif p.is_dir():
            found.extend(sorted(p.glob("*/summary.json")))
        else:
            raise ReportError(f"{p}: no summary.json found")
    if not found:
        raise ReportError("no summary.json files found")
    return found


@dataclass
class CompareRow:
    algo: str
    n_seeds: int
    n_solved: int
    median_samples: float
    mean_samples: float
    final_mean: float
    final_se: float | None


def compare(summaries: list[dict]) -> tuple[str, list[CompareRow]]:
    envs = sorted({s["env_id"] for s in summaries})
    if len(envs) != 1:
        raise ReportError(f"summaries mix environments: {', '.join(envs)}")
    rows = []
    for algo in sorted({s["algo"] for s in summaries}):
        runs = [s for s in summaries if s["algo"] == algo]
        sus = [s["samples_until_solve"] if s["solved"] else math.inf for s in runs]
        finals = np.array([s["final_eval"]["mean"] for s in runs], dtype=float)
        se = float(finals.std(ddof=1) / np.sqrt(len(finals))) if len(finals) > 1 else None
        solved = [v for v in sus if v != math.inf]
        rows.append(CompareRow(algo, len(runs), len(solved), float(np.median(sus)),
                               float(np.mean(solved)) if solved else math.inf, float(finals.mean()), se))
    return envs[0], rows


def _num(v: float | None, digits: int = 1) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "unsolved"
    return f"{v:.{digits}f}"


def compare_csv(rows: list[CompareRow]) -> str:
    lines = ["algo,n_seeds,n_solved,median_samples_until_solve,mean_samples_until_solve,final_return_mean,"
             "final_return_se"]
    for r in rows:
        lines.append(",".join([r.algo, str(r.n_seeds), str(r.n_solved), _num(r.median_samples),
                               _num(r.mean_samples), _num(r.final_mean, 2), _num(r.final_se, 2)]))
    return "\n".join(lines) + "\n"


def compare_table(env_id: str, rows: list[CompareRow]) -> str:
    head = ["algorithm", "solved", "median episodes to solve", "mean episodes to solve", "final return"]
    body = []
    for r in rows:
        final = _num(r.final_mean, 1) + ("" if r.final_se is None else f" ± {r.final_se:.1f}")
        body.append([r.algo, f"{r.n_solved}/{r.n_seeds}", _num(r.median_samples), _num(r.mean_samples), final])
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [env_id, fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines) + "\n"


def load_summaries(paths) -> list[dict]:
    return [json.loads(p.read_text()) for p in find_summaries(paths)]

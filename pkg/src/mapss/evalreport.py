"""Correlation of utterance scores against listener ratings, plus the
thresholded mutual-information complementarity analysis and report rendering.
"""

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InsufficientSystems, ZeroVariance

NMI_BINS = 10
NMI_MIN_FRAMES = 50
NMI_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 11))


def pcc(x, y) -> float:
    """Linear (product-moment) correlation coefficient."""
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx == 0.0 or ny == 0.0:
        raise ZeroVariance("constant input vector")
    return float(np.clip(xc @ yc / (nx * ny), -1.0, 1.0))


def srcc(x, y) -> float:
    """Rank correlation coefficient with average ranks on ties."""
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    return pcc(rankdata(x, method="average"), rankdata(y, method="average"))


@dataclass
class ScoreTable:
    """Utterance-level scores and ratings keyed by (trial, system, source)."""

    rows: dict = field(default_factory=dict)  # (trial, system, source) -> dict

    def add(self, trial, system, source, ps=None, pm=None, mos=None, **extra):
        key = (trial, system, int(source))
        if key in self.rows:
            raise ValueError(f"duplicate entry for {key}")
        self.rows[key] = {"ps": ps, "pm": pm, "mos": mos, **extra}

    def attach_mos(self, mos_rows):
        for trial, system, source, value in mos_rows:
            key = (trial, system, int(source))
            if key in self.rows:
                self.rows[key]["mos"] = float(value)

    def vectors(self, measure: str):
        """Per-(trial, source) paired value/MOS vectors across systems."""
        grouped = defaultdict(list)
        for (trial, system, source), row in sorted(self.rows.items()):
            if row.get(measure) is not None and row.get("mos") is not None:
                grouped[(trial, source)].append((system, row[measure], row["mos"]))
        out = {}
        for key, entries in grouped.items():
            entries.sort()
            out[key] = (np.array([e[1] for e in entries]),
                        np.array([e[2] for e in entries]))
        return out


def scenario_report(table: ScoreTable, measure: str, min_systems: int = 2) -> dict:
    """Mean linear and rank coefficients over all (trial, source) pairs."""
    vectors = table.vectors(measure)
    per_pair = {}
    for key, (values, mos) in vectors.items():
        if values.size < min_systems:
            raise InsufficientSystems(
                f"{key} has {values.size} systems, need >= {min_systems}")
        per_pair[key] = {"pcc": pcc(values, mos), "srcc": srcc(values, mos)}
    if not per_pair:
        raise InsufficientSystems("no (trial, source) pair has scores and ratings")
    return {
        "measure": measure,
        "pcc": float(np.mean([v["pcc"] for v in per_pair.values()])),
        "srcc": float(np.mean([v["srcc"] for v in per_pair.values()])),
        "n_pairs": len(per_pair),
        "per_pair": {f"{t}/{s}": v for (t, s), v in sorted(per_pair.items())},
    }


# --- normalized mutual information -------------------------------------------

def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(x: np.ndarray, y: np.ndarray, bins: int = NMI_BINS) -> float:
    """Histogram NMI, normalized by the mean of the marginal entropies."""
    joint, _, _ = np.histogram2d(x, y, bins=bins, range=[[0, 1], [0, 1]])
    joint /= joint.sum()
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    hx, hy = _entropy(px), _entropy(py)
    mutual = hx + hy - _entropy(joint.ravel())
    denom = 0.5 * (hx + hy)
    if denom == 0.0:
        return 0.0
    return float(np.clip(mutual / denom, 0.0, 1.0))


def _normalize_per_utterance(frames_by_utterance):
    out = []
    for frames in frames_by_utterance:
        f = np.asarray(frames, dtype=np.float64)
        lo, hi = f.min(), f.max()
        out.append(np.zeros_like(f) if hi == lo else (f - lo) / (hi - lo))
    return np.concatenate(out) if out else np.zeros(0)


def nmi_thresholded(ps_by_utterance, pm_by_utterance,
                    thresholds=NMI_THRESHOLDS,
                    min_frames: int = NMI_MIN_FRAMES) -> list[dict]:
    """Complementarity curve of the two measures.

    Values are first min-max normalized per utterance. For every threshold the
    frames whose conditioning measure does not exceed it are retained and the
    NMI of the retained pairs is computed, in both conditioning directions.
    Thresholds retaining fewer than ``min_frames`` report an undefined NMI but
    still list their counts.
    """
    ps = _normalize_per_utterance(ps_by_utterance)
    pm = _normalize_per_utterance(pm_by_utterance)
    if ps.size != pm.size:
        raise ValueError("measure sequences are not aligned")
    curve = []
    for th in thresholds:
        row = {"threshold": float(th)}
        for name, conditioner in (("ps", ps), ("pm", pm)):
            mask = conditioner <= th
            count = int(mask.sum())
            value = nmi(ps[mask], pm[mask]) if count >= min_frames else None
            row[f"by_{name}"] = {"nmi": value, "retained": count}
        curve.append(row)
    return curve


# --- input / output -----------------------------------------------------------

def read_mos_csv(path) -> list[tuple]:
    """Rows of a (trial, system, source, mos) CSV, header optional."""
    rows = []
    with open(path, newline="") as fh:
        for record in csv.reader(fh):
            if not record or record[0].strip().lower() == "trial":
                continue
            trial, system, source, value = (field.strip() for field in record[:4])
            rows.append((trial, system, int(source), float(value)))
    return rows


def render_text_report(report: dict) -> str:
    lines = [f"scenario: {report.get('scenario', '?')}"]
    for measure in ("ps", "pm"):
        section = report.get(f"{measure}_correlation")
        if section:
            lines.append(f"  {measure.upper()}: pcc={section['pcc']:+.4f}  "
                         f"srcc={section['srcc']:+.4f}  (n={section['n_pairs']})")
            bound = report.get(f"{measure}_correlation_bounds")
            if bound:
                for metric in ("pcc", "srcc"):
                    b = bound.get(metric)
                    if b:
                        lines.append(
                            f"    {metric} radius={b['radius']:.4f} "
                            f"half_width={b['half_width']:.4f} @ {b['confidence']:.0%}")
    nmi_curve = report.get("nmi")
    if nmi_curve:
        lines.append("  NMI by threshold (conditioning on ps / pm):")
        for row in nmi_curve:
            def fmt(cell):
                return "undef" if cell["nmi"] is None else f"{cell['nmi']:.3f}"
            lines.append(f"    {row['threshold']:.1f}: {fmt(row['by_ps'])} "
                         f"({row['by_ps']['retained']}) / {fmt(row['by_pm'])} "
                         f"({row['by_pm']['retained']})")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, plots: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "report.txt").write_text(render_text_report(report))
    if plots:
        plot_report(report, out_dir)
    return json_path


def plot_report(report: dict, out_dir) -> list[Path]:
    """SVG plots: score histograms and the NMI curve, when data is present."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    hist = report.get("frame_histograms")
    if hist:
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, measure in zip(axes, ("ps", "pm")):
            values = hist.get(measure, [])
            ax.hist(values, bins=25, range=(0, 1), color="tab:blue", alpha=0.8)
            ax.set_title(measure.upper())
            ax.set_xlabel("frame score")
        fig.tight_layout()
        path = out_dir / "score_histograms.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    nmi_curve = report.get("nmi")
    if nmi_curve:
        fig, ax = plt.subplots(figsize=(5, 3))
        ths = [row["threshold"] for row in nmi_curve]
        for key, style in (("by_ps", "o-"), ("by_pm", "s--")):
            ys = [row[key]["nmi"] for row in nmi_curve]
            xs = [t for t, y in zip(ths, ys) if y is not None]
            ys = [y for y in ys if y is not None]
            ax.plot(xs, ys, style, label=f"threshold on {key[3:].upper()}")
        ax.set_xlabel("threshold")
        ax.set_ylabel("NMI")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "nmi_curve.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written

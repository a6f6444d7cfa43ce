"""AUC, macro-F1, bootstrap intervals, missing-rate sweeps and report files."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .data import apply_missingness
from .numcore import RngStream


class UndefinedMetricError(ValueError):
    pass


def _binary(labels):
    y = np.asarray(labels).astype(int).ravel()
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("metric needs both classes among the labels")
    return y, n_pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant pairs + ties / 2) / (n_pos * n_neg)."""
    y, n_pos = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _f1(tp, fp, fn) -> Fraction:
    # 2PR / (P + R) simplifies to 2tp / (2tp + fp + fn); with tp = 0 either
    # precision or recall is 0 (or 0/0), which counts as F1 = 0
    return Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)


def f1_macro(scores, labels, threshold=0.5) -> float:
    """Unweighted mean of the per-class F1 scores; 0/0 precision or recall counts as 0.

    Computed exactly from the integer confusion counts and rounded once, so the
    result does not depend on the order of floating-point operations.
    """
    y, _ = _binary(labels)
    pred = (np.asarray(scores, dtype=np.float64).ravel() >= threshold).astype(int)
    per_class = []
    for c in (0, 1):
        tp = int(np.sum((pred == c) & (y == c)))
        fp = int(np.sum((pred == c) & (y != c)))
        fn = int(np.sum((pred != c) & (y == c)))
        per_class.append(_f1(tp, fp, fn))
    return float((per_class[0] + per_class[1]) / 2)


METRICS = {"auc": auc, "f1": f1_macro}


def bootstrap_ci(scores, labels, metric="auc", confidence=0.975, resamples=1000, seed=0):
    """Two-sided percentile interval over seeded resamples with replacement.

    Resamples that contain a single class are skipped; if more than half are
    skipped the interval is undefined.
    """
    if resamples < 100:
        raise ValueError("bootstrap needs at least 100 resamples")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    rng = RngStream(seed, "bootstrap")
    idx = rng.integers(0, len(s), size=(resamples, len(s)))
    vals = []
    for row in idx:
        yy = y[row]
        if yy.min() == yy.max():
            continue
        vals.append(fn(s[row], yy))
    skipped = resamples - len(vals)
    if skipped * 2 > resamples:
        raise UndefinedMetricError(f"{skipped} of {resamples} bootstrap resamples were single-class")
    alpha = (1.0 - confidence) / 2.0
    low, high = np.percentile(vals, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


# ---------------------------------------------------------------------------
# prediction and sweeps


def predict_scores(model, samples) -> np.ndarray:
    """Positive-class probability for each sample, routed by the model."""
    return np.array([model.predict(s)[1] for s in samples])


def labels_of(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=int)


@dataclass
class EvalReport:
    method: str
    missing_rate: float
    seed: int
    auc: float
    f1: float
    ci_low: float
    ci_high: float
    n_test: int


def evaluate(method, model, samples, rate, seed, role="clinical", ci_resamples=1000,
             confidence=0.975, threshold=0.5) -> EvalReport:
    masked = apply_missingness(samples, rate, role, seed)
    scores = predict_scores(model, masked)
    y = labels_of(masked)
    a = auc(scores, y)
    lo, hi = bootstrap_ci(scores, y, "auc", confidence, ci_resamples, seed)
    return EvalReport(method, float(rate), int(seed), a, f1_macro(scores, y, threshold),
                      min(lo, a), max(hi, a), len(samples))


def sweep_missing_rates(models: dict, test_set, rates, seeds, role="clinical", ci_resamples=1000,
                        confidence=0.975, threshold=0.5) -> list[EvalReport]:
    """Evaluate every (model, rate, seed).  Masks for one seed are nested across rates."""
    reports = []
    for name, model in models.items():
        for rate in rates:
            for seed in seeds:
                reports.append(evaluate(name, model, test_set, rate, seed, role, ci_resamples,
                                        confidence, threshold))
    return reports


def summarize(reports, baseline="filling"):
    """Mean rows per (method, rate) with changes against the baseline method."""
    groups = {}
    for r in reports:
        groups.setdefault((r.method, r.missing_rate), []).append(r)
    means = {k: (float(np.mean([r.auc for r in v])), float(np.mean([r.f1 for r in v])), len(v))
             for k, v in groups.items()}
    rows = []
    for (method, rate), (a, f, n) in means.items():
        base = means.get((baseline, rate))
        rows.append({
            "method": method, "missing_rate": rate, "n_seeds": n, "auc": a, "f1": f,
            "delta_auc": a - base[0] if base else None,
            "delta_f1": f - base[1] if base else None,
        })
    return rows


# ---------------------------------------------------------------------------
# report files

CSV_COLUMNS = ("method", "missing_rate", "seed", "auc", "f1", "ci_low", "ci_high", "n_test")


def _num(x, digits=6):
    return f"{x:.{digits}f}"


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.method, _num(r.missing_rate, 4), r.seed, _num(r.auc), _num(r.f1),
                    _num(r.ci_low), _num(r.ci_high), r.n_test])
    return buf.getvalue()


def read_reports_csv(path) -> list[EvalReport]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalReport(r["method"], float(r["missing_rate"]), int(r["seed"]), float(r["auc"]), float(r["f1"]),
                       float(r["ci_low"]), float(r["ci_high"]), int(r["n_test"])) for r in rows]


def emit_report(reports, path, formats=("csv", "json"), baseline="filling"):
    """Write ``<path>.csv`` / ``.json`` / ``.svg``; returns the written paths."""
    if not reports:
        raise ValueError("no reports to write")
    stem = path[:-4] if path.endswith((".csv", ".svg")) else path[:-5] if path.endswith(".json") else path
    d = os.path.dirname(stem)
    if d:
        os.makedirs(d, exist_ok=True)
    written = []
    if "csv" in formats:
        with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(reports_csv(reports))
        written.append(stem + ".csv")
    if "json" in formats:
        payload = {"reports": [asdict(r) for r in reports], "summary": summarize(reports, baseline)}
        with open(stem + ".json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(stem + ".json")
    if "svg" in formats:
        with open(stem + ".svg", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(sweep_svg(reports))
        written.append(stem + ".svg")
    return written


def format_table(reports, baseline="filling") -> str:
    """Plain-text table of per-(method, rate) means, metrics with 4 decimals."""
    lines = [f"{'rate':>6} {'method':<24} {'AUC':>7} {'dAUC':>7} {'F1':>7} {'dF1':>7}"]
    for row in sorted(summarize(reports, baseline), key=lambda r: (r["missing_rate"], r["method"])):
        da = "" if row["delta_auc"] is None else f"{row['delta_auc']:+.4f}"
        df = "" if row["delta_f1"] is None else f"{row['delta_f1']:+.4f}"
        lines.append(f"{row['missing_rate']:>6.2f} {row['method']:<24} {row['auc']:>7.4f} {da:>7} "
                     f"{row['f1']:>7.4f} {df:>7}")
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def sweep_svg(reports, width=640, height=300) -> str:
    """Two side-by-side panels (mean AUC, mean F1) against missing rate."""
    rows = summarize(reports, baseline="")
    methods = sorted({r["method"] for r in rows})
    panel_w, pad = width // 2, 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    for p, metric in enumerate(("auc", "f1")):
        x0 = p * panel_w + pad
        w, h = panel_w - 2 * pad, height - 2 * pad
        vals = [r[metric] for r in rows]
        lo = math.floor(min(vals) * 20) / 20
        hi = max(math.ceil(max(vals) * 20) / 20, lo + 0.05)

        def sx(r):
            return x0 + r * w

        def sy(v):
            return pad + h - (v - lo) / (hi - lo) * h

        out.append(f'<rect x="{x0}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#888"/>')
        out.append(f'<text x="{x0 + w / 2:.1f}" y="{pad - 8}" text-anchor="middle">{metric.upper()}</text>')
        out.append(f'<text x="{x0 + w / 2:.1f}" y="{height - 8}" text-anchor="middle">missing rate</text>')
        out.append(f'<text x="{x0 - 4}" y="{sy(lo):.1f}" text-anchor="end">{lo:.2f}</text>')
        out.append(f'<text x="{x0 - 4}" y="{sy(hi):.1f}" text-anchor="end">{hi:.2f}</text>')
        for i, m in enumerate(methods):
            pts = sorted((r["missing_rate"], r[metric]) for r in rows if r["method"] == m)
            color = _PALETTE[i % len(_PALETTE)]
            path = " ".join(f"{sx(r):.1f},{sy(v):.1f}" for r, v in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            if p == 1:
                out.append(f'<text x="{x0 + 6}" y="{pad + 14 * (i + 1)}" fill="{color}">{m}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

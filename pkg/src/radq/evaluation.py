"""Candidate-level metrics, Fisher-criterion separability, paired significance
tests and report assembly."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

UNDEFINED = None  # marker for a metric whose denominator is zero


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a nonnegative integer, got {v!r}")
            object.__setattr__(self, k, int(v))

    @property
    def p(self) -> int:
        return self.tp + self.fn

    @property
    def n(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None


def metrics(c: ConfusionCounts) -> Metrics:
    """TP/P, TN/N and (TP+TN)/(P+N); ``None`` where the denominator is zero."""
    sens = c.tp / c.p if c.p else UNDEFINED
    spec = c.tn / c.n if c.n else UNDEFINED
    acc = (c.tp + c.tn) / (c.p + c.n) if c.p + c.n else UNDEFINED
    return Metrics(sens, spec, acc)


def pooled(counts) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


@dataclass
class SeparabilityReport:
    per_dimension: np.ndarray  # +inf marks zero spread with differing means
    aggregate: float  # mean over finite dimensions
    maximum: float
    n_infinite: int
    n_healthy: int
    n_cancerous: int
    classical: bool = False

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate, "maximum": self.maximum, "n_infinite": self.n_infinite,
                "n_dimensions": int(self.per_dimension.size), "n_healthy": self.n_healthy,
                "n_cancerous": self.n_cancerous, "classical": self.classical}


def fisher_criterion(healthy, cancerous, classical: bool = False) -> SeparabilityReport:
    """Per-dimension ``(mu_h - mu_c)^2 / (sigma_h + sigma_c)`` with population standard deviations.

    ``classical=True`` uses variances in the denominator instead.
    """
    h = np.atleast_2d(np.asarray(healthy, dtype=np.float64))
    c = np.atleast_2d(np.asarray(cancerous, dtype=np.float64))
    if h.shape[0] < 2 or c.shape[0] < 2:
        raise ValueError("fisher_criterion needs at least two samples per class")
    if h.shape[1] != c.shape[1]:
        raise ValueError("class sequences differ in length")
    num = (h.mean(axis=0) - c.mean(axis=0)) ** 2
    den = h.var(axis=0) + c.var(axis=0) if classical else h.std(axis=0) + c.std(axis=0)
    fc = np.zeros_like(num)
    pos = den > 0
    fc[pos] = num[pos] / den[pos]
    fc[~pos & (num > 0)] = np.inf
    finite = np.isfinite(fc)
    agg = float(fc[finite].mean()) if finite.any() else float("nan")
    mx = float(fc[finite].max()) if finite.any() else float("nan")
    return SeparabilityReport(fc, agg, mx, int((~finite).sum()), h.shape[0], c.shape[0], classical)


@dataclass(frozen=True)
class PairedTest:
    t: float | None
    p: float | None
    df: int
    mean_difference: float
    degenerate: bool = False


def student_t_cdf(t: float, df: float) -> float:
    """Student t CDF through the regularised incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def paired_test(a, b) -> PairedTest:
    """Two-sided paired Student t-test on ``a - b``.

    Zero variance of the differences gives ``degenerate=True`` with
    ``t``/``p`` set to ``None``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise ValueError("paired test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        return PairedTest(None, None, n - 1, float(d.mean()), True)
    t = float(d.mean() / (sd / np.sqrt(n)))
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))  # = 2 * (1 - F(|t|))
    return PairedTest(t, min(p, 1.0), df, float(d.mean()))


# ---------------------------------------------------------------- reports

def _fold_counts(fold) -> ConfusionCounts:
    return ConfusionCounts(fold.tp, fold.tn, fold.fp, fold.fn)


def _metric_row(m: Metrics) -> dict:
    return {"sensitivity": m.sensitivity, "specificity": m.specificity, "accuracy": m.accuracy}


def sequencer_summary(folds) -> dict:
    scored = [f for f in folds if f.skipped is None]
    per_fold = []
    for f in scored:
        c = _fold_counts(f)
        per_fold.append({"fold_id": f.fold_id, "test_patient": f.test_patient, **asdict(c),
                         **_metric_row(metrics(c))})
    total = pooled(_fold_counts(f) for f in scored)
    return {
        "pooled": {**asdict(total), **_metric_row(metrics(total))},
        "per_fold": per_fold,
        "skipped_folds": [{"fold_id": f.fold_id, "test_patient": f.test_patient, "reason": f.skipped}
                          for f in folds if f.skipped is not None],
    }


def paired_table(summary_a: dict, summary_b: dict) -> dict:
    """Paired tests per metric over folds scored by both sequencers with the metric defined."""
    fa = {r["fold_id"]: r for r in summary_a["per_fold"]}
    fb = {r["fold_id"]: r for r in summary_b["per_fold"]}
    out = {}
    for metric in ("sensitivity", "specificity", "accuracy"):
        ids = [i for i in sorted(fa) if i in fb and fa[i][metric] is not None and fb[i][metric] is not None]
        if len(ids) < 2:
            out[metric] = {"n_folds": len(ids), "degenerate": True, "t": None, "p": None}
            continue
        r = paired_test([fa[i][metric] for i in ids], [fb[i][metric] for i in ids])
        out[metric] = {"n_folds": len(ids), **asdict(r)}
    return out


@dataclass
class ReportInputs:
    folds: dict  # sequencer name -> list[FoldResult]
    separability: dict  # sequencer name -> SeparabilityReport
    config: dict
    seeds: dict
    extra: dict = field(default_factory=dict)


def build_report(inputs: ReportInputs, out_dir=None, reference: str = "discovered",
                 comparison: str = "baseline") -> dict:
    """Assemble ``report.json`` (and ``metrics.csv``, ``fc.csv``, per-fold plot CSVs when ``out_dir`` is given)."""
    summaries = {name: sequencer_summary(f) for name, f in inputs.folds.items()}
    doc = {
        "sequencers": summaries,
        "separability": {n: r.to_json() for n, r in inputs.separability.items()},
        "paired_tests": ({f"{reference}_vs_{comparison}": paired_table(summaries[reference], summaries[comparison])}
                         if reference in summaries and comparison in summaries else {}),
        "config": inputs.config,
        "seeds": inputs.seeds,
        **inputs.extra,
    }
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
        _write_metrics_csv(d / "metrics.csv", summaries)
        _write_fc_csv(d / "fc.csv", inputs.separability)
        for metric in ("sensitivity", "specificity", "accuracy"):
            _write_series_csv(d / f"plot_{metric}_per_fold.csv", summaries, metric)
    return doc


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _fmt(v):
    return "" if v is None else repr(v)


def _write_metrics_csv(path, summaries):
    cols = ["tp", "tn", "fp", "fn", "sensitivity", "specificity", "accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequencer", "fold", "test_patient"] + cols)
        for name, s in summaries.items():
            for r in s["per_fold"]:
                w.writerow([name, r["fold_id"], r["test_patient"]] + [_fmt(r[c]) for c in cols])
            w.writerow([name, "pooled", ""] + [_fmt(s["pooled"][c]) for c in cols])


def _write_fc_csv(path, separability):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequencer", "dimension", "fisher_criterion"])
        for name, r in separability.items():
            for i, v in enumerate(r.per_dimension):
                w.writerow([name, i, repr(float(v))])
            w.writerow([name, "aggregate", repr(r.aggregate)])


def _write_series_csv(path, summaries, metric):
    names = list(summaries)
    rows: dict[int, dict] = {}
    for name in names:
        for r in summaries[name]["per_fold"]:
            rows.setdefault(r["fold_id"], {"test_patient": r["test_patient"]})[name] = r[metric]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "test_patient"] + names)
        for fid in sorted(rows):
            w.writerow([fid, rows[fid]["test_patient"]] + [_fmt(rows[fid].get(n)) for n in names])

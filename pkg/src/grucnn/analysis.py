"""Analysis of per-frame class probabilities.

Everything downstream of the model lives here: Bayesian accumulation of
per-frame evidence, accuracy-versus-frame curves, exponential
integration-time fits, false-rejection rates on the low tail of pooled
probabilities, reliability binning with the exponential calibration fit
log y = a(1 - e^(c log p)), and confidence CDFs.

All operations are pure functions over :class:`PredictionTable`; nothing
here touches model state, so analyses are trivially parallel across
models, SNRs, and frames.
"""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
from scipy.optimize import least_squares

PCT = 100.0


# ---------------------------------------------------------------------------
# prediction tables
# ---------------------------------------------------------------------------

class AnalysisError(ValueError):
    """Malformed table or a request the pooled data cannot support."""


@dataclasses.dataclass
class PredictionTable:
    """Per-frame class probabilities for a set of evaluated sequences.

    probs has shape [items, repetitions, frames, 10]; labels and snrs are
    per item (repetitions reuse the item's image with fresh noise).
    """
    probs: np.ndarray
    labels: np.ndarray
    snrs: np.ndarray
    model: str = ""
    seed: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snrs = np.asarray(self.snrs, dtype=np.float64)
        if self.probs.ndim != 4 or self.probs.shape[-1] != 10:
            raise AnalysisError(f"probs must be [items, reps, T, 10], got {self.probs.shape}")
        n = self.probs.shape[0]
        if self.labels.shape != (n,) or self.snrs.shape != (n,):
            raise AnalysisError("labels and snrs must be one per item")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > 9:
            raise AnalysisError("labels must be in 0..9")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise AnalysisError("probabilities must lie in [0, 1]")
        sums = self.probs.sum(axis=-1)
        worst = float(np.abs(sums - 1.0).max(initial=0.0))
        if worst > 1e-5:
            raise AnalysisError(f"probability rows must sum to 1 (worst |sum-1| = {worst:.2e})")

    @property
    def n_items(self):
        return self.probs.shape[0]

    @property
    def n_reps(self):
        return self.probs.shape[1]

    @property
    def n_frames(self):
        return self.probs.shape[2]

    def save_csv(self, path):
        """One row per (item, rep, frame): item,rep,frame,label,snr,p0..p9."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["item", "rep", "frame", "label", "snr"]
                       + [f"p{k}" for k in range(10)])
            for i in range(self.n_items):
                for r in range(self.n_reps):
                    for t in range(self.n_frames):
                        w.writerow([i, r, t, int(self.labels[i]), repr(float(self.snrs[i]))]
                                   + [repr(float(p)) for p in self.probs[i, r, t]])

    @staticmethod
    def load_csv(path, model="", seed=0):
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            need = {"item", "rep", "frame", "label", "snr", "p0"}
            if reader.fieldnames is None or not need.issubset(reader.fieldnames):
                raise AnalysisError(f"{path}: not a prediction table (header {reader.fieldnames})")
            rows = list(reader)
        if not rows:
            raise AnalysisError(f"{path}: empty table")
        n_items = max(int(r["item"]) for r in rows) + 1
        n_reps = max(int(r["rep"]) for r in rows) + 1
        n_frames = max(int(r["frame"]) for r in rows) + 1
        probs = np.zeros((n_items, n_reps, n_frames, 10))
        labels = np.zeros(n_items, dtype=np.int64)
        snrs = np.zeros(n_items)
        for r in rows:
            i, rep, t = int(r["item"]), int(r["rep"]), int(r["frame"])
            probs[i, rep, t] = [float(r[f"p{k}"]) for k in range(10)]
            labels[i] = int(r["label"])
            snrs[i] = float(r["snr"])
        return PredictionTable(probs, labels, snrs, model=model, seed=seed)


def merge_tables(tables):
    """Pool tables of one model: same items stack as extra repetitions."""
    tables = list(tables)
    if not tables:
        raise AnalysisError("no tables to merge")
    first = tables[0]
    same_items = all(t.n_items == first.n_items
                     and np.array_equal(t.labels, first.labels)
                     and np.array_equal(t.snrs, first.snrs) for t in tables[1:])
    if same_items:
        probs = np.concatenate([t.probs for t in tables], axis=1)
        return PredictionTable(probs, first.labels, first.snrs, model=first.model)
    if len({t.n_reps for t in tables}) != 1 or len({t.n_frames for t in tables}) != 1:
        raise AnalysisError("tables with different items must agree on reps and frames")
    probs = np.concatenate([t.probs for t in tables], axis=0)
    labels = np.concatenate([t.labels for t in tables])
    snrs = np.concatenate([t.snrs for t in tables])
    return PredictionTable(probs, labels, snrs, model=first.model)


# ---------------------------------------------------------------------------
# Bayesian accumulation
# ---------------------------------------------------------------------------

def bayes_update(prior, likelihood):
    """Renormalized elementwise product, computed in log space.

    Returns (posterior, degenerate); a degenerate update (prior and
    likelihood share no support, so the product is all zero) returns the
    prior unchanged with the flag set.
    """
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if prior.shape != likelihood.shape or prior.ndim != 1:
        raise AnalysisError(f"prior {prior.shape} and likelihood {likelihood.shape} must be equal-length vectors")
    if np.any(prior < 0) or np.any(likelihood < 0):
        raise AnalysisError("probabilities must be nonnegative")
    if abs(prior.sum() - 1.0) > 1e-5:
        raise AnalysisError(f"prior sums to {prior.sum()!r}, not 1")
    with np.errstate(divide="ignore"):
        logs = np.log(prior) + np.log(likelihood)
    m = logs.max()
    if not np.isfinite(m):
        return prior.copy(), True
    w = np.exp(logs - m)
    return w / w.sum(), False


def bayes_over_frames(probs):
    """Fold bayes_update along the frame axis of [..., T, 10] probabilities.

    Frame 0's posterior is the raw frame-0 output (flat prior), copied
    verbatim.  Returns (posteriors, degenerate) where degenerate flags
    the [..., T] updates that had to fall back to their prior.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2:
        raise AnalysisError(f"expected [..., T, classes], got shape {probs.shape}")
    out = np.empty_like(probs)
    degenerate = np.zeros(probs.shape[:-1], dtype=bool)
    out[..., 0, :] = probs[..., 0, :]
    cur = probs[..., 0, :] / probs[..., 0, :].sum(axis=-1, keepdims=True)
    for t in range(1, probs.shape[-2]):
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.log(cur) + np.log(probs[..., t, :])
        m = cand.max(axis=-1, keepdims=True)
        bad = ~np.isfinite(m[..., 0])
        w = np.exp(cand - np.where(np.isfinite(m), m, 0.0))
        s = w.sum(axis=-1, keepdims=True)
        nxt = np.where(bad[..., None], cur, w / np.where(s > 0, s, 1.0))
        degenerate[..., t] = bad
        out[..., t, :] = nxt
        cur = nxt
    return out, degenerate


# ---------------------------------------------------------------------------
# accuracy and integration time
# ---------------------------------------------------------------------------

def accuracy_curve(tables, with_bayes=False):
    """Percent correct per frame, grouped by SNR: {snr: [T] in percent}.

    A positive is the highest predicted probability of the frame (ties
    to the lowest class index).  With ``with_bayes`` the probabilities
    are first accumulated across frames.
    """
    if isinstance(tables, PredictionTable):
        tables = [tables]
    if not tables:
        raise AnalysisError("no tables")
    curves = {}
    for snr in sorted({float(s) for t in tables for s in t.snrs}):
        hits, totals = None, 0
        for t in tables:
            mask = t.snrs == snr
            if not mask.any():
                continue
            probs = t.probs[mask]
            if with_bayes:
                probs, _ = bayes_over_frames(probs)
            pred = np.argmax(probs, axis=-1)
            correct = (pred == t.labels[mask, None, None]).sum(axis=(0, 1))
            hits = correct if hits is None else hits + correct
            totals += mask.sum() * t.n_reps
        curves[snr] = PCT * hits / totals
    return curves


@dataclasses.dataclass
class ExpFitResult:
    """Parameters of f(t) = (c - a) exp(-t / tau) + c on an accuracy curve.

    With this form f(0) = 2c - a and f(inf) = c, so the realized rise
    over the sequence is ``increase`` = f(inf) - f(0) = a - c; both the
    raw parameters and the derived increase are kept.
    """
    a: float
    c: float
    tau: float
    residual: float
    converged: bool

    @property
    def increase(self):
        return self.a - self.c

    def to_dict(self):
        return {"a": self.a, "c": self.c, "tau": self.tau,
                "residual": self.residual, "converged": self.converged,
                "increase": self.increase}


def exp_curve(t, a, c, tau):
    return (c - a) * np.exp(-np.asarray(t, dtype=np.float64) / tau) + c


def fit_integration(curve):
    """Least-squares exponential fit of an accuracy-versus-frame curve."""
    y = np.asarray(curve, dtype=np.float64)
    if y.ndim != 1 or y.size < 3:
        raise AnalysisError(f"need a 1-d curve of >= 3 frames, got shape {y.shape}")
    t = np.arange(y.size, dtype=np.float64)
    c0 = y[-1]
    a0 = 2.0 * c0 - y[0]          # makes the initial guess hit f(0) = y[0]
    tau0 = max(y.size / 5.0, 1e-3)
    lo = [-np.inf, -np.inf, 1e-9]
    hi = [np.inf, np.inf, 10.0 * y.size]
    res = least_squares(
        lambda p: exp_curve(t, *p) - y,
        x0=[a0, c0, min(max(tau0, lo[2]), hi[2])],
        bounds=(lo, hi), max_nfev=2000)
    a, c, tau = (float(v) for v in res.x)
    return ExpFitResult(a=a, c=c, tau=tau,
                        residual=float(np.linalg.norm(res.fun)),
                        converged=bool(res.success))


# ---------------------------------------------------------------------------
# false rejections
# ---------------------------------------------------------------------------

def false_rejection_rate(table, frame, percentile=20.0):
    """Percent of low-tail pooled predictions that were the true category.

    Pools every predicted probability at the frame (items x repetitions
    x 10 categories), takes the lowest ``percentile`` percent by value,
    and reports how often the rejected category was actually correct.
    Chance is 10%; a perfect model scores 0%.
    """
    if not 0 < percentile <= 50:
        raise AnalysisError(f"percentile must be in (0, 50], got {percentile}")
    if not 0 <= frame < table.n_frames:
        raise AnalysisError(f"frame {frame} out of range (T={table.n_frames})")
    values = table.probs[:, :, frame, :].ravel()
    positive = (np.arange(10)[None, None, :] == table.labels[:, None, None])
    positive = np.broadcast_to(positive, table.probs[:, :, frame, :].shape).ravel()
    k = int(len(values) * percentile / PCT)
    if k < 1:
        raise AnalysisError(
            f"pool of {len(values)} is too small for the lowest {percentile}%")
    order = np.argsort(values, kind="stable")
    return PCT * int(positive[order[:k]].sum()) / k


# ---------------------------------------------------------------------------
# reliability and calibration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ReliabilityBin:
    lo_pct: float          # percentile interval covered by the bin
    hi_pct: float
    mean_p: float          # mean predicted probability inside the bin
    frac_pos: float        # empirical fraction whose category was correct
    count: int

    def to_dict(self):
        return dataclasses.asdict(self)


def bin_predictions(values, positives, n_bins=50):
    """Rank predictions and split into equal-count percentile bins."""
    values = np.asarray(values, dtype=np.float64).ravel()
    positives = np.asarray(positives).ravel().astype(bool)
    if values.shape != positives.shape:
        raise AnalysisError("values and positives must align")
    if len(values) < n_bins:
        raise AnalysisError(f"{len(values)} predictions cannot fill {n_bins} bins")
    order = np.argsort(values, kind="stable")
    bins = []
    edges = np.linspace(0, len(values), n_bins + 1).astype(int)
    for b in range(n_bins):
        sel = order[edges[b]:edges[b + 1]]
        bins.append(ReliabilityBin(
            lo_pct=PCT * edges[b] / len(values),
            hi_pct=PCT * edges[b + 1] / len(values),
            mean_p=float(values[sel].mean()),
            frac_pos=float(positives[sel].mean()),
            count=int(len(sel))))
    return bins


def reliability_bins(table, frame, n_bins=50):
    """Equal-count reliability bins over all predictions at one frame."""
    if not 0 <= frame < table.n_frames:
        raise AnalysisError(f"frame {frame} out of range (T={table.n_frames})")
    values = table.probs[:, :, frame, :].ravel()
    positive = (np.arange(10)[None, None, :] == table.labels[:, None, None])
    positive = np.broadcast_to(positive, table.probs[:, :, frame, :].shape).ravel()
    return bin_predictions(values, positive, n_bins)


@dataclasses.dataclass
class CalibrationFit:
    """log y = a (1 - e^(c log p)): a is the log-fraction floor as p -> 0.

    The form pins y = 1 at p = 1 for any parameters, matching the fact
    that a prediction of certainty is either right or the model is
    broken in a way no recalibration fixes.
    """
    a: float
    c: float
    r2: float
    n_used: int

    def apply(self, p):
        """Map predicted probabilities to calibrated frequencies."""
        p = np.asarray(p, dtype=np.float64)
        return np.exp(self.a * (1.0 - np.power(p, self.c)))

    def to_dict(self):
        return {"a": self.a, "c": self.c, "r2": self.r2, "n_used": self.n_used}


def fit_calibration(bins):
    """Least squares of log(frac positive) against a(1 - e^(c log mean_p)).

    Bins with no positives are floored at half of one count so the log
    is finite; bins with mean_p = 0 are unusable and dropped.
    """
    pts = []
    for b in bins:
        if b.mean_p <= 0 or b.count < 1:
            continue
        frac = b.frac_pos if b.frac_pos > 0 else 0.5 / b.count
        pts.append((math.log(b.mean_p), math.log(frac)))
    if len(pts) < 3:
        raise AnalysisError(f"only {len(pts)} usable bins; need at least 3")
    logp = np.array([p for p, _ in pts])
    logy = np.array([y for _, y in pts])
    if np.unique(logp).size < 3:
        raise AnalysisError(
            f"usable bins cover only {np.unique(logp).size} distinct "
            "probabilities; the two-parameter fit is underdetermined")

    def resid(params):
        a, c = params
        return a * (1.0 - np.exp(c * logp)) - logy

    a0 = min(logy.min(), -1e-3)
    res = least_squares(resid, x0=[a0, 1.0],
                        bounds=([-np.inf, 1e-9], [0.0, np.inf]), max_nfev=2000)
    a, c = (float(v) for v in res.x)
    ss_res = float(np.sum(res.fun ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 and ss_res < 1e-12 else 1.0 - ss_res / max(ss_tot, 1e-300)
    return CalibrationFit(a=a, c=c, r2=r2, n_used=len(pts))


def calibrate(table, fit):
    """Map all probabilities through the calibration fit and renormalize rows."""
    y = fit.apply(table.probs)
    y /= y.sum(axis=-1, keepdims=True)
    return PredictionTable(y, table.labels, table.snrs,
                           model=table.model, seed=table.seed)


# ---------------------------------------------------------------------------
# confidence CDFs
# ---------------------------------------------------------------------------

def confidence_cdf(table, frame, which="positive"):
    """Sorted probabilities of true-label entries (positive) or the rest.

    The empirical CDF at x is then the fraction of returned samples <= x.
    """
    if which not in ("positive", "negative"):
        raise AnalysisError(f"which must be 'positive' or 'negative', got {which!r}")
    if not 0 <= frame < table.n_frames:
        raise AnalysisError(f"frame {frame} out of range (T={table.n_frames})")
    probs = table.probs[:, :, frame, :]
    mask = (np.arange(10)[None, None, :] == table.labels[:, None, None])
    mask = np.broadcast_to(mask, probs.shape)
    sel = probs[mask] if which == "positive" else probs[~mask]
    if sel.size == 0:
        raise AnalysisError(f"no {which} entries at frame {frame}")
    return np.sort(sel)


def fraction_above(samples, threshold):
    return float(np.mean(np.asarray(samples) > threshold))


def fraction_below(samples, threshold):
    return float(np.mean(np.asarray(samples) < threshold))


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def build_report(tables, rejection_percentile=20.0, difference_baseline="ccnn"):
    """Assemble the full analysis report from evaluated prediction tables.

    ``tables`` is a flat list; they are grouped by model name and SNR.
    Sections that cannot be computed are skipped and listed under
    ``gaps`` instead of failing the whole report.  Difference curves
    compare each model's raw accuracy against the baseline model's
    Bayes-folded accuracy, the stateless-network-plus-optimal-integrator
    comparison.
    """
    by_model = {}
    for t in tables:
        by_model.setdefault(t.model or "model", []).append(t)

    report = {"accuracy_curves": {}, "last_frame_accuracy": {},
              "difference_curves": {}, "exp_fits": {}, "rejection_rates": {},
              "reliability": {}, "calibration": {}, "cdf": {}, "gaps": []}
    gaps = report["gaps"]
    raw_curves, bayes_curves = {}, {}

    for model, group in sorted(by_model.items()):
        merged = merge_tables(group)
        raw = accuracy_curve(merged, with_bayes=False)
        folded = accuracy_curve(merged, with_bayes=True)
        raw_curves[model], bayes_curves[model] = raw, folded
        report["accuracy_curves"][model] = {
            str(snr): {"frames": list(range(len(raw[snr]))),
                       "raw": [float(v) for v in raw[snr]],
                       "bayes": [float(v) for v in folded[snr]]}
            for snr in raw}
        report["last_frame_accuracy"][model] = {
            str(snr): {"raw": float(raw[snr][-1]), "bayes": float(folded[snr][-1])}
            for snr in raw}
        report["exp_fits"][model] = {}
        for snr in raw:
            fits = {}
            for kind, curve in (("raw", raw[snr]), ("bayes", folded[snr])):
                try:
                    fits[kind] = fit_integration(curve).to_dict()
                except AnalysisError as e:
                    gaps.append(f"exp_fits:{model}:snr={snr}:{kind}: {e}")
            report["exp_fits"][model][str(snr)] = fits

        report["rejection_rates"][model] = {}
        report["reliability"][model] = {}
        report["calibration"][model] = {}
        report["cdf"][model] = {}
        for snr in raw:
            sub_mask = merged.snrs == snr
            sub = PredictionTable(merged.probs[sub_mask], merged.labels[sub_mask],
                                  merged.snrs[sub_mask], model=model)
            last = sub.n_frames - 1
            try:
                rates = [false_rejection_rate(sub, t, rejection_percentile)
                         for t in range(sub.n_frames)]
                report["rejection_rates"][model][str(snr)] = {
                    "frames": list(range(sub.n_frames)),
                    "rate": [float(v) for v in rates]}
            except AnalysisError as e:
                gaps.append(f"rejection_rates:{model}:snr={snr}: {e}")
            cal = sub
            try:
                bins = reliability_bins(sub, last)
                report["reliability"][model][str(snr)] = [b.to_dict() for b in bins]
                fit = fit_calibration(bins)
                report["calibration"][model][str(snr)] = fit.to_dict()
                cal = calibrate(sub, fit)
            except AnalysisError as e:
                gaps.append(f"calibration:{model}:snr={snr}: {e} "
                            "(cdf falls back to raw probabilities)")
            try:
                pos = confidence_cdf(cal, last, "positive")
                neg = confidence_cdf(cal, last, "negative")
                report["cdf"][model][str(snr)] = {
                    "positive_above_0.4": fraction_above(pos, 0.4),
                    "negative_below_0.01": fraction_below(neg, 0.01),
                    "n_positive": int(pos.size), "n_negative": int(neg.size)}
            except AnalysisError as e:
                gaps.append(f"cdf:{model}:snr={snr}: {e}")

    if difference_baseline in bayes_curves:
        base = bayes_curves[difference_baseline]
        for model, raw in raw_curves.items():
            if model == difference_baseline:
                continue
            diffs = {}
            for snr in raw:
                if snr in base and len(base[snr]) == len(raw[snr]):
                    diffs[str(snr)] = [float(v) for v in raw[snr] - base[snr]]
            if diffs:
                report["difference_curves"][f"{model}-minus-{difference_baseline}+bayes"] = diffs
    elif len(by_model) > 1:
        gaps.append(f"difference_curves: baseline {difference_baseline!r} not among tables")
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["accuracy_curves", "last_frame_accuracy", "difference_curves",
                 "exp_fits", "rejection_rates", "reliability", "calibration",
                 "cdf", "gaps"],
    "properties": {
        "accuracy_curves": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {
                "type": "object",
                "required": ["frames", "raw", "bayes"],
                "properties": {"frames": {"type": "array", "items": {"type": "integer"}},
                               "raw": {"type": "array", "items": {"type": "number"}},
                               "bayes": {"type": "array", "items": {"type": "number"}}}}}},
        "last_frame_accuracy": {"type": "object"},
        "difference_curves": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {
                "type": "array", "items": {"type": "number"}}}},
        "exp_fits": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {
                "type": "object", "additionalProperties": {
                    "type": "object",
                    "required": ["a", "c", "tau", "residual", "converged", "increase"]}}}},
        "rejection_rates": {"type": "object"},
        "reliability": {"type": "object"},
        "calibration": {"type": "object"},
        "cdf": {"type": "object"},
        "gaps": {"type": "array", "items": {"type": "string"}},
    },
}

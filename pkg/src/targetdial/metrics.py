"""Ranking metrics and offline evaluation reports.

AUC is the Mann-Whitney rank statistic with midrank tie handling. The
bin-weighted variant groups test dialogues into user-profile bins, takes
the AUC inside each bin, and size-weights the average; because scores are
compared only within a bin, it measures strategy-driven ranking skill with
the cross-user base-rate signal held fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import model as mdl
from .baselines import random_scorer
from .corpus import assign_bins
from .errors import UndefinedMetricError, ValidationError


def auc(scores, labels):
    """Probability a positive outranks a negative (ties count half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and aligned")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class BinRow:
    bin_id: int
    size: int
    n_pos: int
    auc: float | None  # None when the bin is single-class (excluded)

    @property
    def excluded(self):
        return self.auc is None


def binned_auc(scores, labels, bin_ids):
    """Size-weighted mean of per-bin AUCs.

    Single-class bins are excluded from both numerator and denominator and
    flagged in the returned table. Returns (value, list of BinRow).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    bin_ids = np.asarray(bin_ids)
    if not (scores.shape == labels.shape == bin_ids.shape):
        raise ValidationError("scores, labels and bin ids must be aligned")
    rows = []
    num = den = 0.0
    for b in sorted(set(int(x) for x in bin_ids)):
        sel = bin_ids == b
        size = int(sel.sum())
        n_pos = int((labels[sel] == 1).sum())
        if n_pos == 0 or n_pos == size:
            rows.append(BinRow(bin_id=b, size=size, n_pos=n_pos, auc=None))
            continue
        bin_auc = auc(scores[sel], labels[sel])
        rows.append(BinRow(bin_id=b, size=size, n_pos=n_pos, auc=bin_auc))
        num += size * bin_auc
        den += size
    if den == 0:
        raise UndefinedMetricError("every bin is single-class; binned AUC undefined")
    return num / den, rows


@dataclass
class MetricsReport:
    """One evaluated method: offline ranking plus optional simulator stats."""

    method: str
    auc: float
    binned_auc: float
    n_bins: int
    bins: list = field(default_factory=list)
    repayment_rate: float | None = None
    mean_rounds: float | None = None
    diversity: float | None = None

    def to_dict(self):
        return {
            "method": self.method,
            "auc": self.auc,
            "binned_auc": self.binned_auc,
            "n_bins": self.n_bins,
            "bins": [
                {"bin": r.bin_id, "size": r.size, "positives": r.n_pos, "auc": r.auc}
                for r in self.bins
            ],
            "repayment_rate": self.repayment_rate,
            "mean_rounds": self.mean_rounds,
            "diversity": self.diversity,
        }


def score_dialogues(dialogues, params):
    """Dialogue-level model score: predicted completion prob at the last step."""
    return np.asarray(
        [mdl.forward_sequence(d, params).ys[-1].value[0] for d in dialogues]
    )


def evaluate_scores(method, scores, dialogues, n_bins):
    labels = np.asarray([d.label for d in dialogues])
    bin_ids = np.asarray(assign_bins(dialogues, n_bins))
    overall = auc(scores, labels)
    weighted, rows = binned_auc(scores, labels, bin_ids)
    return MetricsReport(
        method=method, auc=overall, binned_auc=weighted, n_bins=n_bins, bins=rows
    )


def evaluate_model(scorer, dialogues, n_bins=10, method=None, seed=0):
    """Score a test corpus and compute both ranking metrics.

    ``scorer`` is a ModelParams (scored with the last-step completion
    probability), a callable profile -> probability (user-only baseline),
    or the string "random" for score-free policies, which are evaluated on
    uniform [0.5, 1) scores per the comparison protocol.
    """
    if isinstance(scorer, mdl.ModelParams):
        scores = score_dialogues(dialogues, scorer)
        name = method or "model"
    elif isinstance(scorer, str) and scorer == "random":
        scores = random_scorer(len(dialogues), seed)
        name = method or "random"
    elif callable(scorer):
        scores = np.asarray([scorer(d.user) for d in dialogues])
        name = method or getattr(scorer, "name", "callable")
    else:
        raise ValidationError(f"cannot evaluate scorer of type {type(scorer)!r}")
    return evaluate_scores(name, scores, dialogues, n_bins)


def format_report(reports):
    """Human-readable table for a list of MetricsReport."""
    lines = []
    header = f"{'method':<24} {'AUC':>8} {'binAUC':>8} {'repay':>7} {'rounds':>7} {'divers':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        repay = f"{r.repayment_rate:.4f}" if r.repayment_rate is not None else "-"
        rounds = f"{r.mean_rounds:.2f}" if r.mean_rounds is not None else "-"
        div = f"{r.diversity:.3f}" if r.diversity is not None else "-"
        lines.append(
            f"{r.method:<24} {r.auc:>8.4f} {r.binned_auc:>8.4f} {repay:>7} {rounds:>7} {div:>7}"
        )
    return "\n".join(lines)


def save_reports(path, reports):
    """Machine-readable record file: one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

"""Open-set evaluation: csID accuracy, AUROC, FPR@TPR95 and OSCR.

Known-class (csID) samples are the positive class throughout; confidences
are "higher means more in-distribution". Undefined metrics are ``None``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

SCORE_KINDS = ("energy", "msp", "max_logit")


def id_confidence(logits, kind="energy"):
    """Confidence from logits ``[..., C]``: energy (logsumexp), MSP or max logit."""
    z = np.asarray(logits, dtype=np.float64)
    if kind == "energy":
        return logsumexp(z, axis=-1)
    if kind == "msp":
        return softmax(z, axis=-1).max(axis=-1)
    if kind == "max_logit":
        return z.max(axis=-1)
    raise ValueError(f"unknown score kind {kind!r}; valid: {SCORE_KINDS}")


def auroc(id_scores, ood_scores):
    """P(id > ood) + 0.5 P(id == ood) via mid-ranks."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        return None
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def fpr_at_tpr(id_scores, ood_scores, tpr_target=0.95):
    """Fraction of OOD scores >= the largest threshold keeping ``tpr_target`` of ID scores."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        return None
    k = max(1, math.ceil(tpr_target * len(a) - 1e-9))
    tau = np.sort(a)[::-1][k - 1]
    return float(np.mean(b >= tau))


def oscr(confidence, correct, is_ood):
    """Area under correct-classification rate vs false-positive rate.

    ``confidence`` for every sample, ``correct`` flags (only read for ID
    samples), ``is_ood`` flags. The sweep runs from +inf down through every
    distinct confidence, so ties between ID and OOD move both axes at once.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    ood = np.asarray(is_ood, dtype=bool)
    corr = np.asarray(correct, dtype=bool) & ~ood
    n_id, n_ood = int((~ood).sum()), int(ood.sum())
    if n_id == 0 or n_ood == 0:
        return None
    order = np.argsort(-conf, kind="stable")
    c = conf[order]
    ccr = np.cumsum(corr[order]) / n_id
    fpr = np.cumsum(ood[order]) / n_ood
    # keep the last index of every run of equal confidences
    last = np.r_[c[1:] != c[:-1], True]
    xs = np.r_[0.0, fpr[last], 1.0]
    ys = np.r_[0.0, ccr[last], ccr[-1]]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


# ---------------------------------------------------------------- reports


def _pct(v):
    return None if v is None else 100.0 * v


def summarize(logits, y, is_ood, kind="energy"):
    """Headline metrics (percent) for one pool of samples."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    ood = np.asarray(is_ood, dtype=bool)
    conf = id_confidence(logits, kind) if len(logits) else np.zeros(0)
    pred = logits.argmax(axis=1) if len(logits) else np.zeros(0, dtype=int)
    correct = pred == y
    n_id = int((~ood).sum())
    return {
        "n_csid": n_id,
        "n_csood": int(ood.sum()),
        "acc": _pct(float(correct[~ood].mean())) if n_id else None,
        "auroc": _pct(auroc(conf[~ood], conf[ood])),
        "fpr_at_tpr95": _pct(fpr_at_tpr(conf[~ood], conf[ood])),
        "oscr": _pct(oscr(conf, correct, ood)),
    }


@dataclass
class EvalReport:
    n_csid: int = 0
    n_csood: int = 0
    acc: float | None = None
    auroc: float | None = None
    fpr_at_tpr95: float | None = None
    oscr: float | None = None
    score_kind: str = "energy"
    per_domain: list = field(default_factory=list)
    per_batch: list = field(default_factory=list)

    def headline(self):
        return {k: getattr(self, k) for k in ("acc", "auroc", "fpr_at_tpr95", "oscr")}


class Accumulator:
    """Collects per-batch pre-update logits with their hidden labels."""

    def __init__(self, score_kind="energy"):
        if score_kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {score_kind!r}; valid: {SCORE_KINDS}")
        self.score_kind = score_kind
        self._logits, self._y, self._ood, self._tags = [], [], [], []
        self.per_batch = []

    def add(self, logits, y, is_ood, domain_tag=None, diagnostics=None):
        self._logits.append(np.asarray(logits, dtype=np.float64))
        self._y.append(np.asarray(y))
        self._ood.append(np.asarray(is_ood, dtype=bool))
        self._tags.append(tuple(domain_tag) if domain_tag is not None else None)
        if diagnostics is not None:
            self.per_batch.append(diagnostics)

    def finalize(self):
        if self._logits:
            logits = np.concatenate(self._logits)
            y = np.concatenate(self._y)
            ood = np.concatenate(self._ood)
        else:
            logits, y, ood = np.zeros((0, 0)), np.zeros(0, dtype=int), np.zeros(0, dtype=bool)
        report = EvalReport(score_kind=self.score_kind, per_batch=list(self.per_batch), **summarize(logits, y, ood, self.score_kind))
        seen = []
        for t in self._tags:
            if t is not None and t not in seen:
                seen.append(t)
        for tag in seen:
            idx = [i for i, t in enumerate(self._tags) if t == tag]
            row = summarize(
                np.concatenate([self._logits[i] for i in idx]),
                np.concatenate([self._y[i] for i in idx]),
                np.concatenate([self._ood[i] for i in idx]),
                self.score_kind,
            )
            report.per_domain.append({"domain_kind": tag[0], "severity": tag[1], **row})
        return report


def config_digest(cfg_dict):
    text = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def report_dict(report, method, digest, seed=None):
    d = asdict(report)
    d.pop("per_batch")
    return {"method": method, "seed": seed, "config_digest": digest, **d}


def write_report_json(report, path, method, digest, seed=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_dict(report, method, digest, seed), fh, indent=2)
        fh.write("\n")


CSV_FIELDS = ("method", "seed", "acc", "auroc", "fpr95", "oscr", "config_digest")


def csv_row(report, method, seed, digest):
    def fmt(v):
        return "" if v is None else repr(float(v))

    return [method, seed, fmt(report.acc), fmt(report.auroc), fmt(report.fpr_at_tpr95), fmt(report.oscr), digest]


def write_results_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        w.writerows(rows)

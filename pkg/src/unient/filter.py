"""Distribution-aware split of a test batch into pseudo-known and pseudo-unknown samples.

Scores come from the frozen source feature extractor: the best cosine match
against the class prototypes, min-max normalized over the batch. A
two-component 1-d Gaussian mixture fit by EM turns the scores into
posteriors of belonging to the known-class (high-score) component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6
EM_TOL = 1e-8
EM_MAX_ITER = 200
DEGENERATE_GAP = 1e-3
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmParams:
    mu_csid: float
    var_csid: float
    mu_csood: float
    var_csood: float
    w_csid: float
    w_csood: float
    iterations_run: int = 0
    final_log_likelihood: float = float("nan")
    history: tuple = ()

    @property
    def degenerate(self):
        return abs(self.mu_csid - self.mu_csood) < DEGENERATE_GAP


@dataclass
class FilterOutput:
    scores: np.ndarray
    posteriors: np.ndarray
    gmm: GmmParams | None
    csid_idx: np.ndarray
    csood_idx: np.ndarray
    degenerate: bool = False
    raw: np.ndarray = field(default=None, repr=False)


def max_cosine(features, prototypes):
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    fn = np.linalg.norm(f, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(fn == 0):
        raise ValueError(f"zero-norm feature rows at {np.flatnonzero(fn == 0).tolist()}; cosine undefined")
    if np.any(pn == 0):
        raise ValueError(f"zero-norm prototype rows at {np.flatnonzero(pn == 0).tolist()}; cosine undefined")
    return ((f / fn[:, None]) @ (p / pn[:, None]).T).max(axis=1)


def minmax(raw):
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def csood_score(features_source, prototypes):
    """Per-sample score in [0, 1]; higher means closer to a known class."""
    return minmax(max_cosine(features_source, prototypes))


def _log_normal(s, mu, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (s - mu) ** 2 / var)


def _log_joint(s, mu, var, w):
    # columns: [csood, csid]
    return np.stack(
        [np.log(w[0]) + _log_normal(s, mu[0], var[0]), np.log(w[1]) + _log_normal(s, mu[1], var[1])],
        axis=1,
    )


def fit_gmm2(scores, init=None, tol=EM_TOL, max_iter=EM_MAX_ITER):
    """Two-component EM on 1-d scores.

    Initialized from a median split (lower half -> csOOD component) unless a
    previous fit is passed as ``init``. Components are relabeled at the end so
    that the csID mean is the larger one.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = len(s)
    if n < 4:
        raise ValueError(f"fit_gmm2 needs at least 4 scores, got {n}")

    if init is None:
        srt = np.sort(s)
        lo, hi = srt[: n // 2], srt[n // 2 :]
        mu = np.array([lo.mean(), hi.mean()])
        var = np.maximum([lo.var(), hi.var()], VAR_FLOOR)
        w = np.array([len(lo), len(hi)], dtype=np.float64) / n
    else:
        mu = np.array([init.mu_csood, init.mu_csid])
        var = np.maximum([init.var_csood, init.var_csid], VAR_FLOOR)
        w = np.array([init.w_csood, init.w_csid])

    history = []
    ll_prev = None
    it = 0
    for it in range(1, max_iter + 1):
        lj = _log_joint(s, mu, var, w)
        lse = np.logaddexp(lj[:, 0], lj[:, 1])
        ll = float(lse.sum())
        history.append(ll)
        if ll_prev is not None and ll - ll_prev < tol:
            break
        ll_prev = ll
        r = np.exp(lj - lse[:, None])
        nk = r.sum(axis=0)
        if np.any(nk <= 0):
            break
        w = nk / n
        mu = (r * s[:, None]).sum(axis=0) / nk
        var = np.maximum((r * (s[:, None] - mu) ** 2).sum(axis=0) / nk, VAR_FLOOR)
    else:
        lj = _log_joint(s, mu, var, w)
        history.append(float(np.logaddexp(lj[:, 0], lj[:, 1]).sum()))

    if mu[0] > mu[1]:
        mu, var, w = mu[::-1], var[::-1], w[::-1]
    w = w / w.sum()
    return GmmParams(
        mu_csid=float(mu[1]),
        var_csid=float(var[1]),
        mu_csood=float(mu[0]),
        var_csood=float(var[0]),
        w_csid=float(w[1]),
        w_csood=float(w[0]),
        iterations_run=it,
        final_log_likelihood=history[-1],
        history=tuple(history),
    )


def posteriors(scores, gmm):
    """Responsibility of the csID component for each score; all ones if degenerate."""
    s = np.asarray(scores, dtype=np.float64)
    if gmm is None or gmm.degenerate:
        return np.ones(s.shape)
    lj = _log_joint(
        s,
        (gmm.mu_csood, gmm.mu_csid),
        (gmm.var_csood, gmm.var_csid),
        (gmm.w_csood, gmm.w_csid),
    )
    return np.clip(np.exp(lj[:, 1] - np.logaddexp(lj[:, 0], lj[:, 1])), 0.0, 1.0)


def split(posterior):
    """Index partition: posterior >= 0.5 -> pseudo-csID, else pseudo-csOOD."""
    pi = np.asarray(posterior)
    keep = pi >= 0.5
    return np.flatnonzero(keep), np.flatnonzero(~keep)


def run_filter(features_source, prototypes, init=None):
    raw = max_cosine(features_source, prototypes)
    scores = minmax(raw)
    gmm = None
    degenerate = raw.max() == raw.min() or len(scores) < 4
    if not degenerate:
        gmm = fit_gmm2(scores, init=init)
        degenerate = gmm.degenerate
    pi = np.ones(len(scores)) if degenerate else posteriors(scores, gmm)
    csid_idx, csood_idx = split(pi)
    return FilterOutput(scores, pi, gmm, csid_idx, csood_idx, degenerate, raw)


class SourceFilter:
    """Holds a frozen copy of the source model and scores batches with it."""

    def __init__(self, model0, stats_mode="batch", warm_start=False):
        from . import nn

        self._nn = nn
        self.model = model0.copy()
        self.protos = nn.prototypes(self.model)
        self.stats_mode = stats_mode
        self.warm_start = warm_start
        self._last = None

    def __call__(self, x):
        feats = self._nn.forward(self.model, x, self.stats_mode).features.values
        out = run_filter(feats, self.protos, init=self._last if self.warm_start else None)
        if out.gmm is not None and not out.degenerate:
            self._last = out.gmm
        return out

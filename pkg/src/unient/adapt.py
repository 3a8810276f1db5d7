"""Online test-time adaptation: Source, BN-Adapt, TENT, UniEnt and UniEnt+.

Gradient methods update only the batch-norm affine parameters with Adam.
Predictions for evaluation come from the same forward pass that feeds the
loss, i.e. before that batch's update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .filter import SourceFilter
from .metrics import Accumulator
from .optim import Adam, AdamState

log = logging.getLogger(__name__)

METHODS = ("source", "bn_adapt", "tent", "unient", "unient_plus")
GRADIENT_METHODS = ("tent", "unient", "unient_plus")


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    method: str = "unient"
    lambda1: float = 0.2
    lambda2: float = 0.2
    lambda_tent: float = 0.0
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    param_scope: str = "bn_affine_only"
    filter_stats: str = "batch"
    warm_start: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_tent < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.param_scope != "bn_affine_only":
            raise ValueError(f"unsupported param_scope {self.param_scope!r}")
        return self


# ---------------------------------------------------------------- objectives


def _masked_mean(h, idx, n):
    mask = np.zeros(n)
    mask[idx] = 1.0
    return ad.mul_scalar(ad.sum(ad.elementwise_mul(h, ad.Tensor(mask))), 1.0 / len(idx))


def marginal_entropy(probs):
    fbar = ad.mean_rows(probs)
    return ad.mul_scalar(ad.sum(ad.elementwise_mul(fbar, ad.log(fbar, floor=ad.LOG_FLOOR))), -1.0)


def tent_loss(probs, lam=0.0):
    """Mean per-sample entropy minus ``lam`` times the marginal entropy."""
    loss = ad.mul_scalar(ad.sum(ad.entropy_rows(probs)), 1.0 / probs.values.shape[0])
    if lam:
        loss = ad.add(loss, ad.mul_scalar(marginal_entropy(probs), -lam))
    return loss


def unient_loss(probs, csid_idx, csood_idx, lambda1, lambda2):
    """Entropy minimized on pseudo-csID rows and maximized on pseudo-csOOD rows.

    Each side is averaged over its own rows; an empty side contributes 0. The
    marginal term uses the mean prediction over the whole batch.
    """
    n = probs.values.shape[0]
    h = ad.entropy_rows(probs)
    loss = ad.Tensor(0.0)
    if len(csid_idx):
        loss = ad.add(loss, _masked_mean(h, csid_idx, n))
    if len(csood_idx) and lambda1:
        loss = ad.add(loss, ad.mul_scalar(_masked_mean(h, csood_idx, n), -lambda1))
    if lambda2:
        loss = ad.add(loss, ad.mul_scalar(marginal_entropy(probs), -lambda2))
    return loss


def unient_plus_loss(probs, pi, lambda1, lambda2):
    """Posterior-weighted variant: both entropy sums are normalized by the batch size."""
    n = probs.values.shape[0]
    pi = np.asarray(pi, dtype=np.float64)
    weights = ad.Tensor((pi + lambda1 * (pi - 1.0)) / n)
    loss = ad.sum(ad.elementwise_mul(ad.entropy_rows(probs), weights))
    if lambda2:
        loss = ad.add(loss, ad.mul_scalar(marginal_entropy(probs), -lambda2))
    return loss


# ---------------------------------------------------------------- stepping


def make_optimizer(cfg, state=None):
    return Adam(lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps, state=state or AdamState())


def adapt_step(model, batch_x, cfg, filter_out=None, opt=None, batch_index=None):
    """Predict on one batch, then (for gradient methods) update BN gamma/beta.

    ``batch_x`` is the raw input matrix only; labels never reach this function.
    Returns ``(logits, model)`` where logits are the pre-update predictions.
    """
    if not isinstance(batch_x, np.ndarray):
        raise TypeError(f"adapt_step takes the input matrix only, got {type(batch_x).__name__}")
    method = cfg.method
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    if method == "source":
        return nn.forward(model, batch_x, "running").logits.values, model
    if method == "bn_adapt":
        return nn.forward(model, batch_x, "batch").logits.values, model

    names = model.bn_affine_names()
    out = nn.forward(model, batch_x, "batch", track=names)
    logits = out.logits.values.copy()
    if method == "tent":
        loss = tent_loss(out.probs, cfg.lambda_tent)
    elif method == "unient":
        if filter_out is None:
            csid, csood = np.arange(len(batch_x)), np.array([], dtype=int)
        else:
            csid, csood = filter_out.csid_idx, filter_out.csood_idx
        loss = unient_loss(out.probs, csid, csood, cfg.lambda1, cfg.lambda2)
    else:
        pi = np.ones(len(batch_x)) if filter_out is None else filter_out.posteriors
        loss = unient_plus_loss(out.probs, pi, cfg.lambda1, cfg.lambda2)
    if not np.isfinite(loss.values):
        raise AdaptationError(f"non-finite loss (method={method}, batch={batch_index})")
    ad.backward(loss)
    if opt is None:
        opt = make_optimizer(cfg)
    opt.step(model.params(), {k: t.grad for k, t in out.leaves.items()})
    return logits, model


def run_stream(model0, batches, cfg, score_kind="energy", on_batch=None):
    """Adapt online over ``batches`` (LabeledBatch iterable) without resets.

    The model is copied first; ``model0`` itself is never modified. Labels go
    to the accumulator only. ``on_batch(index, batch, filter_out)`` is called
    after each filter pass, for diagnostics.
    Returns ``(EvalReport, final_model)``.
    """
    cfg.validate()
    model = model0.copy()
    opt = make_optimizer(cfg)
    source_filter = None
    if cfg.method in ("unient", "unient_plus"):
        source_filter = SourceFilter(model0, stats_mode=cfg.filter_stats, warm_start=cfg.warm_start)
    acc = Accumulator(score_kind)
    for t, batch in enumerate(batches):
        fo = source_filter(batch.x) if source_filter is not None else None
        if on_batch is not None:
            on_batch(t, batch, fo)
        logits, model = adapt_step(model, batch.x, cfg, fo, opt, batch_index=t)
        diag = {"batch": t, "domain": list(batch.domain_tag)}
        if fo is not None:
            diag.update(
                n_pseudo_csid=int(len(fo.csid_idx)),
                n_pseudo_csood=int(len(fo.csood_idx)),
                degenerate=bool(fo.degenerate),
            )
        acc.add(logits, batch.y, batch.is_csood, batch.domain_tag, diag)
    return acc.finalize(), model

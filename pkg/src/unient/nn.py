"""Batch-normalized MLP classifier: forward pass, pretraining, prototypes, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .optim import Adam

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STATS_MODES = ("batch", "running", "train")
_BN_KEYS = ("W", "b", "gamma", "beta", "running_mean", "running_var")


class ArchitectureError(ValueError):
    pass


class DivergedError(RuntimeError):
    pass


@dataclass
class BNLayer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ModelState:
    layers: list
    W_head: np.ndarray
    b_head: np.ndarray

    @property
    def dims(self):
        return [self.layers[0].W.shape[1]] + [layer.W.shape[0] for layer in self.layers] + [self.W_head.shape[0]]

    @property
    def n_classes(self):
        return self.W_head.shape[0]

    @property
    def feat_dim(self):
        return self.W_head.shape[1]

    def copy(self):
        return copy.deepcopy(self)

    def params(self):
        """Flat name -> array mapping. Arrays are the model's own storage."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k in _BN_KEYS:
                out[f"layers.{i}.{k}"] = getattr(layer, k)
        out["head.W"] = self.W_head
        out["head.b"] = self.b_head
        return out

    def bn_affine_names(self):
        return [f"layers.{i}.{k}" for i in range(len(self.layers)) for k in ("gamma", "beta")]

    def trainable_names(self):
        names = [f"layers.{i}.{k}" for i in range(len(self.layers)) for k in ("W", "b", "gamma", "beta")]
        return names + ["head.W", "head.b"]


@dataclass
class PretrainConfig:
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    target_loss: float = 0.01
    bn_momentum: float = 0.1
    n_train_per_class: int = 500
    n_test_per_class: int = 250


def init_model(dims, rng):
    """Uniform(+-1/sqrt(fan_in)) weights and biases; BN at identity."""
    dims = list(dims)
    if len(dims) < 3:
        raise ArchitectureError(f"need at least input, one hidden and output dim, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-2], dims[1:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            BNLayer(
                W=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                b=rng.uniform(-bound, bound, size=fan_out),
                gamma=np.ones(fan_out),
                beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out),
                running_var=np.ones(fan_out),
            )
        )
    bound = 1.0 / np.sqrt(dims[-2])
    return ModelState(
        layers=layers,
        W_head=rng.uniform(-bound, bound, size=(dims[-1], dims[-2])),
        b_head=rng.uniform(-bound, bound, size=dims[-1]),
    )


class ForwardResult(NamedTuple):
    features: ad.Tensor
    logits: ad.Tensor
    probs: ad.Tensor
    leaves: dict


def forward(model, x, stats_mode="running", track=(), momentum=0.1):
    """Run the classifier on ``x[batch, d]``.

    ``stats_mode`` selects BN statistics: ``running`` (stored), ``batch``
    (current batch, stored stats untouched) or ``train`` (current batch, and
    the running averages are updated with ``momentum``). Parameters named in
    ``track`` become gradient-carrying leaves returned in ``leaves``.
    """
    if stats_mode not in STATS_MODES:
        raise ValueError(f"stats_mode must be one of {STATS_MODES}, got {stats_mode!r}")
    x = np.asarray(x.values if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ArchitectureError(f"input shape {list(x.shape)} does not match model input dim {model.dims[0]}")
    if stats_mode != "running" and x.shape[0] < 2:
        raise ArchitectureError(f"batch statistics need batch >= 2, got {x.shape[0]}")

    track = set(track)
    params = model.params()
    leaves = {name: ad.Tensor(params[name], requires_grad=True) for name in track}

    def p(name):
        return leaves[name] if name in leaves else ad.Tensor(params[name])

    h = ad.Tensor(x)
    for i, layer in enumerate(model.layers):
        W = p(f"layers.{i}.W")
        h = ad.add_bias(ad.matmul(h, ad.transpose(W)), p(f"layers.{i}.b"))
        gamma, beta = p(f"layers.{i}.gamma"), p(f"layers.{i}.beta")
        if stats_mode == "running":
            h = ad.batchnorm_eval(h, gamma, beta, layer.running_mean, layer.running_var)
        else:
            h, mean, var = ad.batchnorm_train(h, gamma, beta)
            if stats_mode == "train":
                n = x.shape[0]
                layer.running_mean[:] = (1 - momentum) * layer.running_mean + momentum * mean
                layer.running_var[:] = (1 - momentum) * layer.running_var + momentum * var * n / (n - 1)
        h = ad.relu(h)
    logits = ad.add_bias(ad.matmul(h, ad.transpose(p("head.W"))), p("head.b"))
    probs = ad.softmax_rows(logits)
    return ForwardResult(h, logits, probs, leaves)


def predict_logits(model, x, stats_mode="running"):
    return forward(model, x, stats_mode).logits.values


def accuracy(model, x, y, stats_mode="running"):
    return float(np.mean(predict_logits(model, x, stats_mode).argmax(axis=1) == np.asarray(y)))


def cross_entropy(logits, y):
    n, c = logits.values.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    return ad.mul_scalar(ad.sum(ad.elementwise_mul(ad.log_softmax_rows(logits), ad.Tensor(onehot))), -1.0 / n)


def pretrain(data, cfg=None, seed=0):
    """Train all parameters with Adam + cross-entropy on a labeled source set.

    Stops after ``cfg.max_epochs`` or once an epoch's mean loss is below
    ``cfg.target_loss``. Running BN statistics follow an exponential moving
    average of batch statistics.
    """
    cfg = cfg or PretrainConfig()
    x = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y)
    n_classes = int(y.max()) + 1 if len(y) else 0
    n_classes = max(n_classes, getattr(data, "n_classes", n_classes))
    if np.any(y < 0):
        raise ValueError("labels must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    model = init_model([x.shape[1], *cfg.hidden, n_classes], rng)
    if cfg.max_epochs <= 0:
        return model

    opt = Adam(lr=cfg.lr)
    names = model.trainable_names()
    n = len(x)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            out = forward(model, x[idx], "train", track=names, momentum=cfg.bn_momentum)
            loss = cross_entropy(out.logits, y[idx])
            if not np.isfinite(loss.values):
                raise DivergedError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            opt.step(model.params(), {k: t.grad for k, t in out.leaves.items()})
            total += loss.item() * len(idx)
            seen += len(idx)
        epoch_loss = total / max(seen, 1)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
        if epoch_loss < cfg.target_loss:
            break
    return model


def prototypes(model):
    """Source class prototypes: the head's weight rows (bias excluded), copied."""
    return model.W_head.copy()


# ---------------------------------------------------------------- checkpoints


def _arr(a):
    return [float(v) for v in np.asarray(a).ravel()]


def checkpoint_dict(model, seed):
    return {
        "format_version": FORMAT_VERSION,
        "dims": model.dims,
        "layers": [{k: _arr(getattr(layer, k)) for k in _BN_KEYS} for layer in model.layers],
        "head": {"W": _arr(model.W_head), "b": _arr(model.b_head)},
        "seed": seed,
    }


def _num_list(values):
    # 17 significant digits round-trip any f64 exactly
    return "[" + ", ".join(f"{v:.17g}" for v in values) + "]"


def _emit(obj, indent=0):
    pad, inner = " " * indent, " " * (indent + 1)
    if isinstance(obj, dict):
        items = [f"{inner}{json.dumps(k)}: {_emit(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list) and obj and all(isinstance(v, float) for v in obj):
        return _num_list(obj)
    if isinstance(obj, list) and any(isinstance(v, dict) for v in obj):
        return "[\n" + ",\n".join(inner + _emit(v, indent + 1) for v in obj) + "\n" + pad + "]"
    return json.dumps(obj)


def save_checkpoint(model, path, seed):
    doc = checkpoint_dict(model, seed)
    for name, arr in model.params().items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to save non-finite parameter {name}")
    Path(path).write_text(_emit(doc) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return ``(model, seed)`` from a checkpoint JSON file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    dims = doc["dims"]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-2], dims[1:-1])):
        rec = doc["layers"][i]
        layers.append(
            BNLayer(
                W=np.array(rec["W"], dtype=np.float64).reshape(fan_out, fan_in),
                **{k: np.array(rec[k], dtype=np.float64) for k in _BN_KEYS[1:]},
            )
        )
    model = ModelState(
        layers=layers,
        W_head=np.array(doc["head"]["W"], dtype=np.float64).reshape(dims[-1], dims[-2]),
        b_head=np.array(doc["head"]["b"], dtype=np.float64),
    )
    return model, doc["seed"]

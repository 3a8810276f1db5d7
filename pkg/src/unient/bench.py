"""Deterministic synthetic open-set benchmark.

Known classes are unit-covariance Gaussian clusters; unknown classes are
further clusters of the same kind, kept a bounded distance away from every
known-class mean. Target batches mix the two and pass through a seeded
corruption that plays the role of the covariate shift.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

CORRUPTIONS = ("gauss_noise", "mult_noise", "rotate", "scale_shift", "mask")
MAX_PLACEMENT_ATTEMPTS = 10_000
PROPOSAL_SPREAD = 2.0

# strength at severity 5; severity s uses fraction s/5 of it
GAUSS_SIGMA = 1.0
MULT_SIGMA = 0.5
ROTATE_ANGLE = 0.25 * np.pi
SCALE_GAIN = 1.0
SHIFT_NORM = 6.0
MASK_FRACTION = 0.25


class InfeasibleGeometryError(ValueError):
    pass


@dataclass
class BenchmarkConfig:
    d: int = 16
    C_s: int = 8
    C_open: int = 4
    cluster_separation: float = 6.0
    corruption_sequence: list = field(default_factory=lambda: [(k, 5) for k in CORRUPTIONS])
    batches_per_domain: int = 100
    batch_size: int = 200
    csood_ratio: float = 1.0
    unknown_class_count_active: int | None = None
    repeat_rounds: int = 1
    seed: int = 42
    ood_min_fraction: float = 0.6

    def __post_init__(self):
        self.corruption_sequence = [(str(k), int(s)) for k, s in self.corruption_sequence]
        if self.unknown_class_count_active is None:
            self.unknown_class_count_active = self.C_open

    def validate(self):
        if self.C_s < 2:
            raise ValueError(f"C_s must be >= 2, got {self.C_s}")
        if self.C_open < 1:
            raise ValueError(f"C_open must be >= 1, got {self.C_open}")
        if not 1 <= self.unknown_class_count_active <= self.C_open:
            raise ValueError(
                f"unknown_class_count_active must be in [1, {self.C_open}], got {self.unknown_class_count_active}"
            )
        if not 0.0 <= self.csood_ratio <= 1.0:
            raise ValueError(f"csood_ratio must be in [0, 1], got {self.csood_ratio}")
        if self.repeat_rounds < 1:
            raise ValueError(f"repeat_rounds must be >= 1, got {self.repeat_rounds}")
        for kind, sev in self.corruption_sequence:
            if kind not in CORRUPTIONS:
                raise ValueError(f"unknown corruption kind {kind!r}; valid: {CORRUPTIONS}")
            if sev not in range(1, 6):
                raise ValueError(f"severity must be in 1..5, got {sev}")
        n_id, _ = batch_split(self.batch_size, self.csood_ratio)
        if n_id < 1:
            raise ValueError(f"batch_size {self.batch_size} leaves no csID samples at ratio {self.csood_ratio}")
        return self

    @property
    def n_batches(self):
        return self.batches_per_domain * len(self.corruption_sequence) * self.repeat_rounds


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    is_csood: np.ndarray
    domain_tag: tuple = ("clean", 0)

    def __len__(self):
        return len(self.y)


def batch_split(batch_size, ratio):
    """``(n_csid, n_csood)`` with ``n_csood / n_csid`` as close to ``ratio`` as integers allow."""
    n_ood = int(round(batch_size * ratio / (1.0 + ratio)))
    return batch_size - n_ood, n_ood


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _kind_id(kind):
    return zlib.crc32(kind.encode())


# stream tags for named sub-streams
_GEOMETRY, _SOURCE, _CORRUPT, _SAMPLE = 1, 2, 3, 4


def cluster_means(cfg):
    """Rejection-sample ``(source_means[C_s, d], open_means[C_open, d])``.

    Source means are pairwise >= ``cluster_separation`` apart; each open mean
    keeps at least ``ood_min_fraction * cluster_separation`` from every source
    mean (and the full separation from other open means).
    """
    rng = _rng(cfg.seed, _GEOMETRY)
    sep = cfg.cluster_separation
    # proposal scale puts typical pairwise distances near PROPOSAL_SPREAD * sep
    scale = PROPOSAL_SPREAD * sep / np.sqrt(2 * cfg.d)

    def place(count, existing, min_to_existing, min_to_own):
        placed = []
        attempts = 0
        while len(placed) < count:
            if attempts >= MAX_PLACEMENT_ATTEMPTS:
                raise InfeasibleGeometryError(
                    f"could not place {count} clusters with separation {sep} in d={cfg.d} "
                    f"within {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            attempts += 1
            cand = rng.normal(0.0, scale, size=cfg.d)
            if existing is not None and np.min(np.linalg.norm(existing - cand, axis=1)) < min_to_existing:
                continue
            if placed and np.min(np.linalg.norm(np.array(placed) - cand, axis=1)) < min_to_own:
                continue
            placed.append(cand)
        return np.array(placed)

    src = place(cfg.C_s, None, 0.0, sep)
    ood = place(cfg.C_open, src, cfg.ood_min_fraction * sep, sep)
    return src, ood


def make_source(cfg, n_per_class=500, split="train"):
    """Clean labeled samples from the known-class clusters, shuffled."""
    cfg.validate()
    src, _ = cluster_means(cfg)
    rng = _rng(cfg.seed, _SOURCE, zlib.crc32(split.encode()))
    y = np.repeat(np.arange(cfg.C_s), n_per_class)
    x = src[y] + rng.normal(size=(len(y), cfg.d))
    order = rng.permutation(len(y))
    return LabeledBatch(x=x[order], y=y[order], is_csood=np.zeros(len(y), dtype=bool))


# ---------------------------------------------------------------- corruptions


@dataclass
class CorruptionParams:
    kind: str
    rotation_generator: np.ndarray | None = None
    gain: np.ndarray | None = None
    shift: np.ndarray | None = None
    mask_order: np.ndarray | None = None


def corruption_params(kind, d, seed):
    """Fixed per-domain transform parameters (independent of severity)."""
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption kind {kind!r}; valid: {CORRUPTIONS}")
    rng = _rng(seed, _CORRUPT, _kind_id(kind))
    params = CorruptionParams(kind)
    if kind == "rotate":
        g = rng.normal(size=(d, d))
        a = g - g.T
        # largest rotation angle = ROTATE_ANGLE keeps displacement monotone in strength
        a *= ROTATE_ANGLE / np.max(np.abs(np.linalg.eigvals(a)))
        params.rotation_generator = a
    elif kind == "scale_shift":
        params.gain = rng.uniform(-1.0, 1.0, size=d)
        s = rng.normal(size=d)
        params.shift = s / np.linalg.norm(s)
    elif kind == "mask":
        params.mask_order = rng.permutation(d)
    return params


def apply_corruption(x, params, strength, rng):
    """Apply a corruption at ``strength`` in [0, 1]; ``strength=0`` is the identity.

    ``rng`` supplies per-sample noise for the noise kinds.
    """
    x = np.asarray(x, dtype=np.float64)
    kind = params.kind
    if kind == "gauss_noise":
        return x + strength * GAUSS_SIGMA * rng.normal(size=x.shape)
    if kind == "mult_noise":
        return x * (1.0 + strength * MULT_SIGMA * rng.normal(size=x.shape))
    if kind == "rotate":
        return x @ expm(strength * params.rotation_generator).T
    if kind == "scale_shift":
        return x * (1.0 + strength * SCALE_GAIN * params.gain) + strength * SHIFT_NORM * params.shift
    if kind == "mask":
        k = int(round(strength * MASK_FRACTION * x.shape[-1]))
        out = x.copy()
        out[..., params.mask_order[:k]] = 0.0
        return out
    raise ValueError(f"unknown corruption kind {kind!r}; valid: {CORRUPTIONS}")


def corrupt(x, kind, severity, seed):
    if severity not in range(1, 6):
        raise ValueError(f"severity must be in 1..5, got {severity}")
    x = np.asarray(x, dtype=np.float64)
    params = corruption_params(kind, x.shape[-1], seed)
    return apply_corruption(x, params, severity / 5.0, _rng(seed, _CORRUPT, _kind_id(kind), 1))


# ---------------------------------------------------------------- target stream


def stream(cfg, source_model_unused=None, seed=None):
    """Yield target batches in protocol order: rounds, then domains, then batches.

    Cluster geometry follows ``cfg.seed``; ``seed`` (default ``cfg.seed``)
    drives corruption parameters and sampling. Each domain's parameters depend
    on (seed, kind) only, never on its position in the sequence.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    src, ood = cluster_means(cfg)
    n_id, n_ood = batch_split(cfg.batch_size, cfg.csood_ratio)
    n_active = cfg.unknown_class_count_active
    for rnd in range(cfg.repeat_rounds):
        for kind, sev in cfg.corruption_sequence:
            params = corruption_params(kind, cfg.d, seed)
            for b in range(cfg.batches_per_domain):
                rng = _rng(seed, _SAMPLE, _kind_id(kind), sev, rnd, b)
                y_id = rng.integers(0, cfg.C_s, size=n_id)
                y_ood = rng.integers(0, n_active, size=n_ood)
                x = np.concatenate([src[y_id], ood[y_ood]]) + rng.normal(size=(n_id + n_ood, cfg.d))
                y = np.concatenate([y_id, cfg.C_s + y_ood])
                order = rng.permutation(len(y))
                x, y = x[order], y[order]
                x = apply_corruption(x, params, sev / 5.0, rng)
                yield LabeledBatch(x=x, y=y, is_csood=y >= cfg.C_s, domain_tag=(kind, sev))


# ---------------------------------------------------------------- CSV dump


def dump_csv(batches, path):
    batches = list(batches)
    d = batches[0].x.shape[1] if batches else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["y", "is_csood", "domain_kind", "severity"])
        for batch in batches:
            kind, sev = batch.domain_tag
            for xi, yi, oi in zip(batch.x, batch.y, batch.is_csood):
                w.writerow([repr(float(v)) for v in xi] + [int(yi), int(bool(oi)), kind, int(sev)])


def load_csv(path, batch_size=None):
    """Read a dump back. Rows are regrouped into batches of ``batch_size``
    (default: one batch per contiguous domain run)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    d = header.index("y")
    groups = []
    for row in rows:
        tag = (row[d + 2], int(row[d + 3]))
        full = batch_size is not None and groups and len(groups[-1][1]) >= batch_size
        if not groups or groups[-1][0] != tag or full:
            groups.append((tag, []))
        groups[-1][1].append(row)
    out = []
    for tag, grp in groups:
        arr = np.array([[float(v) for v in r[:d]] for r in grp]).reshape(len(grp), d)
        y = np.array([int(r[d]) for r in grp])
        is_ood = np.array([r[d + 1] == "1" for r in grp])
        out.append(LabeledBatch(x=arr, y=y, is_csood=is_ood, domain_tag=tag))
    return out

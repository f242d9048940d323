"""The normalization family: plain, per-domain, and weighted variants.

All activations are laid out batch-first, ``[n_b, C]`` with one statistics
vector per channel. A layer owns one shared affine pair (gamma, beta)
regardless of how many domains it tracks; what varies per domain is the
mean/variance pair used to standardize each sample.

Three normalization routes coexist and must agree when their assignments
coincide:

* ``dabn_forward`` slices the batch per domain and standardizes each slice
  with its own statistics.
* ``wbn_hard_forward`` standardizes against every domain and keeps one term
  per sample via indicator masks.
* ``wbn_soft_forward`` blends all per-domain standardizations with
  per-sample convex weights, so a sample whose domain is unknown is
  normalized by a mixture of the known domains.

In training mode statistics come from the batch (hard subsets or
weight-averaged) and remain differentiable; in inference mode they are the
frozen running estimates. Running estimates are exponential moving
averages whose effective momentum is scaled by each domain's share of the
batch mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConstraintError, ShapeError

DEFAULT_EPS = 1e-5

# Column mass at or below this is treated as a collapsed domain: its running
# stats are frozen for the step and the normalizer gets a floor so the
# column-normalized weights stay finite.
COLLAPSE_MASS = 1e-8


@dataclass
class NormStats:
    """Per-channel mean/variance with the stabilizing epsilon.

    `mean` and `var` are 1-d tensors over channels; they may be graph nodes
    (training) or constants (inference).
    """

    mean: Tensor
    var: Tensor
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = Tensor(self.mean)
        if not isinstance(self.var, Tensor):
            self.var = Tensor(self.var)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ShapeError(
                f"mean/var must be matching 1-d vectors, got {self.mean.shape} and {self.var.shape}"
            )
        if self.epsilon <= 0:
            raise ConstraintError("epsilon must be positive")
        if np.any(self.var.data < 0):
            raise ConstraintError("variance must be nonnegative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def detached(self) -> "NormStats":
        return NormStats(self.mean.detach(), self.var.detach(), self.epsilon)


@dataclass
class AffineParams:
    """Shared scale/bias applied after standardization (one pair per layer)."""

    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        if not isinstance(self.gamma, Tensor):
            self.gamma = Tensor(self.gamma, requires_grad=True)
        if not isinstance(self.beta, Tensor):
            self.beta = Tensor(self.beta, requires_grad=True)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma/beta must be matching 1-d vectors")

    @classmethod
    def identity(cls, channels: int) -> "AffineParams":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
        )


class AssignmentMatrix:
    """Per-sample domain weights: rows are convex (sum 1, nonnegative).

    `w_hat(j)` is the column-normalized form used to weight batch
    statistics: each domain's column is rescaled to unit mass, with a small
    floor when a column has (near) zero mass.
    """

    ROW_SUM_TOL = 1e-6

    def __init__(self, w: Tensor):
        if not isinstance(w, Tensor):
            w = Tensor(w)
        if w.ndim != 2:
            raise ShapeError(f"assignment weights must be 2-d, got shape {w.shape}")
        if np.any(w.data < 0):
            raise ConstraintError("assignment weights must be nonnegative")
        row_err = np.abs(w.data.sum(axis=1) - 1.0).max(initial=0.0)
        if row_err > self.ROW_SUM_TOL:
            raise ConstraintError(f"assignment rows must sum to 1 (max deviation {row_err:.3g})")
        self.w = w

    @classmethod
    def one_hot(cls, domains, num_domains: int) -> "AssignmentMatrix":
        d = np.asarray(domains, dtype=np.intp)
        if d.size and (d.min() < 0 or d.max() >= num_domains):
            raise ConstraintError(f"domain label out of range for {num_domains} domains")
        w = np.zeros((d.shape[0], num_domains))
        w[np.arange(d.shape[0]), d] = 1.0
        return cls(Tensor(w))

    @property
    def batch_size(self) -> int:
        return self.w.shape[0]

    @property
    def num_domains(self) -> int:
        return self.w.shape[1]

    def column_mass(self) -> np.ndarray:
        return self.w.data.sum(axis=0)

    def w_hat_col(self, j: int) -> Tensor:
        """Column j normalized to unit mass, as an [n_b, 1] graph tensor."""
        col = ad.take_col(self.w, j)
        mass = col.sum(axis=0, keepdims=True)
        if float(mass.data) <= COLLAPSE_MASS:
            mass = mass + COLLAPSE_MASS
        return col / mass


def batch_stats(x: Tensor, epsilon: float = DEFAULT_EPS) -> NormStats:
    """Per-channel mean and biased (population) variance of a batch."""
    if x.ndim != 2:
        raise ShapeError(f"expected [batch, channels], got shape {x.shape}")
    if x.shape[0] < 2:
        raise ConstraintError(f"need at least 2 samples for batch statistics, got {x.shape[0]}")
    mean = x.mean(axis=0)
    var = ad.square(x - mean).mean(axis=0)
    return NormStats(mean, var, epsilon)


def _standardize(x: Tensor, stats: NormStats) -> Tensor:
    if stats.channels != x.shape[-1]:
        raise ShapeError(
            f"statistics over {stats.channels} channels cannot normalize shape {x.shape}"
        )
    return (x - stats.mean) / ad.sqrt(stats.var + stats.epsilon)


def _apply_affine(normalized: Tensor, affine: AffineParams) -> Tensor:
    if affine.gamma.shape[0] != normalized.shape[-1]:
        raise ShapeError(
            f"affine over {affine.gamma.shape[0]} channels cannot scale shape {normalized.shape}"
        )
    return affine.gamma * normalized + affine.beta


def bn_forward(x: Tensor, stats: NormStats, affine: AffineParams) -> Tensor:
    """Standardize by one statistics pair, then scale and shift."""
    return _apply_affine(_standardize(x, stats), affine)


def _domain_vector(domains, n: int) -> np.ndarray:
    if np.isscalar(domains):
        return np.full(n, int(domains), dtype=np.intp)
    d = np.asarray(domains, dtype=np.intp)
    if d.shape != (n,):
        raise ShapeError(f"expected one domain index per sample, got shape {d.shape}")
    return d


def dabn_forward(
    x: Tensor,
    domains,
    affine: AffineParams,
    stats: list[NormStats] | None = None,
    epsilon: float = DEFAULT_EPS,
) -> Tensor:
    """Normalize each sample with the statistics of its own domain.

    `domains` is a single index for a homogeneous batch or one index per
    sample. With `stats=None` (training) the statistics of each domain are
    computed from that domain's slice of the batch, which must hold at
    least 2 samples; otherwise the given per-domain statistics are used.
    """
    d = _domain_vector(domains, x.shape[0])
    if d.size and d.min() < 0:
        raise ConstraintError("domain indices must be nonnegative")
    if stats is not None and d.size and d.max() >= len(stats):
        raise ConstraintError(f"domain index {d.max()} out of range for {len(stats)} domains")

    pieces = []
    for j in np.unique(d):
        rows = np.flatnonzero(d == j)
        piece = ad.select_rows(x, rows)
        st = batch_stats(piece, epsilon) if stats is None else stats[j]
        pieces.append(ad.scatter_rows(_standardize(piece, st), rows, x.shape[0]))
    normalized = pieces[0]
    for piece in pieces[1:]:
        normalized = normalized + piece
    return _apply_affine(normalized, affine)


def weighted_domain_stats(
    x: Tensor, assignment: AssignmentMatrix, epsilon: float = DEFAULT_EPS
) -> list[NormStats]:
    """Per-domain statistics estimated from soft assignment weights.

    Each domain's column of weights is normalized to unit mass and used as
    a discrete distribution over the batch: the mean is the weighted sum of
    samples and the variance the weighted sum of squared deviations (no
    effective-sample-size correction). A column with (near) zero mass
    yields zero statistics; its weights are too small to contribute to the
    blended normalization anyway.
    """
    if x.shape[0] != assignment.batch_size:
        raise ShapeError(
            f"assignment for {assignment.batch_size} samples cannot weight batch {x.shape}"
        )
    stats = []
    for j in range(assignment.num_domains):
        w_hat = assignment.w_hat_col(j)
        mean = (w_hat * x).sum(axis=0)
        var = (w_hat * ad.square(x - mean)).sum(axis=0)
        stats.append(NormStats(mean, var, epsilon))
    return stats


def wbn_hard_forward(
    x: Tensor,
    domains,
    affine: AffineParams,
    stats: list[NormStats] | None = None,
    num_domains: int | None = None,
    epsilon: float = DEFAULT_EPS,
) -> Tensor:
    """Indicator-weighted normalization: exactly one domain term per sample.

    With `stats=None` the per-domain statistics are estimated from the
    batch through the one-hot assignment weights.
    """
    d = _domain_vector(domains, x.shape[0])
    if stats is not None:
        n_dom = len(stats)
    elif num_domains is not None:
        n_dom = num_domains
    else:
        n_dom = int(d.max()) + 1 if d.size else 1
    assignment = AssignmentMatrix.one_hot(d, n_dom)
    if stats is None:
        stats = weighted_domain_stats(x, assignment, epsilon)

    out = None
    for j in range(n_dom):
        mask = (d == j).astype(np.float64)[:, None]
        if not mask.any():
            continue
        term = Tensor(mask) * _standardize(x, stats[j])
        out = term if out is None else out + term
    return _apply_affine(out, affine)


def wbn_soft_forward(
    x: Tensor, assignment: AssignmentMatrix, stats: list[NormStats], affine: AffineParams
) -> Tensor:
    """Convex blend of per-domain standardizations, weighted per sample."""
    if assignment.num_domains != len(stats):
        raise ShapeError(
            f"{assignment.num_domains} weight columns for {len(stats)} domain statistics"
        )
    if assignment.batch_size != x.shape[0]:
        raise ShapeError(
            f"assignment for {assignment.batch_size} samples cannot weight batch {x.shape}"
        )
    out = None
    for j, st in enumerate(stats):
        term = ad.take_col(assignment.w, j) * _standardize(x, st)
        out = term if out is None else out + term
    return _apply_affine(out, affine)


@dataclass
class RunningStats:
    """Per-domain inference statistics: mass-scaled exponential moving averages.

    Updates happen only in training mode. Each domain moves toward its
    batch estimate with effective momentum ``momentum * mass_j / n_b``, so
    a domain owning the entire batch uses the base momentum and an absent
    domain stays put. Domains whose batch mass is at the collapse floor are
    frozen for the step and counted in ``collapse_count``.
    """

    num_domains: int
    channels: int
    epsilon: float = DEFAULT_EPS
    momentum: float = 0.1
    mean: np.ndarray = field(init=False)
    var: np.ndarray = field(init=False)
    seen_mass: np.ndarray = field(init=False)
    collapse_count: int = field(init=False, default=0)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConstraintError("momentum must lie in [0, 1)")
        self.mean = np.zeros((self.num_domains, self.channels))
        self.var = np.ones((self.num_domains, self.channels))
        self.seen_mass = np.zeros(self.num_domains)

    def stats(self, j: int) -> NormStats:
        return NormStats(Tensor(self.mean[j]), Tensor(self.var[j]), self.epsilon)

    def stats_list(self) -> list[NormStats]:
        return [self.stats(j) for j in range(self.num_domains)]


def update_running_stats(
    running: RunningStats, batch: list[NormStats], mass, batch_size: int
) -> RunningStats:
    """Fold one training batch's per-domain statistics into the running estimate."""
    mass = np.asarray(mass, dtype=np.float64)
    if len(batch) != running.num_domains or mass.shape != (running.num_domains,):
        raise ShapeError(
            f"expected statistics and mass for {running.num_domains} domains"
        )
    for j, st in enumerate(batch):
        if mass[j] <= COLLAPSE_MASS:
            running.collapse_count += 1
            continue
        m = running.momentum * (mass[j] / batch_size)
        running.mean[j] = (1.0 - m) * running.mean[j] + m * st.mean.data
        running.var[j] = (1.0 - m) * running.var[j] + m * st.var.data
        running.seen_mass[j] += mass[j]
    return running

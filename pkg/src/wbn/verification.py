"""Finite-difference verification of every differentiable operation.

Each check scalarizes an operation against a fixed random weighting and
compares the analytic gradient with central differences at several random
points, for each differentiable input in turn. Points are resampled until
no coordinate sits within 1e-3 of zero, keeping relu checks away from the
kink. Convex assignment weights are perturbed through softmax logits so
perturbed points stay on the constraint set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import LossConfig, log_loss, total_loss
from .norm import (
    AffineParams,
    AssignmentMatrix,
    NormStats,
    batch_stats,
    bn_forward,
    dabn_forward,
    wbn_hard_forward,
    wbn_soft_forward,
    weighted_domain_stats,
)
from .branch import global_pool


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _sample(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    # margin keeps every coordinate clear of the relu kink and keeps
    # gradient entries large enough that relative error is meaningful
    while True:
        x = rng.normal(0.0, 1.0, shape)
        if np.abs(x).min(initial=1.0) >= margin:
            return x


def _positive(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.5, 2.0, shape)


def _affine(rng: np.random.Generator, channels: int) -> AffineParams:
    return AffineParams(
        Tensor(_positive(rng, channels), requires_grad=True),
        Tensor(_sample(rng, channels), requires_grad=True),
    )


def _fixed_stats(rng: np.random.Generator, domains: int, channels: int) -> list[NormStats]:
    return [
        NormStats(Tensor(_sample(rng, channels)), Tensor(_positive(rng, channels)))
        for _ in range(domains)
    ]


def _soft_logits(rng: np.random.Generator, n: int, domains: int) -> np.ndarray:
    return rng.normal(0.0, 1.0, (n, domains))


def _assignment(logits: Tensor) -> AssignmentMatrix:
    return AssignmentMatrix(ad.softmax(logits))


Check = Callable[[np.random.Generator, float], float]


def _suite() -> list[tuple[str, Check]]:
    n, c, dom, k = 4, 3, 2, 3

    def weighted(out: Tensor, weight: np.ndarray) -> Tensor:
        return (out * Tensor(weight)).sum()

    def chk(f, point, step):
        return grad_check(f, Tensor(point), step)

    def binary(op):
        def run(rng, step):
            a, b, w = _sample(rng, (n, c)), _sample(rng, (n, c)), _sample(rng, (n, c))
            if op is ad.div:
                b = _positive(rng, (n, c))
            err = chk(lambda t: weighted(op(t, Tensor(b)), w), a, step)
            return max(err, chk(lambda t: weighted(op(Tensor(a), t), w), b, step))

        return run

    def unary(op, positive=False):
        def run(rng, step):
            x = _positive(rng, (n, c)) if positive else _sample(rng, (n, c))
            w = _sample(rng, (n, c))
            return chk(lambda t: weighted(op(t), w), x, step)

        return run

    def matmul_check(rng, step):
        a, b, w = _sample(rng, (3, 4)), _sample(rng, (4, 2)), _sample(rng, (3, 2))
        err = chk(lambda t: weighted(t @ Tensor(b), w), a, step)
        return max(err, chk(lambda t: weighted(Tensor(a) @ t, w), b, step))

    def softmax_check(rng, step):
        x, w = _sample(rng, (n, k)), _sample(rng, (n, k))
        return chk(lambda t: weighted(ad.softmax(t), w), x, step)

    def reductions(op):
        def run(rng, step):
            x = _sample(rng, (n, c))
            w0, w1 = _sample(rng, c), _sample(rng, n)
            err = chk(lambda t: op(t), x, step)
            err = max(err, chk(lambda t: weighted(op(t, axis=0), w0), x, step))
            return max(err, chk(lambda t: weighted(op(t, axis=1), w1), x, step))

        return run

    def take_per_row_check(rng, step):
        x = _sample(rng, (n, k))
        idx = rng.integers(0, k, n)
        return chk(lambda t: ad.take_per_row(t, idx).sum(), x, step)

    def select_rows_check(rng, step):
        x, w = _sample(rng, (n, c)), _sample(rng, (3, c))
        rows = np.array([2, 0, 2])
        return chk(lambda t: weighted(ad.select_rows(t, rows), w), x, step)

    def scatter_rows_check(rng, step):
        x, w = _sample(rng, (2, c)), _sample(rng, (n, c))
        rows = np.array([3, 1])
        return chk(lambda t: weighted(ad.scatter_rows(t, rows, n), w), x, step)

    def take_col_check(rng, step):
        x, w = _sample(rng, (n, k)), _sample(rng, (n, 1))
        return chk(lambda t: weighted(ad.take_col(t, 1), w), x, step)

    def batch_stats_check(rng, step):
        x = _sample(rng, (n, c))
        wm, wv = _sample(rng, c), _sample(rng, c)

        def f(t):
            st = batch_stats(t)
            return weighted(st.mean, wm) + weighted(st.var, wv)

        return chk(f, x, step)

    def bn_batch_check(rng, step):
        x, w = _sample(rng, (n, c)), _sample(rng, (n, c))
        affine = _affine(rng, c)
        err = chk(lambda t: weighted(bn_forward(t, batch_stats(t), affine), w), x, step)
        xt = Tensor(x)
        st = batch_stats(xt)
        err = max(
            err,
            chk(
                lambda g: weighted(
                    bn_forward(xt, st, AffineParams(g, Tensor(affine.beta.data))), w
                ),
                affine.gamma.data,
                step,
            ),
        )
        return max(
            err,
            chk(
                lambda b: weighted(
                    bn_forward(xt, st, AffineParams(Tensor(affine.gamma.data), b)), w
                ),
                affine.beta.data,
                step,
            ),
        )

    def bn_running_check(rng, step):
        x, w = _sample(rng, (n, c)), _sample(rng, (n, c))
        st = _fixed_stats(rng, 1, c)[0]
        affine = _affine(rng, c)
        return chk(lambda t: weighted(bn_forward(t, st, affine), w), x, step)

    def dabn_check(rng, step):
        x, w = _sample(rng, (6, c)), _sample(rng, (6, c))
        d = np.array([0, 1, 0, 1, 1, 0])
        affine = _affine(rng, c)
        return chk(lambda t: weighted(dabn_forward(t, d, affine), w), x, step)

    def wbn_hard_batch_check(rng, step):
        x, w = _sample(rng, (6, c)), _sample(rng, (6, c))
        d = np.array([0, 1, 0, 1, 1, 0])
        affine = _affine(rng, c)
        return chk(lambda t: weighted(wbn_hard_forward(t, d, affine, num_domains=dom), w), x, step)

    def wbn_hard_running_check(rng, step):
        x, w = _sample(rng, (6, c)), _sample(rng, (6, c))
        d = np.array([0, 1, 0, 1, 1, 0])
        stats = _fixed_stats(rng, dom, c)
        affine = _affine(rng, c)
        return chk(lambda t: weighted(wbn_hard_forward(t, d, affine, stats=stats), w), x, step)

    def wbn_soft_weighted_check(rng, step):
        x, w = _sample(rng, (n, c)), _sample(rng, (n, c))
        logits = _soft_logits(rng, n, dom)
        affine = _affine(rng, c)

        def f_x(t):
            asg = _assignment(Tensor(logits))
            return weighted(wbn_soft_forward(t, asg, weighted_domain_stats(t, asg), affine), w)

        def f_w(t):
            asg = _assignment(t)
            xt = Tensor(x)
            return weighted(wbn_soft_forward(xt, asg, weighted_domain_stats(xt, asg), affine), w)

        return max(chk(f_x, x, step), chk(f_w, logits, step))

    def wbn_soft_running_check(rng, step):
        x, w = _sample(rng, (n, c)), _sample(rng, (n, c))
        logits = _soft_logits(rng, n, dom)
        stats = _fixed_stats(rng, dom, c)
        affine = _affine(rng, c)

        def f_x(t):
            return weighted(wbn_soft_forward(t, _assignment(Tensor(logits)), stats, affine), w)

        def f_w(t):
            return weighted(wbn_soft_forward(Tensor(x), _assignment(t), stats, affine), w)

        return max(chk(f_x, x, step), chk(f_w, logits, step))

    def weighted_stats_check(rng, step):
        x = _sample(rng, (n, c))
        logits = _soft_logits(rng, n, dom)
        wm = [_sample(rng, c) for _ in range(dom)]
        wv = [_sample(rng, c) for _ in range(dom)]

        def scalarize(stats):
            parts = [weighted(s.mean, wm[j]) + weighted(s.var, wv[j]) for j, s in enumerate(stats)]
            total = parts[0]
            for p in parts[1:]:
                total = total + p
            return total

        def f_x(t):
            return scalarize(weighted_domain_stats(t, _assignment(Tensor(logits))))

        def f_w(t):
            return scalarize(weighted_domain_stats(Tensor(x), _assignment(t)))

        return max(chk(f_x, x, step), chk(f_w, logits, step))

    def global_pool_check(rng, step):
        x, w = _sample(rng, (n, c, 5)), _sample(rng, (n, c))
        return chk(lambda t: weighted(global_pool(t), w), x, step)

    def assign_weights_check(rng, step):
        feats = _sample(rng, (n, c))
        fc = _sample(rng, (c, dom))
        bias = _sample(rng, dom)
        w = _sample(rng, (n, dom))

        def f_feat(t):
            return weighted(ad.softmax(ad.relu(t) @ Tensor(fc) + Tensor(bias)), w)

        def f_fc(t):
            return weighted(ad.softmax(ad.relu(Tensor(feats)) @ t + Tensor(bias)), w)

        return max(chk(f_feat, feats, step), chk(f_fc, fc, step))

    def log_loss_check(rng, step):
        logits = _sample(rng, (n, k))
        labels = rng.integers(0, k, n)
        return chk(lambda t: log_loss(t, labels), logits, step)

    def total_loss_check(rng, step):
        cls = _sample(rng, (n, k))
        dl = _sample(rng, (n, dom))
        y = rng.integers(0, k, n)
        d = rng.integers(0, dom, n)
        cfg = LossConfig(lam=0.7, includes_domain_loss=True)
        err = chk(lambda t: total_loss(t, y, Tensor(dl), d, cfg), cls, step)
        return max(err, chk(lambda t: total_loss(Tensor(cls), y, t, d, cfg), dl, step))

    return [
        ("matmul", matmul_check),
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)),
        ("div", binary(ad.div)),
        ("neg", unary(ad.neg)),
        ("relu", unary(ad.relu)),
        ("softmax", softmax_check),
        ("exp", unary(ad.exp)),
        ("log", unary(ad.log, positive=True)),
        ("sqrt", unary(ad.sqrt, positive=True)),
        ("square", unary(ad.square)),
        ("sum", reductions(ad.tsum)),
        ("mean", reductions(ad.tmean)),
        ("take_per_row", take_per_row_check),
        ("select_rows", select_rows_check),
        ("scatter_rows", scatter_rows_check),
        ("take_col", take_col_check),
        ("batch_stats", batch_stats_check),
        ("bn_forward(batch stats)", bn_batch_check),
        ("bn_forward(running stats)", bn_running_check),
        ("dabn_forward", dabn_check),
        ("wbn_hard(batch stats)", wbn_hard_batch_check),
        ("wbn_hard(running stats)", wbn_hard_running_check),
        ("wbn_soft(weighted stats)", wbn_soft_weighted_check),
        ("wbn_soft(running stats)", wbn_soft_running_check),
        ("weighted_domain_stats", weighted_stats_check),
        ("global_pool", global_pool_check),
        ("assign_weights", assign_weights_check),
        ("log_loss", log_loss_check),
        ("total_loss", total_loss_check),
    ]


def run_gradient_suite(
    points: int = 10, step: float = 1e-5, tolerance: float = 1e-5, seed: int = 1234
) -> list[CheckResult]:
    """Run every check at `points` random points; one result row per operation."""
    results = []
    for index, (name, check) in enumerate(_suite()):
        rng = np.random.default_rng([seed, index])
        worst = 0.0
        for _ in range(points):
            worst = max(worst, check(rng, step))
        results.append(CheckResult(name, worst, tolerance))
    return results


def format_suite_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  {'max_rel_err':>12}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_error:>12.3e}  {status}")
    return "\n".join(lines)


def run_and_time() -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = run_gradient_suite()
    return results, time.perf_counter() - start

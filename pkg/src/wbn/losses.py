"""Classification/domain losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConstraintError, ContractError


@dataclass
class LossConfig:
    """Weighting of the domain term in the combined objective."""

    lam: float = 0.1
    includes_domain_loss: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConstraintError("lambda must be nonnegative")


def log_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the labeled class.

    Computed through a shifted log-sum-exp so large logits cannot overflow.
    """
    y = np.asarray(labels, dtype=np.intp)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ContractError(f"expected one label per row of {logits.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ConstraintError(
            f"label out of range: valid classes are 0..{logits.shape[1] - 1}"
        )
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    lse = ad.log(ad.exp(logits - shift).sum(axis=1)) + Tensor(shift.data[:, 0])
    return (lse - ad.take_per_row(logits, y)).mean()


def total_loss(
    class_logits: Tensor,
    class_labels,
    domain_logits: Tensor | None,
    domain_labels,
    config: LossConfig,
) -> Tensor:
    """Classification loss plus lambda times the domain-assignment loss."""
    loss = log_loss(class_logits, class_labels)
    if not config.includes_domain_loss:
        return loss
    if domain_logits is None or domain_labels is None:
        raise ContractError("domain logits and labels are required when the domain loss is on")
    return loss + config.lam * log_loss(domain_logits, domain_labels)


def avg_class_accuracy(predictions, labels, num_classes: int) -> float:
    """Mean per-class recall over the classes present in the labels.

    Robust to class imbalance: every present class contributes equally,
    absent classes are skipped.
    """
    pred = np.asarray(predictions, dtype=np.intp)
    y = np.asarray(labels, dtype=np.intp)
    if pred.shape != y.shape or y.ndim != 1 or y.size == 0:
        raise ContractError("need matching, nonempty prediction and label vectors")
    if y.min() < 0 or y.max() >= num_classes:
        raise ConstraintError(f"label out of range for {num_classes} classes")
    recalls = [np.mean(pred[y == c] == c) for c in range(num_classes) if np.any(y == c)]
    return float(np.mean(recalls))


def predict_classes(class_logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    return np.argmax(class_logits, axis=1)


@dataclass
class DomainHistogram:
    """Distribution of first-domain assignment weights for one true domain."""

    domain: int
    counts: np.ndarray
    bin_edges: np.ndarray
    mean_weight: float
    samples: int


def weight_histogram(
    assignments: np.ndarray, source_domains, bins: int = 20
) -> list[DomainHistogram]:
    """Bin the first-column assignment weight separately per true source domain.

    When the branch discovers structure, the per-domain means separate; the
    gap between the extreme means is a one-number summary of that.
    """
    w = np.asarray(assignments, dtype=np.float64)
    d = np.asarray(source_domains, dtype=np.intp)
    if w.ndim != 2 or d.shape != (w.shape[0],):
        raise ContractError("need [n, domains] assignments and one source label per row")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for dom in np.unique(d):
        values = w[d == dom, 0]
        counts, _ = np.histogram(values, bins=edges)
        out.append(
            DomainHistogram(int(dom), counts, edges, float(values.mean()), int(values.size))
        )
    return out


def histogram_gap(histograms: list[DomainHistogram]) -> float:
    """Spread of the per-domain mean first-column weights."""
    if len(histograms) < 2:
        return 0.0
    means = [h.mean_weight for h in histograms]
    return float(max(means) - min(means))


def format_histogram_table(histograms: list[DomainHistogram]) -> str:
    lines = ["domain  samples  mean_w0  histogram(w0, 20 bins over [0,1])"]
    for h in histograms:
        bars = " ".join(str(c) for c in h.counts)
        lines.append(f"{h.domain:>6}  {h.samples:>7}  {h.mean_weight:7.4f}  {bars}")
    if len(histograms) >= 2:
        lines.append(f"inter-domain mean weight gap: {histogram_gap(histograms):.4f}")
    return "\n".join(lines)

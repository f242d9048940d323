"""Lateral branch that turns early trunk features into domain weights.

The branch reads a trunk layer's pre-normalization output, applies relu,
one fully-connected map per configured stage, and a row softmax, yielding
one convex weight vector over domains per sample. By default the branch
input is detached so the domain objective cannot reshape the trunk below
the tap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .norm import AssignmentMatrix


@dataclass
class BranchConfig:
    num_domains: int
    tap_point: int = 0
    hidden_width: int | None = None
    detach_input: bool = True

    def __post_init__(self):
        if self.num_domains < 1:
            raise ConfigError("branch needs at least one domain")
        if self.tap_point < 0:
            raise ConfigError("tap_point must be a valid trunk layer index")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ConfigError("hidden_width must be positive when given")


def global_pool(features: Tensor) -> Tensor:
    """Mean over the trailing spatial axis of [batch, channels, extent]."""
    if features.ndim == 2:
        return features
    if features.ndim != 3:
        raise ShapeError(f"global_pool expects [n, C] or [n, C, S], got {features.shape}")
    return features.mean(axis=2)


class DomainBranch:
    """Holds the branch parameters and computes per-sample assignments."""

    def __init__(self, config: BranchConfig, input_width: int, rng: np.random.Generator):
        self.config = config
        widths = [input_width]
        if config.hidden_width is not None:
            widths.append(config.hidden_width)
        widths.append(config.num_domains)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            self.weights.append(
                Tensor(rng.uniform(-scale, scale, size=(fan_in, fan_out)), requires_grad=True)
            )
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def assign(self, features: Tensor) -> tuple[AssignmentMatrix, Tensor]:
        """Map tap features to (assignment matrix, pre-softmax domain logits)."""
        h = global_pool(features)
        if h.shape[1] != self.input_width:
            raise ShapeError(
                f"branch expects {self.input_width} input features, got {h.shape[1]}"
            )
        if self.config.detach_input:
            h = h.detach()
        h = ad.relu(h)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.relu(h @ w + b)
        logits = h @ self.weights[-1] + self.biases[-1]
        return AssignmentMatrix(ad.softmax(logits)), logits


def assign_weights(features: Tensor, branch: DomainBranch) -> AssignmentMatrix:
    """Convenience wrapper returning only the assignment matrix."""
    return branch.assign(features)[0]

"""Classifier assembly: shared trunk, assignment branch, classification head.

The trunk is a multilayer perceptron; a normalization layer follows every
hidden linear layer and relu follows the normalization. The branch taps the
first hidden layer's pre-normalization output (any later tap would need
assignment weights before they exist) and the same per-sample assignment is
broadcast to every normalization layer.

Normalization modes:

* ``BN`` - one statistics set, no branch (requires a single domain).
* ``DABN`` - per-domain training statistics from hard labels; inference
  requires explicitly calibrated statistics for the data at hand.
* ``WBN_HARD`` - indicator-weighted training (hard labels), branch trained
  jointly through the domain loss.
* ``WBN_SOFT_SUPERVISED`` - branch weights blend normalizations during
  training while statistics still come from the hard labels.
* ``WBN_SOFT_LATENT`` - no domain labels anywhere: branch weights both
  estimate the per-domain statistics and blend the normalizations.

At inference every branch-bearing mode normalizes by the running statistics
blended with the branch's weights, so no domain knowledge is needed for new
samples. Parameters partition into trunk (with the shared affine terms),
branch, and head groups; the groups are disjoint and exhaustive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .branch import BranchConfig, DomainBranch
from .errors import ConfigError, ContractError
from .norm import (
    DEFAULT_EPS,
    AffineParams,
    AssignmentMatrix,
    NormStats,
    RunningStats,
    batch_stats,
    bn_forward,
    dabn_forward,
    update_running_stats,
    wbn_hard_forward,
    wbn_soft_forward,
    weighted_domain_stats,
)

NORM_MODES = ("BN", "DABN", "WBN_HARD", "WBN_SOFT_SUPERVISED", "WBN_SOFT_LATENT")
BRANCH_MODES = ("WBN_HARD", "WBN_SOFT_SUPERVISED", "WBN_SOFT_LATENT")
LABELED_MODES = ("DABN", "WBN_HARD", "WBN_SOFT_SUPERVISED")


@dataclass
class ModelConfig:
    input_dim: int
    hidden: list[int]
    num_classes: int
    num_domains: int
    norm_mode: str = "WBN_HARD"
    branch: BranchConfig | None = None
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.num_domains < 1:
            raise ConfigError("need at least one domain")
        if self.input_dim < 1 or not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("input and hidden widths must be positive")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"unknown norm_mode {self.norm_mode!r}; choose from {NORM_MODES}")
        if self.norm_mode == "BN" and self.num_domains != 1:
            raise ConfigError("BN tracks a single statistics set; set num_domains = 1")
        if self.uses_branch:
            if self.branch is None:
                self.branch = BranchConfig(num_domains=self.num_domains)
            if self.branch.num_domains != self.num_domains:
                raise ConfigError("branch num_domains must match the model's")
            if self.branch.tap_point != 0:
                raise ConfigError(
                    "every hidden layer is normalized, so the branch must tap layer 0: "
                    "assignment weights are needed before any normalization runs"
                )

    @property
    def uses_branch(self) -> bool:
        return self.norm_mode in BRANCH_MODES

    @property
    def needs_domain_labels(self) -> bool:
        return self.norm_mode in LABELED_MODES

    def to_dict(self) -> dict:
        out = {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "num_domains": self.num_domains,
            "norm_mode": self.norm_mode,
            "epsilon": self.epsilon,
        }
        if self.branch is not None:
            out["branch"] = {
                "num_domains": self.branch.num_domains,
                "tap_point": self.branch.tap_point,
                "hidden_width": self.branch.hidden_width,
                "detach_input": self.branch.detach_input,
            }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        branch = None
        if raw.get("branch") is not None:
            branch = BranchConfig(**raw["branch"])
        return cls(
            input_dim=raw["input_dim"],
            hidden=list(raw["hidden"]),
            num_classes=raw["num_classes"],
            num_domains=raw["num_domains"],
            norm_mode=raw["norm_mode"],
            branch=branch,
            epsilon=raw.get("epsilon", DEFAULT_EPS),
        )


class LinearLayer:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-scale, scale, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class NormLayer:
    """Normalization state for one trunk position: affine + running stats."""

    def __init__(self, channels: int, num_domains: int, epsilon: float):
        self.affine = AffineParams.identity(channels)
        self.running = RunningStats(num_domains, channels, epsilon)
        self.epsilon = epsilon
        self.calibrated: NormStats | None = None


class ForwardOutput(NamedTuple):
    class_logits: Tensor
    domain_logits: Tensor | None
    assignment: AssignmentMatrix | None


@dataclass
class ModelParams:
    """Disjoint, exhaustive parameter partition."""

    theta_s: list[Tensor] = field(default_factory=list)
    theta_w: list[Tensor] = field(default_factory=list)
    theta_c: list[Tensor] = field(default_factory=list)

    def all(self) -> list[Tensor]:
        return [*self.theta_s, *self.theta_w, *self.theta_c]


class Model:
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        rng = np.random.default_rng([seed, 0])
        widths = [config.input_dim, *config.hidden]
        self.trunk = [LinearLayer(a, b, rng) for a, b in zip(widths, widths[1:])]
        self.norms = [NormLayer(w, config.num_domains, config.epsilon) for w in config.hidden]
        self.head = LinearLayer(config.hidden[-1], config.num_classes, rng)
        self.branch = None
        if config.uses_branch:
            self.branch = DomainBranch(
                config.branch, config.hidden[config.branch.tap_point], rng
            )

    def parameters(self) -> ModelParams:
        params = ModelParams()
        for layer, norm in zip(self.trunk, self.norms):
            params.theta_s.extend(layer.parameters())
            params.theta_s.extend((norm.affine.gamma, norm.affine.beta))
        if self.branch is not None:
            params.theta_w.extend(self.branch.parameters())
        params.theta_c.extend(self.head.parameters())
        return params

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable or stateful array, keyed for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for i, (layer, norm) in enumerate(zip(self.trunk, self.norms)):
            out[f"trunk{i}.weight"] = layer.weight.data
            out[f"trunk{i}.bias"] = layer.bias.data
            out[f"norm{i}.gamma"] = norm.affine.gamma.data
            out[f"norm{i}.beta"] = norm.affine.beta.data
            out[f"norm{i}.running.mean"] = norm.running.mean
            out[f"norm{i}.running.var"] = norm.running.var
            out[f"norm{i}.running.seen_mass"] = norm.running.seen_mass
        out["head.weight"] = self.head.weight.data
        out["head.bias"] = self.head.bias.data
        if self.branch is not None:
            for i, (w, b) in enumerate(zip(self.branch.weights, self.branch.biases)):
                out[f"branch{i}.weight"] = w.data
                out[f"branch{i}.bias"] = b.data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ContractError(f"checkpoint arrays do not match the model: {sorted(missing)}")
        for name, target in own.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise ContractError(f"array {name} has shape {src.shape}, expected {target.shape}")
            target[...] = src

    def set_momentum(self, momentum: float) -> None:
        for norm in self.norms:
            norm.running.momentum = momentum

    def collapse_count(self) -> int:
        return sum(norm.running.collapse_count for norm in self.norms)

    def _norm_train(
        self,
        norm: NormLayer,
        pre: Tensor,
        domain_labels,
        assignment: AssignmentMatrix | None,
    ) -> Tensor:
        mode = self.config.norm_mode
        n = pre.shape[0]
        if mode == "BN":
            stats = batch_stats(pre, norm.epsilon)
            update_running_stats(norm.running, [stats.detached()], [n], n)
            return bn_forward(pre, stats, norm.affine)
        if mode == "DABN":
            out = dabn_forward(pre, domain_labels, norm.affine, epsilon=norm.epsilon)
            hard = AssignmentMatrix.one_hot(domain_labels, self.config.num_domains)
            stats = weighted_domain_stats(pre, hard, norm.epsilon)
            update_running_stats(
                norm.running, [s.detached() for s in stats], hard.column_mass(), n
            )
            return out
        if mode in ("WBN_HARD", "WBN_SOFT_SUPERVISED"):
            hard = AssignmentMatrix.one_hot(domain_labels, self.config.num_domains)
            stats = weighted_domain_stats(pre, hard, norm.epsilon)
            update_running_stats(
                norm.running, [s.detached() for s in stats], hard.column_mass(), n
            )
            if mode == "WBN_HARD":
                return wbn_hard_forward(pre, domain_labels, norm.affine, stats=stats)
            return wbn_soft_forward(pre, assignment, stats, norm.affine)
        stats = weighted_domain_stats(pre, assignment, norm.epsilon)
        update_running_stats(
            norm.running, [s.detached() for s in stats], assignment.column_mass(), n
        )
        return wbn_soft_forward(pre, assignment, stats, norm.affine)

    def _norm_eval(
        self, norm: NormLayer, pre: Tensor, assignment: AssignmentMatrix | None
    ) -> Tensor:
        mode = self.config.norm_mode
        if mode == "BN":
            return bn_forward(pre, norm.running.stats(0), norm.affine)
        if mode == "DABN":
            if norm.calibrated is None:
                raise ContractError(
                    "DABN inference needs statistics for the data at hand; "
                    "call Model.calibrate on its features first"
                )
            return bn_forward(pre, norm.calibrated, norm.affine)
        return wbn_soft_forward(pre, assignment, norm.running.stats_list(), norm.affine)

    def forward(
        self,
        x,
        training: bool,
        domain_labels=None,
        assignment_override: AssignmentMatrix | None = None,
    ) -> ForwardOutput:
        """Run the classifier; in training mode running statistics are updated.

        `assignment_override` substitutes the branch output (diagnostics and
        equivalence tests); it must already satisfy the row constraints.
        """
        if training and self.config.needs_domain_labels and domain_labels is None:
            raise ContractError(f"mode {self.config.norm_mode} needs domain labels for training")
        h = x if isinstance(x, Tensor) else Tensor(x)
        assignment = assignment_override
        domain_logits = None
        for i, (layer, norm) in enumerate(zip(self.trunk, self.norms)):
            pre = layer(h)
            if self.branch is not None and i == self.config.branch.tap_point:
                branch_assignment, domain_logits = self.branch.assign(pre)
                if assignment is None:
                    assignment = branch_assignment
            if training:
                normed = self._norm_train(norm, pre, domain_labels, assignment)
            else:
                normed = self._norm_eval(norm, pre, assignment)
            h = ad.relu(normed)
        return ForwardOutput(self.head(h), domain_logits, assignment)

    def calibrate(self, features: np.ndarray) -> None:
        """Estimate per-layer statistics over a whole feature set (for DABN inference).

        Layer k's statistics are computed after normalizing layers < k with
        their own freshly calibrated statistics, so the estimates describe
        exactly the distribution seen at inference.
        """
        h = Tensor(np.asarray(features, dtype=np.float64))
        for layer, norm in zip(self.trunk, self.norms):
            pre = layer(h)
            stats = batch_stats(pre, norm.epsilon)
            norm.calibrated = stats.detached()
            h = ad.relu(bn_forward(pre, norm.calibrated, norm.affine))


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialized model; equal (config, seed) gives equal arrays."""
    return Model(config, seed)

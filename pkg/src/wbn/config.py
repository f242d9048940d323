"""Experiment configuration: a strict INI-style key-value document.

Every command validates its whole configuration before doing any work and
writes the resolved document next to its outputs, so a run is reproducible
from the artifacts it leaves behind. Unknown sections or keys are errors.

Sections::

    [dataset]   either generator knobs (classes, features, ...) or
                `paths = file file ...` pointing at per-domain datasets
    [model]     hidden widths, norm_mode, epsilon, branch knobs
    [train]     iterations, rates, decay, drop schedule, lambda, momentum, seed
    [output]    dir = where artifacts go (WBN_OUTPUT_ROOT reroots relative dirs)
    [compare]   methods = norm modes to lay side by side (compare command only)
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .branch import BranchConfig
from .errors import ConfigError
from .model import NORM_MODES, ModelConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "WBN_OUTPUT_ROOT"


@dataclass
class BenchmarkSpec:
    """Generator knobs for the synthetic multi-domain benchmark.

    `source_domains` domains plus one target are produced; each domain is
    an affine view (one scalar scale, one offset vector) of the same
    class-conditional Gaussian mixture, and the target's transform is a
    convex mix of the source transforms.
    """

    classes: int = 4
    features: int = 16
    source_domains: int = 3
    train_per_domain: int = 500
    test_per_domain: int = 500
    seed: int = 7
    class_separation: float = 4.0
    scale_low: float = 0.6
    scale_high: float = 1.6
    offset_scale: float = 4.0

    def __post_init__(self):
        if self.classes < 2 or self.features < 1 or self.source_domains < 1:
            raise ConfigError("classes >= 2, features >= 1, source_domains >= 1 required")
        if self.train_per_domain < 2 or self.test_per_domain < 1:
            raise ConfigError("need at least 2 train and 1 test samples per domain")
        if not 0 < self.scale_low <= self.scale_high:
            raise ConfigError("scale range must satisfy 0 < low <= high")
        if self.class_separation <= 0 or self.offset_scale < 0:
            raise ConfigError("class_separation must be positive, offset_scale nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "classes", "features", "source_domains", "train_per_domain", "test_per_domain",
            "seed", "class_separation", "scale_low", "scale_high", "offset_scale",
        )}

    def build(self):
        from .data import build_benchmark

        return build_benchmark(**self.to_dict())


@dataclass
class ModelSpec:
    """Model knobs that do not depend on the dataset dimensions."""

    hidden: list[int] = field(default_factory=lambda: [32, 32])
    norm_mode: str = "WBN_HARD"
    epsilon: float = 1e-5
    branch_hidden: int | None = None
    detach_input: bool = True
    tap_point: int = 0

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"unknown norm_mode {self.norm_mode!r}; choose from {NORM_MODES}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def build(self, input_dim: int, num_classes: int, num_domains: int) -> ModelConfig:
        n = 1 if self.norm_mode == "BN" else num_domains
        branch = None
        if self.norm_mode in ("WBN_HARD", "WBN_SOFT_SUPERVISED", "WBN_SOFT_LATENT"):
            branch = BranchConfig(
                num_domains=n,
                tap_point=self.tap_point,
                hidden_width=self.branch_hidden,
                detach_input=self.detach_input,
            )
        return ModelConfig(
            input_dim=input_dim,
            hidden=list(self.hidden),
            num_classes=num_classes,
            num_domains=n,
            norm_mode=self.norm_mode,
            branch=branch,
            epsilon=self.epsilon,
        )

    def with_mode(self, mode: str) -> "ModelSpec":
        return ModelSpec(
            hidden=list(self.hidden),
            norm_mode=mode,
            epsilon=self.epsilon,
            branch_hidden=self.branch_hidden,
            detach_input=self.detach_input,
            tap_point=self.tap_point,
        )


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkSpec | None
    data_paths: list[str] | None
    model: ModelSpec
    train: TrainConfig
    output_dir: Path
    methods: list[str] = field(default_factory=list)

    def resolved_text(self) -> str:
        parser = configparser.ConfigParser()
        if self.benchmark is not None:
            parser["dataset"] = {k: str(v) for k, v in self.benchmark.to_dict().items()}
        else:
            parser["dataset"] = {"paths": " ".join(self.data_paths)}
        parser["model"] = {
            "hidden": " ".join(str(h) for h in self.model.hidden),
            "norm_mode": self.model.norm_mode,
            "epsilon": str(self.model.epsilon),
            "detach_input": str(self.model.detach_input).lower(),
            "tap_point": str(self.model.tap_point),
        }
        if self.model.branch_hidden is not None:
            parser["model"]["branch_hidden"] = str(self.model.branch_hidden)
        train = self.train.to_dict()
        train["lambda"] = train.pop("lam")
        parser["train"] = {k: str(v) for k, v in train.items()}
        parser["output"] = {"dir": str(self.output_dir)}
        if self.methods:
            parser["compare"] = {"methods": " ".join(self.methods)}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()


_DATASET_KEYS = {
    "classes": int, "features": int, "source_domains": int, "train_per_domain": int,
    "test_per_domain": int, "seed": int, "class_separation": float, "scale_low": float,
    "scale_high": float, "offset_scale": float,
}
_MODEL_KEYS = {
    "hidden": str, "norm_mode": str, "epsilon": float, "branch_hidden": int,
    "detach_input": bool, "tap_point": int,
}
_TRAIN_KEYS = {
    "iterations": int, "batch_size": int, "base_lr": float, "head_lr": float,
    "weight_decay": float, "lr_drop_factor": float, "lr_drop_at_fraction": float,
    "lambda": float, "momentum": float, "seed": int,
}


def _parse_section(section, allowed: dict, where: str) -> dict:
    out = {}
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        raw = section[key].strip()
        kind = allowed[key]
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false"):
                    raise ValueError("expected true/false")
                out[key] = raw.lower() == "true"
            else:
                out[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in [{where}]: {exc}") from exc
    return out


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    known_sections = {"dataset", "model", "train", "output", "compare"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "dataset" not in parser or "train" not in parser:
        raise ConfigError("config needs [dataset] and [train] sections")

    dataset_section = parser["dataset"]
    data_paths = None
    benchmark = None
    if "paths" in dataset_section:
        extra = set(dataset_section) - {"paths"}
        if extra:
            raise ConfigError(f"[dataset] paths cannot be mixed with generator keys: {sorted(extra)}")
        data_paths = dataset_section["paths"].split()
        if not data_paths:
            raise ConfigError("[dataset] paths is empty")
    else:
        values = _parse_section(dataset_section, _DATASET_KEYS, "dataset")
        if "seed" not in values:
            raise ConfigError("[dataset] needs an explicit seed")
        benchmark = BenchmarkSpec(**values)

    model_values = _parse_section(parser["model"], _MODEL_KEYS, "model") if "model" in parser else {}
    if "hidden" in model_values:
        try:
            model_values["hidden"] = [int(tok) for tok in model_values["hidden"].split()]
        except ValueError as exc:
            raise ConfigError(f"bad hidden widths: {exc}") from exc
    model = ModelSpec(**model_values)

    train_values = _parse_section(parser["train"], _TRAIN_KEYS, "train")
    if "seed" not in train_values:
        raise ConfigError("[train] needs an explicit seed")
    if "lambda" in train_values:
        train_values["lam"] = train_values.pop("lambda")
    train = TrainConfig(**train_values)

    out_section = parser["output"] if "output" in parser else {}
    extra_out = set(out_section) - {"dir"}
    if extra_out:
        raise ConfigError(f"unknown key in [output]: {sorted(extra_out)}")
    output_dir = Path(out_section.get("dir", "runs/run"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not output_dir.is_absolute():
        output_dir = Path(root) / output_dir

    methods: list[str] = []
    if "compare" in parser:
        extra_cmp = set(parser["compare"]) - {"methods"}
        if extra_cmp:
            raise ConfigError(f"unknown key in [compare]: {sorted(extra_cmp)}")
        methods = parser["compare"].get("methods", "").split()
        for mode in methods:
            if mode not in NORM_MODES:
                raise ConfigError(f"unknown method {mode!r} in [compare]")

    return ExperimentConfig(
        benchmark=benchmark,
        data_paths=data_paths,
        model=model,
        train=train,
        output_dir=output_dir,
        methods=methods,
    )

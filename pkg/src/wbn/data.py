"""Synthetic multi-domain datasets, their file format, and batching.

The synthetic generator draws a class-conditional Gaussian base sample and
pushes it through one invertible per-domain affine map (positive scale,
offset), a desk-scale stand-in for illumination/sensor/environment shift:
every domain shares the base class structure but lives in its own affine
frame, so per-domain standardization of the inputs provably undoes the
shift.

Datasets round-trip bitwise through a little-endian binary format (magic
"WBND") and are batched by seeded per-epoch permutations, optionally
stratified so that every domain present in a batch contributes at least
two samples whenever sizes permit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, ConstraintError, ContractError, FormatError, VersionError

DATASET_MAGIC = b"WBND"
DATASET_VERSION = 1


@dataclass
class GaussianMixtureSpec:
    """Class-conditional diagonal Gaussians: one mean/std row per class."""

    means: np.ndarray
    stds: np.ndarray
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.stds.shape:
            raise ConfigError("means and stds must be matching [classes, features] arrays")
        if np.any(self.stds <= 0):
            raise ConfigError("class covariance is degenerate: all stds must be positive")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.array_equal(self.means[a], self.means[b]):
                    raise ConfigError(f"class means {a} and {b} are identical")
        if self.class_probs is not None:
            self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
            if self.class_probs.shape != (self.num_classes,) or np.any(self.class_probs < 0):
                raise ConfigError("class_probs must be a nonnegative vector over classes")
            self.class_probs = self.class_probs / self.class_probs.sum()

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def num_features(self) -> int:
        return self.means.shape[1]


@dataclass
class ShiftSpec:
    """Invertible per-domain affine transform of the base features."""

    scale: np.ndarray
    offset: np.ndarray
    label_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.scale.shape != self.offset.shape or self.scale.ndim != 1:
            raise ConfigError("scale and offset must be matching feature vectors")
        if np.any(self.scale <= 0):
            raise ConfigError("shift scale must be positive (invertibility)")
        if self.label_offsets is not None:
            self.label_offsets = np.asarray(self.label_offsets, dtype=np.float64)
            if self.label_offsets.ndim != 2 or self.label_offsets.shape[1] != self.scale.shape[0]:
                raise ConfigError("label_offsets must be [classes, features]")


@dataclass
class DomainDataset:
    """Labeled feature vectors with optional per-sample domain tags."""

    features: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray | None
    num_classes: int
    num_domains: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.features.ndim != 2 or self.class_labels.shape != (self.features.shape[0],):
            raise ConfigError("features must be [n, F] with one class label per row")
        if self.class_labels.size and (
            self.class_labels.min() < 0 or self.class_labels.max() >= self.num_classes
        ):
            raise ConfigError(f"class label out of range for {self.num_classes} classes")
        if self.domain_labels is not None:
            self.domain_labels = np.asarray(self.domain_labels, dtype=np.int64)
            if self.domain_labels.shape != (self.features.shape[0],):
                raise ConfigError("domain labels must match the sample count")
            if self.domain_labels.size and (
                self.domain_labels.min() < 0 or self.domain_labels.max() >= self.num_domains
            ):
                raise ConfigError(f"domain label out of range for {self.num_domains} domains")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return DomainDataset(
            self.features[idx],
            self.class_labels[idx],
            None if self.domain_labels is None else self.domain_labels[idx],
            self.num_classes,
            self.num_domains,
            dict(self.meta),
        )

    def split(self, first: int) -> tuple["DomainDataset", "DomainDataset"]:
        """Split into the leading `first` samples and the remainder."""
        if not 0 <= first <= len(self):
            raise ConstraintError(f"cannot split {len(self)} samples at {first}")
        return self.subset(np.arange(first)), self.subset(np.arange(first, len(self)))

    def without_domain_labels(self) -> "DomainDataset":
        return DomainDataset(
            self.features, self.class_labels, None, self.num_classes, self.num_domains,
            dict(self.meta),
        )


def gen_synthetic(
    base: GaussianMixtureSpec,
    shifts: list[ShiftSpec],
    n_per_domain: int,
    seed: int,
) -> DomainDataset:
    """Draw `n_per_domain` samples for each domain's affine view of the base mixture."""
    if base.num_classes < 2:
        raise ConfigError("need at least two classes")
    if not shifts:
        raise ConfigError("need at least one domain shift")
    for shift in shifts:
        if shift.scale.shape[0] != base.num_features:
            raise ConfigError("shift dimensionality must match the feature count")
    rng = np.random.default_rng(seed)
    feats, ys, ds = [], [], []
    for j, shift in enumerate(shifts):
        y = rng.choice(base.num_classes, size=n_per_domain, p=base.class_probs)
        z = rng.standard_normal((n_per_domain, base.num_features))
        x = base.means[y] + base.stds[y] * z
        x = shift.scale * x + shift.offset
        if shift.label_offsets is not None:
            x = x + shift.label_offsets[y]
        feats.append(x)
        ys.append(y)
        ds.append(np.full(n_per_domain, j))
    return DomainDataset(
        np.concatenate(feats),
        np.concatenate(ys),
        np.concatenate(ds),
        base.num_classes,
        len(shifts),
        {"generator": "gaussian-affine", "seed": seed, "n_per_domain": n_per_domain},
    )


def split_by_domain(ds: DomainDataset) -> list[DomainDataset]:
    if ds.domain_labels is None:
        raise ContractError("dataset has no domain labels to split on")
    return [ds.subset(np.flatnonzero(ds.domain_labels == j)) for j in range(ds.num_domains)]


def merge_domains(datasets: list[DomainDataset]) -> DomainDataset:
    """Concatenate datasets as domains 0..len-1 of one labeled dataset."""
    if not datasets:
        raise ContractError("nothing to merge")
    num_classes = datasets[0].num_classes
    feats = np.concatenate([d.features for d in datasets])
    ys = np.concatenate([d.class_labels for d in datasets])
    ds = np.concatenate([np.full(len(d), j) for j, d in enumerate(datasets)])
    return DomainDataset(feats, ys, ds, num_classes, len(datasets), {"generator": "merged"})


def save_dataset(ds: DomainDataset, path) -> None:
    w = Writer()
    w.magic(DATASET_MAGIC)
    w.u16(DATASET_VERSION)
    w.u32(ds.num_features)
    w.u32(ds.num_classes)
    w.u32(ds.num_domains)
    w.u32(len(ds))
    w.f64_array(ds.features)
    w.u16_array(ds.class_labels)
    if ds.domain_labels is None:
        w.u8(0)
    else:
        w.u8(1)
        w.u16_array(ds.domain_labels)
    w.blob(json.dumps(ds.meta, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(w.getvalue())


def load_dataset(path) -> DomainDataset:
    r = Reader(Path(path).read_bytes())
    r.magic(DATASET_MAGIC)
    version = r.u16()
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version} (expected {DATASET_VERSION})")
    num_features = r.u32()
    num_classes = r.u32()
    num_domains = r.u32()
    n = r.u32()
    features = r.f64_array((n, num_features))
    class_labels = r.u16_array(n)
    domain_labels = r.u16_array(n) if r.u8() else None
    try:
        meta = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata block ending at offset {r.pos}: {exc}") from exc
    r.expect_end()
    try:
        return DomainDataset(features, class_labels, domain_labels, num_classes, num_domains, meta)
    except ConfigError as exc:
        raise FormatError(f"inconsistent dataset contents: {exc}") from exc


def build_benchmark(
    classes: int,
    features: int,
    source_domains: int,
    train_per_domain: int,
    test_per_domain: int,
    seed: int,
    class_separation: float = 4.0,
    scale_low: float = 0.6,
    scale_high: float = 1.6,
    offset_scale: float = 4.0,
) -> list[tuple[DomainDataset, DomainDataset]]:
    """Synthetic domain-generalization benchmark: sources plus one target.

    Class means are isotropic Gaussian draws spaced `class_separation`
    apart in expectation (unit within-class std). Every source domain gets
    one scalar scale (log-uniform in [scale_low, scale_high]) and one
    offset vector of typical length `offset_scale`; the held-out target's
    transform is a convex mix of the source transforms, so it is a genuine
    unseen domain inside the span of the known ones. Returns one
    (train, test) pair per domain, target last.
    """
    rng = np.random.default_rng([seed, 101])
    means = rng.normal(0.0, 1.0, (classes, features)) * (class_separation / np.sqrt(2 * features))
    base = GaussianMixtureSpec(means, np.ones((classes, features)))

    scales = np.exp(rng.uniform(np.log(scale_low), np.log(scale_high), source_domains))
    offsets = rng.normal(0.0, offset_scale / np.sqrt(features), (source_domains, features))
    mix = rng.dirichlet(np.ones(source_domains))
    shifts = [
        ShiftSpec(np.full(features, s), o) for s, o in zip(scales, offsets)
    ]
    shifts.append(
        ShiftSpec(np.full(features, np.exp(mix @ np.log(scales))), mix @ offsets)
    )

    per_domain = train_per_domain + test_per_domain
    combined = gen_synthetic(base, shifts, per_domain, seed)
    descriptor = {
        "generator": "gaussian-affine-benchmark",
        "seed": seed,
        "classes": classes,
        "features": features,
        "source_domains": source_domains,
        "train_per_domain": train_per_domain,
        "test_per_domain": test_per_domain,
        "class_separation": class_separation,
        "scale_low": scale_low,
        "scale_high": scale_high,
        "offset_scale": offset_scale,
    }
    pairs = []
    for j, domain in enumerate(split_by_domain(combined)):
        train, test = domain.split(train_per_domain)
        role = "target" if j == source_domains else "source"
        for part, name in ((train, "train"), (test, "test")):
            part.meta = {**descriptor, "domain": j, "role": role, "split": name}
        pairs.append((train, test))
    return pairs


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray | None
    indices: np.ndarray


def _stratified_order(perm: np.ndarray, domains: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Chunk a permutation into batches with proportional per-domain quotas.

    Quotas come from the largest-remainder rule on each domain's remaining
    count; a quota of one is bumped to two (stealing from the largest
    donor) or deferred so no batch holds a singleton domain slice unless
    the tail leaves no alternative, in which case the leftover is merged
    into the previous batch.
    """
    present = np.unique(domains)
    queues = {j: [i for i in perm if domains[i] == j] for j in present}
    batches: list[np.ndarray] = []
    while any(queues.values()):
        remaining = {j: len(q) for j, q in queues.items() if q}
        total = sum(remaining.values())
        b = min(batch_size, total)
        raw = {j: b * c / total for j, c in remaining.items()}
        quota = {j: int(raw[j]) for j in remaining}
        leftover = b - sum(quota.values())
        for j in sorted(remaining, key=lambda j: (raw[j] - quota[j], -j), reverse=True):
            if leftover <= 0:
                break
            if quota[j] < remaining[j]:
                quota[j] += 1
                leftover -= 1
        for j in sorted(quota):
            if quota[j] != 1:
                continue
            donors = [k for k in quota if quota[k] > 2]
            if remaining[j] >= 2 and donors:
                donor = max(donors, key=lambda k: quota[k])
                quota[donor] -= 1
                quota[j] += 1
            elif total > b:
                quota[j] = 0
        batch = np.concatenate(
            [np.array(queues[j][: quota[j]], dtype=np.intp) for j in sorted(quota) if quota[j]]
        )
        for j in sorted(quota):
            queues[j] = queues[j][quota[j] :]
        batches.append(batch)
    if len(batches) >= 2:
        tail = batches[-1]
        tail_domains, tail_counts = np.unique(domains[tail], return_counts=True)
        singles = tail_domains[tail_counts == 1]
        if singles.size:
            move = np.isin(domains[tail], singles)
            batches[-2] = np.concatenate([batches[-2], tail[move]])
            if move.all():
                batches.pop()
            else:
                batches[-1] = tail[~move]
    return batches


def make_batches(
    ds: DomainDataset,
    batch_size: int,
    seed: int,
    stratify_by_domain: bool = False,
    epoch: int = 0,
) -> Iterator[Batch]:
    """One epoch of batches from a seeded permutation; each sample appears once."""
    if batch_size < 2:
        raise ConstraintError("batch_size must be at least 2")
    if batch_size > len(ds):
        raise ContractError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    if stratify_by_domain and ds.domain_labels is None:
        raise ContractError("cannot stratify a dataset without domain labels")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(ds))
    if stratify_by_domain:
        chunks = _stratified_order(perm, ds.domain_labels, batch_size)
    else:
        chunks = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    for idx in chunks:
        yield Batch(
            ds.features[idx],
            ds.class_labels[idx],
            None if ds.domain_labels is None else ds.domain_labels[idx],
            idx,
        )

"""Synthetic task family, downstream tasks, proxy pools, splits and dataset files.

Every sample in the lab is a draw from an isotropic Gaussian around one of the
family's concept means. Pretraining mixtures, victim tasks and the attacker's
proxy pool are all cut from the same family, so they share one input domain
while using distinct random streams.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .errors import ConfigError, DataError, ParseError, ShapeError, ValidationError
from .numcore import RngStream, as_matrix

SPLIT_TAGS = ("train", "val", "test", "pool")


@dataclass(frozen=True, eq=False)
class TaskFamily:
    input_dim: int
    concept_means: np.ndarray
    concept_scale: float
    family_seed: int

    @property
    def concepts(self) -> int:
        return self.concept_means.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus optional labels.

    ``origins`` records the family concept each row was drawn around; it is
    generation metadata for tests and diagnostics, and is never written to
    dataset files. ``class_concepts[k]`` is the concept behind class ``k``.
    """

    features: np.ndarray
    labels: np.ndarray | None
    class_count: int
    split_tag: str = "train"
    origins: np.ndarray | None = field(default=None, repr=False)
    class_concepts: tuple[int, ...] | None = None

    def __post_init__(self):
        feats = as_matrix(self.features, "features")
        object.__setattr__(self, "features", feats)
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigError(f"unknown split tag {self.split_tag!r}")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != feats.shape[0]:
                raise ShapeError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
            if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ValidationError(f"labels must lie in [0, {self.class_count})")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            class_count=self.class_count,
            split_tag=split_tag or self.split_tag,
            origins=None if self.origins is None else self.origins[idx],
            class_concepts=self.class_concepts,
        )

    def with_labels(self, labels, class_count: int | None = None, split_tag: str | None = None) -> "Dataset":
        return Dataset(
            features=self.features,
            labels=labels,
            class_count=self.class_count if class_count is None else class_count,
            split_tag=split_tag or self.split_tag,
            origins=self.origins,
            class_concepts=self.class_concepts,
        )


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, ...]
    shuffle_seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if not fr or any(f < 0 for f in fr):
            raise ConfigError("split fractions must be nonnegative and non-empty")
        if abs(math.fsum(fr) - 1.0) > 1e-12:
            raise ConfigError(f"split fractions sum to {math.fsum(fr)!r}, not 1")
        object.__setattr__(self, "fractions", fr)


def make_task_family(seed: int, input_dim: int = 32, concepts: int = 96, scale: float = 1.0) -> TaskFamily:
    if concepts < 2:
        raise ConfigError("a task family needs at least 2 concepts")
    if not scale > 0:
        raise ConfigError("concept scale must be positive")
    if input_dim < 1:
        raise ConfigError("input_dim must be positive")
    rng = RngStream(seed, ("family",))
    means = scale * rng.normal(size=(concepts, input_dim))
    means.flags.writeable = False
    return TaskFamily(input_dim=input_dim, concept_means=means, concept_scale=float(scale), family_seed=int(seed))


def _draw_around(family, concept_ids, noise_sigma, rng):
    noise = rng.normal(size=(len(concept_ids), family.input_dim))
    return family.concept_means[concept_ids] + noise_sigma * noise


def choose_concepts(family: TaskFamily, count: int, seed: int) -> tuple[int, ...]:
    """A seeded, ordered subset of ``count`` distinct family concepts."""
    if count > family.concepts:
        raise ConfigError(f"asked for {count} concepts but the family has {family.concepts}")
    perm = RngStream(seed, ("concepts",)).permutation(family.concepts)
    return tuple(int(c) for c in perm[:count])


def sample_classification_task(
    family: TaskFamily,
    class_count: int,
    concept_subset_seed: int,
    noise_sigma: float,
    n_per_class: int,
    *,
    sample_seed: int | None = None,
    concepts=None,
    split_tag: str = "train",
) -> Dataset:
    """Balanced Gaussian classification task over a subset of family concepts.

    The class-to-concept assignment depends only on ``concept_subset_seed`` (or
    the explicit ``concepts``), so a train and a test draw of the same task
    differ only in ``sample_seed``.
    """
    if class_count > family.concepts:
        raise ConfigError(f"class_count {class_count} exceeds the family's {family.concepts} concepts")
    if class_count < 1 or n_per_class < 0:
        raise ConfigError("class_count must be positive and n_per_class nonnegative")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be nonnegative")
    if concepts is None:
        concepts = choose_concepts(family, class_count, concept_subset_seed)
    concepts = tuple(int(c) for c in concepts)
    if len(concepts) != class_count or len(set(concepts)) != class_count:
        raise ConfigError("need exactly class_count distinct concepts")
    if sample_seed is None:
        sample_seed = concept_subset_seed
    rng = RngStream(sample_seed, ("task-samples",))
    labels = np.repeat(np.arange(class_count, dtype=np.int64), n_per_class)
    origins = np.asarray(concepts, dtype=np.int64)[labels]
    feats = _draw_around(family, origins, noise_sigma, rng)
    return Dataset(feats, labels, class_count, split_tag, origins=origins, class_concepts=concepts)


def sample_proxy_pool(
    family: TaskFamily,
    pool_size: int,
    overlap: float,
    seed: int,
    *,
    task_concepts,
    noise_sigma: float = 0.35,
) -> Dataset:
    """Unlabeled pool; a fraction ``overlap`` of rows come from the victim task's concepts.

    Each row independently picks its origin group with probability
    ``overlap``, then a concept uniformly within that group.
    """
    if not 0 <= overlap <= 1:
        raise ConfigError("overlap must lie in [0, 1]")
    task = np.asarray(sorted(set(int(c) for c in task_concepts)), dtype=np.int64)
    others = np.setdiff1d(np.arange(family.concepts), task)
    if overlap > 0 and task.size == 0:
        raise ConfigError("overlap > 0 requires task concepts")
    if overlap < 1 and others.size == 0:
        raise ConfigError("overlap < 1 requires concepts outside the task")
    rng = RngStream(seed, ("proxy-pool",))
    from_task = rng.random(pool_size) < overlap
    task_pick = task[rng.integers(0, task.size, pool_size)] if task.size else np.zeros(pool_size, np.int64)
    other_pick = others[rng.integers(0, others.size, pool_size)] if others.size else np.zeros(pool_size, np.int64)
    origins = np.where(from_task, task_pick, other_pick)
    feats = _draw_around(family, origins, noise_sigma, rng)
    return Dataset(feats, None, class_count=0, split_tag="pool", origins=origins)


def split(dataset: Dataset, spec: SplitSpec, tags=None) -> list[Dataset]:
    """Seeded shuffle, then floor-sized consecutive chunks; leftover rows go to the first chunk."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    sizes = [math.floor(f * n) for f in spec.fractions]
    sizes[0] += n - sum(sizes)
    order = RngStream(spec.shuffle_seed, ("split",)).permutation(n)
    if tags is None:
        tags = [dataset.split_tag] * len(sizes)
    out, start = [], 0
    for size, tag in zip(sizes, tags):
        out.append(dataset.subset(order[start : start + size], split_tag=tag))
        start += size
    return out


# -- dataset files ------------------------------------------------------------

_HEADER_RE = re.compile(r"^#xlab-dataset v1, dim=(\d+), classes=(\d+)(?:, split=(\w+))?\s*$")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the CSV dataset format; floats use the shortest exact repr."""
    lines = [f"#xlab-dataset v1, dim={dataset.dim}, classes={dataset.class_count}, split={dataset.split_tag}"]
    feats = dataset.features
    for i in range(feats.shape[0]):
        row = [repr(float(v)) for v in feats[i]]
        if dataset.labels is not None:
            row.append(str(int(dataset.labels[i])))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, split_tag: str | None = None) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ParseError(f"malformed header {lines[0]!r}", line=1)
    dim, classes = int(m.group(1)), int(m.group(2))
    tag = split_tag or m.group(3) or "train"
    rows, labels = [], []
    labeled = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) == dim:
            has_label = False
        elif len(cells) == dim + 1:
            has_label = True
        else:
            raise ParseError(f"expected {dim} or {dim + 1} columns, found {len(cells)}", line=lineno)
        if labeled is None:
            labeled = has_label
        elif labeled != has_label:
            raise ParseError("mixing labeled and unlabeled rows", line=lineno)
        try:
            values = [float(c) for c in cells[:dim]]
        except ValueError:
            raise ParseError("non-numeric feature value", line=lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite feature value", line=lineno)
        if has_label:
            try:
                label = int(cells[dim])
            except ValueError:
                raise ParseError(f"label {cells[dim]!r} is not an integer", line=lineno) from None
            if not 0 <= label < classes:
                raise ValidationError(f"line {lineno}: label {label} outside [0, {classes})")
            labels.append(label)
        rows.append(values)
    feats = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(feats, np.asarray(labels, dtype=np.int64) if labeled else None, classes, tag)


def save_family(family: TaskFamily, path) -> None:
    fields = {
        "input_dim": family.input_dim,
        "concept_scale": family.concept_scale,
        "family_seed": family.family_seed,
    }
    binfmt.write_container(path, "task-family", fields, [("concept_means", family.concept_means)])


def load_family(path) -> TaskFamily:
    header, arrays = binfmt.read_container(path, "task-family")
    means = arrays["concept_means"]
    means.flags.writeable = False
    return TaskFamily(
        input_dim=int(header["input_dim"]),
        concept_means=means,
        concept_scale=float(header["concept_scale"]),
        family_seed=int(header["family_seed"]),
    )

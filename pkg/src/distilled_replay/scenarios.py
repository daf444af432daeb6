"""Continual-learning streams: permuted (domain-incremental) and split (class-incremental)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .data import Dataset
from .seeding import derive_seed

DOMAIN_INCREMENTAL = "domain-incremental"
CLASS_INCREMENTAL = "class-incremental"

DEFAULT_VAL_FRACTION = 0.05
DEFAULT_BATCH_SIZE = 64


@dataclass
class Experience:
    index: int
    train: Dataset
    val: Dataset
    test: Dataset
    classes_present: frozenset
    task_label: Optional[int] = None
    permutation: Optional[np.ndarray] = None


@dataclass
class Stream:
    experiences: list[Experience]
    kind: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.experiences:
            raise ValueError("a stream needs at least one experience")

    def __len__(self):
        return len(self.experiences)

    def __iter__(self):
        return iter(self.experiences)

    def __getitem__(self, t: int) -> Experience:
        """1-based access, matching experience indices."""
        if not 1 <= t <= len(self.experiences):
            raise IndexError(f"experience {t} outside 1..{len(self.experiences)}")
        return self.experiences[t - 1]

    @property
    def T(self) -> int:
        return len(self.experiences)

    def metadata(self) -> dict:
        return {"kind": self.kind, "T": self.T, "seed": self.seed, **self.meta}


def split_validation(train: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of ``train`` (stratified per class) as validation."""
    if fraction <= 0:
        return train, train.subset(np.array([], dtype=np.int64), name=f"{train.name}-val")
    g = np.random.default_rng(seed)
    val = []
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        k = int(round(fraction * len(idx)))
        if k:
            val.append(g.choice(idx, size=k, replace=False))
    val_idx = np.sort(np.concatenate(val)) if val else np.array([], dtype=np.int64)
    mask = np.ones(len(train), dtype=bool)
    mask[val_idx] = False
    return train.subset(np.flatnonzero(mask)), train.subset(val_idx, name=f"{train.name}-val")


def _permute(ds: Dataset, perm: np.ndarray, name: str) -> Dataset:
    flat = ds.images.reshape(len(ds), -1)[:, perm]
    return Dataset(flat.reshape(ds.images.shape), ds.labels.copy(), ds.num_classes, name, dict(ds.meta))


def permuted_stream(
    train: Dataset, test: Dataset, T: int, seed: int, val_fraction: float = DEFAULT_VAL_FRACTION
) -> Stream:
    """Experience 1 is unpermuted; experiences 2..T apply one seed-derived pixel permutation each."""
    if T < 1:
        raise ValueError("T must be >= 1")
    tr, val = split_validation(train, val_fraction, derive_seed(seed, "val-split"))
    d = int(np.prod(train.images.shape[1:]))
    classes = frozenset(range(train.num_classes))
    experiences, perm_seeds = [], []
    for t in range(1, T + 1):
        if t == 1:
            perm, perm_seed = np.arange(d), None
        else:
            perm_seed = derive_seed(seed, "permutation", t)
            perm = np.random.default_rng(perm_seed).permutation(d)
        perm_seeds.append(perm_seed)
        experiences.append(
            Experience(
                t,
                _permute(tr, perm, f"{tr.name}-p{t}"),
                _permute(val, perm, f"{val.name}-p{t}"),
                _permute(test, perm, f"{test.name}-p{t}"),
                classes,
                permutation=perm,
            )
        )
    meta = {"permutation_seeds": perm_seeds, "first_experience_identity": True, "val_fraction": val_fraction}
    return Stream(experiences, DOMAIN_INCREMENTAL, seed, meta)


def split_stream(
    train: Dataset,
    test: Dataset,
    classes_per_exp: int = 2,
    order: Optional[Sequence[int]] = None,
    seed: int = 0,
    val_fraction: float = DEFAULT_VAL_FRACTION,
) -> Stream:
    """Group classes (ascending by default) into consecutive experiences; labels stay in the original space."""
    n = train.num_classes
    order = list(range(n)) if order is None else [int(c) for c in order]
    if sorted(order) != list(range(n)):
        raise ValueError(f"class order {order} is not a permutation of 0..{n - 1}")
    if n % classes_per_exp:
        raise ValueError(f"{n} classes cannot be split into groups of {classes_per_exp}")
    tr, val = split_validation(train, val_fraction, derive_seed(seed, "val-split"))
    experiences = []
    for t, start in enumerate(range(0, n, classes_per_exp), start=1):
        group = order[start : start + classes_per_exp]
        pick = lambda ds: ds.subset(np.flatnonzero(np.isin(ds.labels, group)), name=f"{ds.name}-e{t}")
        experiences.append(Experience(t, pick(tr), pick(val), pick(test), frozenset(group)))
    meta = {"class_order": order, "classes_per_exp": classes_per_exp, "val_fraction": val_fraction}
    return Stream(experiences, CLASS_INCREMENTAL, seed, meta)


def iterate_single_pass(data, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass over ``data`` (an Experience's train set or a Dataset); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ds = data.train if isinstance(data, Experience) else data
    order = np.random.default_rng(seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


__all__ = [
    "CLASS_INCREMENTAL",
    "DOMAIN_INCREMENTAL",
    "Experience",
    "Stream",
    "iterate_single_pass",
    "permuted_stream",
    "split_stream",
    "split_validation",
]

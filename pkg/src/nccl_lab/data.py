"""Synthetic identity datasets: classes made of Gaussian sub-clusters, with
planted uniform-box outliers, stratified train/query/gallery splits and the
old/new identity split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .model import LabeledSample
from .numeric import make_rng

SPLITS = ("train", "query", "gallery")


@dataclass
class DataSpec:
    n_classes: int = 12
    subclusters_per_class: int = 2
    samples_per_class: int = 40
    d_in: int = 16
    class_spread: float = 1.0
    subcluster_spread: float = 0.6
    noise_sigma: float = 0.25
    outlier_fraction: float = 0.05
    split_fractions: tuple = (0.5, 0.2, 0.3)
    seed: int = 1

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.validate()

    def validate(self):
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ParameterError("split_fractions: need three non-negative fractions")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ParameterError(f"split_fractions: must sum to 1, got {sum(self.split_fractions)}")
        if self.n_classes < 2:
            raise ParameterError("n_classes: need at least 2 classes")
        if self.subclusters_per_class < 1:
            raise ParameterError("subclusters_per_class: must be >= 1")
        if self.samples_per_class < self.subclusters_per_class:
            raise ParameterError("samples_per_class: must be >= subclusters_per_class")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ParameterError("outlier_fraction: must lie in [0, 0.5)")
        if self.d_in < 1:
            raise ParameterError("d_in: must be positive")
        for name in ("class_spread", "subcluster_spread", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name}: must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class Dataset:
    samples: list
    spec: DataSpec
    planted_outlier_ids: set = field(default_factory=set)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


@dataclass
class IdSubset:
    """Training samples of a subset of identities, labels re-indexed to 0..K-1."""
    samples: list
    label_map: dict   # original label -> contiguous label
    inverse_map: dict  # contiguous label -> original label

    @property
    def n_classes(self) -> int:
        return len(self.label_map)

    @property
    def ids(self) -> set:
        return {s.id for s in self.samples}


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_query = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_query = min(n_query, n - n_train)
    return n_train, n_query, n - n_train - n_query


def generate(spec: DataSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed, "data")
    K, S, n, d = spec.n_classes, spec.subclusters_per_class, spec.samples_per_class, spec.d_in

    class_centers = rng.normal(0.0, spec.class_spread, size=(K, d))
    sub_centers = class_centers[:, None, :] + rng.normal(0.0, spec.subcluster_spread, size=(K, S, d))
    sub_of = np.arange(n) % S
    X = sub_centers[:, sub_of, :] + rng.normal(0.0, spec.noise_sigma, size=(K, n, d))

    lo, hi = X.reshape(-1, d).min(axis=0), X.reshape(-1, d).max(axis=0)
    n_out = int(round(spec.outlier_fraction * n))
    outlier = np.zeros((K, n), dtype=bool)
    for k in range(K):
        if n_out:
            idx = rng.choice(n, size=n_out, replace=False)
            X[k, idx] = rng.uniform(lo, hi, size=(n_out, d))
            outlier[k, idx] = True

    counts = _split_counts(n, spec.split_fractions)
    names = np.repeat(np.array(SPLITS), counts)
    samples = []
    planted = set()
    for k in range(K):
        order = rng.permutation(n)
        split_of = np.empty(n, dtype=object)
        split_of[order] = names
        for j in range(n):
            sid = k * n + j
            samples.append(LabeledSample(sid, k, str(split_of[j]), X[k, j].copy(), bool(outlier[k, j])))
            if outlier[k, j]:
                planted.add(sid)
    return Dataset(samples, spec, planted)


def _subset(samples, classes) -> IdSubset:
    label_map = {int(c): i for i, c in enumerate(sorted(classes))}
    out = [LabeledSample(s.id, label_map[s.label], s.split, s.x, s.outlier)
           for s in samples if s.label in label_map]
    return IdSubset(out, label_map, {v: k for k, v in label_map.items()})


def id_split(dataset: Dataset, old_fraction: float = 0.5, overlap: bool = True,
             seed: int | None = None) -> tuple[IdSubset, IdSubset]:
    """Old/new training sets by identity.

    overlap=True: old gets a random ``old_fraction`` of identities, new gets all.
    overlap=False: new gets the complementary identities only.
    """
    if not 0.0 < old_fraction < 1.0:
        raise ParameterError("old_fraction: must lie strictly between 0 and 1")
    K = dataset.spec.n_classes
    n_old = int(round(old_fraction * K))
    if n_old < 1 or n_old >= K:
        raise ParameterError(f"old_fraction: {old_fraction} of {K} identities leaves one side empty")
    rng = make_rng(dataset.spec.seed if seed is None else seed, "id_split")
    old_classes = np.sort(rng.choice(K, size=n_old, replace=False)).tolist()
    train = dataset.split("train")
    d_old = _subset(train, old_classes)
    new_classes = range(K) if overlap else sorted(set(range(K)) - set(old_classes))
    d_new = _subset(train, new_classes)
    return d_old, d_new


def write_dataset(dataset: Dataset, path) -> tuple[Path, Path]:
    """Writes ``path`` (JSONL, one sample per line) and ``<stem>.header.json``."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps({"id": s.id, "label": s.label, "split": s.split,
                                 "outlier": s.outlier, "x": [float(v) for v in s.x]}) + "\n")
    header = path.with_name(path.stem + ".header.json")
    header.write_text(json.dumps({"format": "nccl-lab-dataset/1", "spec": dataset.spec.to_dict(),
                                  "seed": dataset.spec.seed, "n_samples": len(dataset.samples)},
                                 indent=1, sort_keys=True) + "\n")
    return path, header


def read_dataset(path) -> Dataset:
    path = Path(path)
    header = path.with_name(path.stem + ".header.json")
    spec = DataSpec(**json.loads(header.read_text())["spec"]) if header.exists() else None
    samples, planted = [], set()
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if r["split"] not in SPLITS:
            raise ParameterError(f"{path}: unknown split {r['split']!r}")
        s = LabeledSample(int(r["id"]), int(r["label"]), r["split"],
                          np.asarray(r["x"], dtype=np.float64), bool(r.get("outlier", False)))
        samples.append(s)
        if s.outlier:
            planted.add(s.id)
    if spec is None:
        labels = {s.label for s in samples}
        spec = DataSpec(n_classes=max(len(labels), 2), d_in=len(samples[0].x),
                        samples_per_class=max(1, len(samples) // max(len(labels), 1)),
                        subclusters_per_class=1)
    return Dataset(samples, spec, planted)

"""Bounded replay memory with prototype-based exemplar selection.

Each stored class keeps its exemplars ordered by distance to the class
prototype (ascending), so shrinking to a smaller quota is just dropping the
tail. Quotas divide the global budget evenly across observed classes,
floor(B/t) each, with the B mod t leftover slots going to the classes with
the smallest ids. Raw samples are stored, never features: features drift
with the encoder, so they are recomputed whenever selection runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Sample


def class_prototype(features) -> np.ndarray:
    """Componentwise mean of the class's feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("prototype needs a non-empty list of feature vectors")
    return features.mean(axis=0)


def select_exemplars(samples: list[Sample], features, quota: int,
                     metric: str = "euclidean") -> list[Sample]:
    """The `quota` samples nearest to the class prototype, nearest first.

    Ties are broken by original dataset index, ascending. `features` must be
    aligned with `samples` and computed under the current encoder.
    """
    if quota < 0:
        raise ValueError("quota must be non-negative")
    if quota == 0 or not samples:
        return []
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(samples):
        raise ValueError("features must align one-to-one with samples")
    proto = class_prototype(features)
    if metric == "euclidean":
        dists = np.sqrt(((features - proto) ** 2).sum(axis=1))
    elif metric == "cosine":
        norms = np.sqrt((features * features).sum(axis=1))
        pn = float(np.sqrt(proto @ proto))
        if pn < 1e-12 or norms.min() < 1e-12:
            raise ValueError("cosine distance undefined for zero-norm features")
        dists = 1.0 - (features @ proto) / (norms * pn)
    else:
        raise ValueError(f"unknown distance metric {metric!r}")
    order = sorted(range(len(samples)),
                   key=lambda i: (dists[i], samples[i].source_index))
    return [samples[i] for i in order[:quota]]


def random_select(samples: list[Sample], quota: int, seed: int) -> list[Sample]:
    """Uniform sample without replacement, deterministic under `seed`."""
    if quota < 0:
        raise ValueError("quota must be non-negative")
    if quota >= len(samples):
        return list(samples)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(samples), size=quota, replace=False)
    return [samples[i] for i in idx]


@dataclass
class ReplayMemory:
    """Per-class exemplar lists under a global budget."""

    budget: int
    per_class: dict[int, list[Sample]] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("memory budget must be non-negative")

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.per_class)

    def quota_for(self, class_id: int, total_classes: int) -> int:
        """Slot count for `class_id` when `total_classes` classes share the budget.

        floor(B/t) each; the B mod t leftover slots go to the smallest class
        ids. Class ids are assigned in observation order, so ranking by id
        equals ranking by age.
        """
        if total_classes <= 0:
            raise ValueError("total class count must be positive")
        base, extra = divmod(self.budget, total_classes)
        return base + (1 if class_id < extra else 0)

    def shrink(self, total_classes: int) -> None:
        """Truncate every stored class to its new quota, dropping the farthest."""
        for cid in self.class_ids:
            keep = self.quota_for(cid, total_classes)
            self.per_class[cid] = self.per_class[cid][:keep]

    def insert(self, class_id: int, exemplars: list[Sample]) -> None:
        if class_id in self.per_class:
            raise ValueError(f"class {class_id} already stored; shrink and reinsert instead")
        self.per_class[class_id] = list(exemplars)
        if self.total > self.budget:
            raise ValueError(f"memory over budget: {self.total} > {self.budget}")

    def all_samples(self) -> list[Sample]:
        out = []
        for cid in self.class_ids:
            out.extend(self.per_class[cid])
        return out

    def to_json_dict(self) -> dict:
        return {
            "budget": self.budget,
            "per_class": {
                str(cid): [{"text": s.text, "label": s.label,
                            "source_index": s.source_index}
                           for s in samples]
                for cid, samples in sorted(self.per_class.items())
            },
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ReplayMemory":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        mem = cls(budget=int(raw["budget"]))
        for cid, records in raw["per_class"].items():
            mem.per_class[int(cid)] = [
                Sample(text=r["text"], label=int(r["label"]),
                       source_index=int(r["source_index"]))
                for r in records
            ]
        return mem


def shrink_memory(memory: ReplayMemory, new_class_count: int) -> ReplayMemory:
    """Rebalance stored classes for `new_class_count` total observed classes.

    New classes are inserted afterwards by the caller via select_exemplars
    or random_select at their own quota.
    """
    if new_class_count <= 0:
        raise ValueError("class count must be positive")
    if new_class_count < len(memory.per_class):
        raise ValueError("class count cannot shrink below the stored class count")
    memory.shrink(new_class_count)
    return memory

"""Dataset ingestion, class-incremental schedule construction, and the
synthetic intent generator used for desk-scale benchmarking.

Input format is JSON Lines: one object per line with string fields "text"
and "label" and an optional "split" of train/valid/test. Converters for
public intent corpora are documentation recipes (see README), not code.

A schedule fixes a seeded random order over the retained classes, slices
them into consecutive steps, and assigns every sample to exactly one step
(the one owning its class) and one split. Class ids are handed out in
schedule order, so earlier classes always have smaller ids; everything
downstream (embedding rows, memory quotas, tie-breaking) leans on that.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

VALID_SPLITS = ("train", "valid", "test")

DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)

# Synthetic benchmark defaults: 10 classes, 2 per step, 100/5/20 samples per
# class after the ratio split, mild vocabulary overlap.
SYNTH_DEFAULTS = {
    "n_classes": 10,
    "samples_per_class": 125,
    "vocab_per_class": 12,
    "overlap_fraction": 0.2,
}
SYNTH_SPLIT_RATIOS = (0.8, 0.04, 0.16)
SYNTH_CLASSES_PER_STEP = 2


class DatasetError(ValueError):
    """Malformed input data."""


class ScheduleError(ValueError):
    """Invalid schedule construction request."""


@dataclass(frozen=True)
class Sample:
    """One labeled utterance, the unit of training, storage, and evaluation."""

    text: str
    label: int
    source_index: int


@dataclass(frozen=True)
class RawSample:
    """A loaded record before class ids are assigned by the schedule."""

    text: str
    label_name: str
    split: str | None
    source_index: int


@dataclass
class ScheduleStep:
    class_ids: list[int]
    class_names: list[str]
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]


@dataclass
class BenchmarkSchedule:
    """The ordered sequence of steps with their class sets and splits."""

    steps: list[ScheduleStep]
    seed: int
    classes_per_step: int
    class_names: list[str]              # index = class id
    provenance: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json_dict(self) -> dict:
        def dump(samples):
            return [{"text": s.text, "label": s.label, "source_index": s.source_index}
                    for s in samples]

        return {
            "seed": self.seed,
            "classes_per_step": self.classes_per_step,
            "class_names": self.class_names,
            "provenance": self.provenance,
            "steps": [
                {"step": i + 1, "class_ids": st.class_ids, "class_names": st.class_names,
                 "train": dump(st.train), "valid": dump(st.valid), "test": dump(st.test)}
                for i, st in enumerate(self.steps)
            ],
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "BenchmarkSchedule":
        def parse(records):
            return [Sample(r["text"], int(r["label"]), int(r["source_index"]))
                    for r in records]

        steps = [ScheduleStep(class_ids=list(st["class_ids"]),
                              class_names=list(st["class_names"]),
                              train=parse(st["train"]), valid=parse(st["valid"]),
                              test=parse(st["test"]))
                 for st in raw["steps"]]
        return cls(steps=steps, seed=int(raw["seed"]),
                   classes_per_step=int(raw["classes_per_step"]),
                   class_names=list(raw["class_names"]),
                   provenance=dict(raw.get("provenance", {})))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BenchmarkSchedule":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def manifest(self) -> dict:
        """Step -> class names -> sample counts, for auditing."""
        return {
            "seed": self.seed,
            "classes_per_step": self.classes_per_step,
            "n_steps": self.n_steps,
            "n_classes": self.n_classes,
            "provenance": self.provenance,
            "steps": [
                {"step": i + 1,
                 "classes": {name: {"train": sum(1 for s in st.train if s.label == cid),
                                    "valid": sum(1 for s in st.valid if s.label == cid),
                                    "test": sum(1 for s in st.test if s.label == cid)}
                             for cid, name in zip(st.class_ids, st.class_names)}}
                for i, st in enumerate(self.steps)
            ],
        }


def load_jsonl(path) -> tuple[list[RawSample], list[str]]:
    """Load samples from a JSON Lines file.

    Returns the samples in file order plus class names in first-appearance
    order; final class ids are assigned later by the schedule builder.
    """
    samples: list[RawSample] = []
    registry: list[str] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({err.msg})")
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}: line {lineno}: expected a JSON object")
            for key in ("text", "label"):
                if key not in obj or not isinstance(obj[key], str):
                    raise DatasetError(f"{path}: line {lineno}: missing string field {key!r}")
            split = obj.get("split")
            if split is not None and split not in VALID_SPLITS:
                raise DatasetError(
                    f"{path}: line {lineno}: split must be one of {VALID_SPLITS}, got {split!r}")
            if obj["label"] not in seen:
                seen.add(obj["label"])
                registry.append(obj["label"])
            samples.append(RawSample(text=obj["text"], label_name=obj["label"],
                                     split=split, source_index=len(samples)))
    if not samples:
        raise DatasetError(f"{path}: no samples found")
    return samples, registry


def _split_class(samples: list[RawSample], ratios, rng, name: str):
    """Stratified ratio split of one class's samples, or honor file splits."""
    with_split = [s for s in samples if s.split is not None]
    if with_split and len(with_split) != len(samples):
        raise DatasetError(f"class {name!r} mixes explicit and missing split fields")
    if with_split:
        by = {k: [s for s in samples if s.split == k] for k in VALID_SPLITS}
        return by["train"], by["valid"], by["test"]
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ScheduleError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    n = len(samples)
    order = rng.permutation(n)
    n_train = math.floor(ratios[0] * n)
    n_valid = math.floor(ratios[1] * n)
    n_test = n - n_train - n_valid
    if n_test < 1:
        raise ScheduleError(
            f"class {name!r} has {n} samples, which leaves no test sample "
            f"under ratios {ratios}; supply more data or explicit splits")
    train = [samples[i] for i in sorted(order[:n_train])]
    valid = [samples[i] for i in sorted(order[n_train:n_train + n_valid])]
    test = [samples[i] for i in sorted(order[n_train + n_valid:])]
    return train, valid, test


def build_schedule(samples: list[RawSample], seed: int, classes_per_step: int,
                   top_k_classes: int | None = None,
                   split_ratios=DEFAULT_SPLIT_RATIOS,
                   provenance: dict | None = None) -> BenchmarkSchedule:
    """Arrange classes in a seeded random order and slice them into steps.

    With `top_k_classes` only the k most frequent classes are retained (ties
    by name, lexicographic). Class order is canonicalized before shuffling,
    so the result does not depend on input file order.
    """
    if classes_per_step < 1:
        raise ScheduleError("classes_per_step must be >= 1")
    counts = Counter(s.label_name for s in samples)
    if top_k_classes is not None:
        if top_k_classes > len(counts):
            raise ScheduleError(
                f"top_k_classes={top_k_classes} exceeds the {len(counts)} classes present")
        ranked = sorted(counts, key=lambda name: (-counts[name], name))
        retained = set(ranked[:top_k_classes])
    else:
        retained = set(counts)

    rng = np.random.default_rng(seed)
    canonical = sorted(retained)
    order = [canonical[i] for i in rng.permutation(len(canonical))]
    name_to_id = {name: i for i, name in enumerate(order)}

    by_class: dict[str, list[RawSample]] = {name: [] for name in order}
    for s in samples:
        if s.label_name in retained:
            by_class[s.label_name].append(s)

    split_by_class = {}
    for name in order:  # id order, so rng consumption is schedule-determined
        split_by_class[name] = _split_class(by_class[name], split_ratios, rng, name)

    steps = []
    for start in range(0, len(order), classes_per_step):
        chunk = order[start:start + classes_per_step]
        train, valid, test = [], [], []
        for name in chunk:
            cid = name_to_id[name]
            tr, va, te = split_by_class[name]
            train.extend(Sample(s.text, cid, s.source_index) for s in tr)
            valid.extend(Sample(s.text, cid, s.source_index) for s in va)
            test.extend(Sample(s.text, cid, s.source_index) for s in te)
        steps.append(ScheduleStep(class_ids=[name_to_id[n] for n in chunk],
                                  class_names=list(chunk),
                                  train=train, valid=valid, test=test))
    return BenchmarkSchedule(steps=steps, seed=seed, classes_per_step=classes_per_step,
                             class_names=order, provenance=provenance or {})


# ------------------------------------------------------------- synthetic data

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONSONANTS for v in _VOWELS]
_WORDS = ["".join(pair) for pair in itertools.product(_SYLLABLES, repeat=2)]


def synth_generate(n_classes: int, samples_per_class: int, vocab_per_class: int,
                   overlap_fraction: float, seed: int) -> list[RawSample]:
    """Generate a synthetic intent corpus with mostly-private class vocabularies.

    Each class owns `vocab_per_class` private pseudo-words; every utterance
    draws 4-10 tokens, each coming from a shared pool with probability
    `overlap_fraction` and from the class vocabulary otherwise. With low
    overlap the classes are linearly separable under bag-of-words.
    """
    if n_classes < 2:
        raise DatasetError("need at least two classes")
    if not 0.0 <= overlap_fraction < 1.0:
        raise DatasetError("overlap_fraction must lie in [0, 1)")
    if vocab_per_class < 1 or samples_per_class < 1:
        raise DatasetError("vocab_per_class and samples_per_class must be positive")
    shared_size = max(8, vocab_per_class)
    needed = n_classes * vocab_per_class + shared_size
    if needed > len(_WORDS):
        raise DatasetError(
            f"vocab too small for requested distinct classes: need {needed} "
            f"distinct words, have {len(_WORDS)}")

    rng = np.random.default_rng(seed)
    word_ids = rng.permutation(len(_WORDS))[:needed]
    class_vocab = [[_WORDS[w] for w in word_ids[i * vocab_per_class:(i + 1) * vocab_per_class]]
                   for i in range(n_classes)]
    shared = [_WORDS[w] for w in word_ids[n_classes * vocab_per_class:]]

    samples: list[RawSample] = []
    for cls in range(n_classes):
        name = f"intent_{class_vocab[cls][0]}"
        for _ in range(samples_per_class):
            length = int(rng.integers(4, 11))
            tokens = []
            for _ in range(length):
                if rng.random() < overlap_fraction:
                    tokens.append(shared[int(rng.integers(len(shared)))])
                else:
                    tokens.append(class_vocab[cls][int(rng.integers(vocab_per_class))])
            samples.append(RawSample(text=" ".join(tokens), label_name=name,
                                     split=None, source_index=len(samples)))
    return samples


def synthetic_schedule(seed: int, n_classes: int | None = None,
                       classes_per_step: int = SYNTH_CLASSES_PER_STEP,
                       samples_per_class: int | None = None,
                       vocab_per_class: int | None = None,
                       overlap_fraction: float | None = None) -> BenchmarkSchedule:
    """Convenience wrapper: generate the synthetic corpus and schedule it."""
    cfg = dict(SYNTH_DEFAULTS)
    if n_classes is not None:
        cfg["n_classes"] = n_classes
    if samples_per_class is not None:
        cfg["samples_per_class"] = samples_per_class
    if vocab_per_class is not None:
        cfg["vocab_per_class"] = vocab_per_class
    if overlap_fraction is not None:
        cfg["overlap_fraction"] = overlap_fraction
    samples = synth_generate(seed=seed, **cfg)
    provenance = {"source": "synthetic", "seed": seed,
                  "classes_per_step": classes_per_step, **cfg}
    return build_schedule(samples, seed=seed, classes_per_step=classes_per_step,
                          split_ratios=SYNTH_SPLIT_RATIOS, provenance=provenance)


# Named slicing presets for the public intent corpora (user supplies the data
# as JSONL; see README for conversion recipes).
DATASET_PRESETS = {
    "atis": {"top_k_classes": 10, "classes_per_step": 1},
    "snips": {"top_k_classes": None, "classes_per_step": 1},
    "hwu64": {"top_k_classes": 50, "classes_per_step": 5},
    "clinc150": {"top_k_classes": None, "classes_per_step": 15},
}

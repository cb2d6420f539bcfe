"""The class-incremental step loop.

Each step: snapshot the previous model if any distillation is on, append
embedding rows for the new classes (imprinted from their feature prototypes),
train on the new data plus whatever the replay memory holds, rebalance the
memory, and evaluate on the union of all test sets seen so far.

Strategies are pure toggle bundles over the same loop. The plain baselines
(finetune, lwf, emr, icarl, upperbound) use the dot-product head and keep all
embedding rows trainable; the msr family uses the cosine head, freezes old
rows, and distills on both the prediction and the feature level.

Training is plain mini-batch SGD with momentum, fresh momentum buffers every
step, single-threaded so identical configs reproduce bit-identical reports.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Graph
from .data import BenchmarkSchedule, Sample, ScheduleStep
from .encoder import (EncoderParams, Vocab, bag_of_words, encode_batch,
                      encode_graph, extend_embedding, init_encoder)
from .losses import ClassEmbeddings, LossWeights, build_batch_loss
from .memory import ReplayMemory, random_select, select_exemplars, shrink_memory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Strategy:
    """Toggle bundle selecting head, distillation terms, and memory policy."""

    name: str
    use_memory: bool = False
    memory_selection: str = "prototype"   # prototype | random
    head: str = "dot"                     # dot | cosine
    use_pkd: bool = False
    use_fkd: bool = False
    use_icml: bool = False
    freeze_old_embeddings: bool = False
    upper_bound_mode: bool = False

    def __post_init__(self):
        if self.head not in ("dot", "cosine"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.memory_selection not in ("prototype", "random"):
            raise ValueError(f"unknown memory selection {self.memory_selection!r}")

    def to_dict(self) -> dict:
        return asdict(self)


_MSR = Strategy(name="msr", use_memory=True, memory_selection="prototype",
                head="cosine", use_pkd=True, use_fkd=True, use_icml=True,
                freeze_old_embeddings=True)

STRATEGY_PRESETS = {
    "finetune": Strategy(name="finetune"),
    "upperbound": Strategy(name="upperbound", upper_bound_mode=True),
    "lwf": Strategy(name="lwf", use_pkd=True),
    "emr": Strategy(name="emr", use_memory=True, memory_selection="random"),
    "icarl": Strategy(name="icarl", use_memory=True, memory_selection="prototype",
                      use_pkd=True),
    "msr": _MSR,
}

def _variant(name: str, **changes) -> Strategy:
    base = _MSR.to_dict()
    base.update(changes)
    base["name"] = name
    return Strategy(**base)


# Ablations of the full method: each removes exactly the named ingredients.
ABLATION_VARIANTS = {
    "MSR": _MSR,
    "-CN": _variant("msr_no_cn", head="dot"),
    "-FKD": _variant("msr_no_fkd", use_fkd=False),
    "-PKD": _variant("msr_no_pkd", use_pkd=False),
    "-HKD": _variant("msr_no_hkd", use_pkd=False, use_fkd=False),
    "-ICML": _variant("msr_no_icml", use_icml=False),
    "-CN&HKD": _variant("msr_no_cn_hkd", head="dot", use_pkd=False, use_fkd=False),
    "-MSR": _variant("emr", head="dot", use_pkd=False, use_fkd=False,
                     use_icml=False, memory_selection="random",
                     freeze_old_embeddings=False),
}


def strategy_preset(name: str) -> Strategy:
    key = name.lower()
    if key not in STRATEGY_PRESETS:
        raise ValueError(
            f"unknown strategy {name!r}; valid: {', '.join(sorted(STRATEGY_PRESETS))}")
    return STRATEGY_PRESETS[key]


@dataclass
class Hyperparams:
    """Operating defaults, calibrated for the CPU-scale encoder.

    tau/temp/alpha/beta1/beta2/batch/memory match the published
    configuration of the method. beta3 and lr do not transfer from
    fine-tuning a large pretrained encoder: beta3=10000 was paired with
    lr=5e-5 there, and at desk-scale learning rates it blows new class
    embeddings up to norms in the thousands. The pilot-calibrated pairing
    here is lr=0.005 with beta3=1.0 and 40 epochs per step.
    """

    tau: float = 50.0
    temp: float = 2.0
    alpha: float = -0.1
    beta1: float = 0.001
    beta2: float = 0.002
    beta3: float = 1.0
    memory_budget: int = 200
    lr: float = 0.005
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 64
    d_emb: int = 64
    d_feat: int = 64
    min_freq: int = 1
    memory_distance: str = "euclidean"
    icml_include_new_pairs: bool = False

    def loss_weights(self) -> LossWeights:
        return LossWeights(tau=self.tau, temp=self.temp, alpha=self.alpha,
                           beta1=self.beta1, beta2=self.beta2, beta3=self.beta3)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    """Encoder, class embeddings, vocabulary, and the step counter.

    snapshot() returns a deep copy; nothing done to the live model afterwards
    may change the copy's outputs (checked bitwise in the test suite).
    """

    encoder: EncoderParams
    classes: ClassEmbeddings
    vocab: Vocab
    step: int = 0

    def snapshot(self) -> "ModelState":
        return ModelState(encoder=self.encoder.copy(), classes=self.classes.copy(),
                          vocab=copy.deepcopy(self.vocab), step=self.step)

    def features(self, texts: list[str]) -> np.ndarray:
        return encode_batch(self.encoder, [self.vocab.tokenize(t) for t in texts])

    def scores(self, features: np.ndarray, head: str, n_classes: int | None = None,
               tau: float = 1.0) -> np.ndarray:
        """Score matrix (B, C) under the requested head.

        For the cosine head the scores are tau-scaled cosines, i.e. exactly
        what feeds the softmax and the prediction-level distillation.
        """
        mat = self.classes.matrix if n_classes is None else self.classes.matrix[:n_classes]
        if head == "cosine":
            fn = np.sqrt((features * features).sum(axis=1))
            mn = np.sqrt((mat * mat).sum(axis=1))
            if fn.min(initial=np.inf) < 1e-12 or mn.min(initial=np.inf) < 1e-12:
                raise ValueError("zero-norm vector in cosine scoring")
            return tau * (features @ mat.T) / (fn[:, None] * mn[None, :])
        return features @ mat.T


def new_model(hp: Hyperparams, rng: np.random.Generator) -> ModelState:
    vocab = Vocab(min_freq=hp.min_freq)
    encoder = init_encoder(vocab.size, hp.d_emb, hp.d_feat, rng)
    return ModelState(encoder=encoder, classes=ClassEmbeddings.empty(hp.d_feat),
                      vocab=vocab)


def init_new_classes(model: ModelState, step_train: list[Sample],
                     new_class_ids: list[int], rng: np.random.Generator) -> ModelState:
    """Append an embedding row per new class, imprinted from its prototype.

    The row is the unit-normalized mean feature of the class's training
    samples under the current encoder; classes without training data fall
    back to a seeded random unit vector.
    """
    for cid in new_class_ids:
        if cid in model.classes.row_of:
            raise ValueError(f"class id {cid} already initialized")
        texts = [s.text for s in step_train if s.label == cid]
        if texts:
            proto = model.features(texts).mean(axis=0)
            norm = float(np.sqrt(proto @ proto))
        else:
            proto, norm = None, 0.0
        if norm < 1e-8:
            proto = rng.normal(size=model.encoder.d_feat)
            norm = float(np.sqrt(proto @ proto))
        model.classes.append(cid, proto / norm)
    return model


def evaluate(model: ModelState, samples: list[Sample], head: str) -> float:
    """Accuracy of argmax classification over all known classes."""
    correct, total = _evaluate_counts(model, samples, head)
    return correct / total


def _evaluate_counts(model, samples, head):
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    known = set(model.classes.row_of)
    for s in samples:
        if s.label not in known:
            raise ValueError(f"test label {s.label} is not a known class")
    feats = model.features([s.text for s in samples])
    scores = model.scores(feats, head)
    pred_rows = np.argmax(scores, axis=1)  # ties resolve to the smallest row = oldest class
    row_to_class = {row: cid for cid, row in model.classes.row_of.items()}
    preds = np.array([row_to_class[r] for r in pred_rows])
    labels = np.array([s.label for s in samples])
    return int((preds == labels).sum()), len(samples)


def per_class_counts(model: ModelState, samples: list[Sample], head: str) -> dict[int, list[int]]:
    """class id -> [correct, total] on the given samples."""
    feats = model.features([s.text for s in samples])
    scores = model.scores(feats, head)
    pred_rows = np.argmax(scores, axis=1)
    row_to_class = {row: cid for cid, row in model.classes.row_of.items()}
    out: dict[int, list[int]] = {}
    for s, row in zip(samples, pred_rows):
        cell = out.setdefault(s.label, [0, 0])
        cell[1] += 1
        if row_to_class[row] == s.label:
            cell[0] += 1
    return out


def _train_epochs(model: ModelState, pool: list[Sample], snapshot: ModelState | None,
                  strategy: Strategy, hp: Hyperparams, rng: np.random.Generator,
                  n_old: int, valid: list[Sample] | None = None) -> None:
    weights = hp.loss_weights()
    frozen_rows = model.classes.frozen.copy()
    velocity = {name: np.zeros_like(arr) for name, arr in model.encoder.arrays().items()}
    velocity["theta"] = np.zeros_like(model.classes.matrix)

    snap_cache: dict[str, np.ndarray] = {}

    def snapshot_outputs(texts):
        # snapshot outputs are per-text constants; cache across epochs
        missing = [t for t in texts if t not in snap_cache]
        if missing:
            feats = snapshot.features(missing)
            scores = snapshot.scores(feats, strategy.head,
                                     n_classes=snapshot.classes.n_classes,
                                     tau=weights.tau if strategy.head == "cosine" else 1.0)
            for t, f, s in zip(missing, feats, scores):
                snap_cache[t] = (f, s)
        feats = np.stack([snap_cache[t][0] for t in texts])
        scores = np.stack([snap_cache[t][1] for t in texts])
        return feats, scores

    for epoch in range(hp.epochs):
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), hp.batch_size):
            batch = [pool[i] for i in order[start:start + hp.batch_size]]
            texts = [s.text for s in batch]
            onehot = np.zeros((len(batch), model.classes.n_classes))
            for i, s in enumerate(batch):
                onehot[i, model.classes.row_of[s.label]] = 1.0

            snap_feats = snap_scores = None
            if snapshot is not None and (strategy.use_pkd or strategy.use_fkd):
                snap_feats, snap_scores = snapshot_outputs(texts)

            g = Graph()
            leaves = {name: g.leaf(arr, trainable=True, name=name)
                      for name, arr in model.encoder.arrays().items()}
            theta = g.leaf(model.classes.matrix, trainable=True, name="theta")
            bow = g.constant(bag_of_words([model.vocab.tokenize(t) for t in texts],
                                          model.encoder.embedding.shape[0]))
            features = encode_graph(g, leaves, bow)
            nodes = build_batch_loss(
                g, features, theta, onehot, weights, head=strategy.head,
                n_old=n_old,
                snapshot_features=snap_feats, snapshot_scores=snap_scores,
                use_pkd=strategy.use_pkd and snapshot is not None,
                use_fkd=strategy.use_fkd and snapshot is not None,
                use_icml=strategy.use_icml and n_old > 0,
                include_new_pairs=hp.icml_include_new_pairs)
            g.forward(nodes["total"])
            grads = g.backward(nodes["total"])

            for name, arr in model.encoder.arrays().items():
                v = velocity[name]
                v *= hp.momentum
                v += grads[leaves[name]]
                arr -= hp.lr * v
            theta_grad = grads[theta]
            if strategy.freeze_old_embeddings and frozen_rows.any():
                theta_grad = theta_grad.copy()
                theta_grad[frozen_rows] = 0.0
            v = velocity["theta"]
            v *= hp.momentum
            v += theta_grad
            if strategy.freeze_old_embeddings and frozen_rows.any():
                v[frozen_rows] = 0.0
            model.classes.matrix -= hp.lr * v

        if valid and log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d valid acc %.4f", epoch + 1,
                      evaluate(model, valid, strategy.head))


def run_step(model: ModelState, memory: ReplayMemory, step: ScheduleStep,
             strategy: Strategy, hp: Hyperparams, rng: np.random.Generator,
             cumulative_train: list[Sample], cumulative_test: list[Sample],
             cumulative_valid: list[Sample] | None = None) -> float:
    """Train on one step and return accuracy on the cumulative test set."""
    overlap = set(step.class_ids) & set(model.classes.row_of)
    if overlap:
        raise ValueError(f"step class ids overlap already observed classes: {sorted(overlap)}")

    # vocab grows first so the snapshot taken below can encode new-step text
    added = model.vocab.extend([s.text for s in step.train])
    extend_embedding(model.encoder, added, rng)

    n_old = model.classes.n_classes
    snapshot = None
    if model.step >= 1 and (strategy.use_pkd or strategy.use_fkd):
        snapshot = model.snapshot()

    init_new_classes(model, step.train, step.class_ids, rng)

    model.classes.frozen[:] = False
    if strategy.freeze_old_embeddings and n_old > 0:
        model.classes.frozen[:n_old] = True

    if strategy.upper_bound_mode:
        pool = list(cumulative_train)
    else:
        pool = list(step.train) + memory.all_samples()
    if not pool:
        raise ValueError("empty training pool")

    _train_epochs(model, pool, snapshot, strategy, hp, rng, n_old,
                  valid=cumulative_valid)

    if strategy.use_memory:
        total_classes = model.classes.n_classes
        shrink_memory(memory, total_classes)
        for cid in step.class_ids:
            quota = memory.quota_for(cid, total_classes)
            class_samples = [s for s in step.train if s.label == cid]
            if strategy.memory_selection == "random":
                chosen = random_select(class_samples, quota,
                                       seed=int(rng.integers(2 ** 31)))
            else:
                feats = model.features([s.text for s in class_samples])
                chosen = select_exemplars(class_samples, feats, quota,
                                          metric=hp.memory_distance)
            memory.insert(cid, chosen)

    model.step += 1
    return evaluate(model, cumulative_test, strategy.head)


@dataclass
class RunReport:
    """Everything one benchmark run produced."""

    strategy: str
    config: dict
    step_accs: list[float]
    classes_seen: list[int]
    new_classes: list[list[str]]
    per_class: list[dict[str, list[int]]]   # per step: class name -> [correct, total]
    average_acc: float
    whole_acc: float
    wall_clock: list[float] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.step_accs)

    def accuracy_on_classes(self, step_index: int, class_names: list[str]) -> float:
        """Final-step accuracy restricted to the given classes."""
        counts = self.per_class[step_index]
        correct = sum(counts[name][0] for name in class_names)
        total = sum(counts[name][1] for name in class_names)
        return correct / total

    def to_json_dict(self, include_timing: bool = False) -> dict:
        out = {
            "strategy": self.strategy,
            "config": self.config,
            "steps": [
                {"step": i + 1, "classes_seen": self.classes_seen[i],
                 "new_classes": self.new_classes[i], "acc": self.step_accs[i],
                 "per_class": self.per_class[i]}
                for i in range(self.n_steps)
            ],
            "average_acc": self.average_acc,
            "whole_acc": self.whole_acc,
        }
        if include_timing:
            out["wall_clock_sec"] = self.wall_clock
        return out

    @classmethod
    def from_json_dict(cls, raw: dict) -> "RunReport":
        steps = raw["steps"]
        return cls(strategy=raw["strategy"], config=raw["config"],
                   step_accs=[s["acc"] for s in steps],
                   classes_seen=[s["classes_seen"] for s in steps],
                   new_classes=[s["new_classes"] for s in steps],
                   per_class=[s["per_class"] for s in steps],
                   average_acc=raw["average_acc"], whole_acc=raw["whole_acc"],
                   wall_clock=raw.get("wall_clock_sec", []))


def run_benchmark(schedule: BenchmarkSchedule, strategy: Strategy, hp: Hyperparams,
                  seed: int, step_callback=None) -> RunReport:
    """Fold run_step over the schedule and assemble the report.

    All randomness derives from `seed`; repeated calls with identical inputs
    produce identical reports, floats included (timing aside).
    """
    if schedule.n_steps < 1:
        raise ValueError("schedule needs at least one step")
    rng = np.random.default_rng(seed)
    model = new_model(hp, rng)
    memory = ReplayMemory(budget=hp.memory_budget)

    id_to_name = dict(enumerate(schedule.class_names))
    cumulative_train: list[Sample] = []
    cumulative_valid: list[Sample] = []
    cumulative_test: list[Sample] = []
    step_accs, classes_seen, new_classes, per_class, wall = [], [], [], [], []

    for i, step in enumerate(schedule.steps):
        started = time.perf_counter()
        cumulative_train.extend(step.train)
        cumulative_valid.extend(step.valid)
        cumulative_test.extend(step.test)
        acc = run_step(model, memory, step, strategy, hp, rng,
                       cumulative_train, cumulative_test,
                       cumulative_valid or None)
        wall.append(time.perf_counter() - started)
        step_accs.append(acc)
        classes_seen.append(model.classes.n_classes)
        new_classes.append(list(step.class_names))
        counts = per_class_counts(model, cumulative_test, strategy.head)
        per_class.append({id_to_name[cid]: counts[cid] for cid in sorted(counts)})
        log.info("step %d/%d [%s] classes=%d acc=%.4f (%.2fs)",
                 i + 1, schedule.n_steps, strategy.name,
                 model.classes.n_classes, acc, wall[-1])
        if step_callback is not None:
            step_callback(i, model, memory, acc)

    config = {
        "schedule": {"seed": schedule.seed,
                     "classes_per_step": schedule.classes_per_step,
                     "provenance": schedule.provenance},
        "strategy": strategy.to_dict(),
        "hyperparams": hp.to_dict(),
        "seed": seed,
    }
    return RunReport(strategy=strategy.name, config=config, step_accs=step_accs,
                     classes_seen=classes_seen, new_classes=new_classes,
                     per_class=per_class,
                     average_acc=float(np.mean(step_accs)),
                     whole_acc=step_accs[-1], wall_clock=wall)

"""Classifier heads and every loss term of the training objective.

Two heads are supported. The plain head scores a feature vector by dot
product against each class embedding; its argmax can be flipped by simply
rescaling one embedding row, which is the magnitude bias that hurts the
under-represented old classes. The cosine head removes that bias: class
probabilities come from a softmax over tau-scaled cosine similarities, so
positive rescaling of the feature or of any row changes nothing.

Knowledge is preserved across steps on two levels. Prediction-level
distillation matches the temperature-softened old-class distribution of a
frozen previous model; feature-level distillation keeps the current feature
vector angularly close to the one the previous model extracts. The
inter-class margin term pushes cosines between new and old class embeddings
under a margin so freshly learned classes cannot crowd the old ones.

Every public function here is a plain numpy reference implementation; the
``build_batch_loss`` graph builder assembles the identical math on an
autodiff graph for training. Tests pin the two routes against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import LOG_FLOOR, NORM_FLOOR, Graph, Node, ZeroNormError

DEFAULT_TAU = 50.0
DEFAULT_TEMP = 2.0
DEFAULT_ALPHA = -0.1
# The margin weight scales with the optimizer step size; this default pairs
# with the engine's desk-scale learning rate (see engine.Hyperparams).
DEFAULT_BETAS = (0.001, 0.002, 1.0)

# Training-path log guard. At tau=50 a confidently wrong sample can have a
# target probability far below 1e-12; clamping there would zero its gradient,
# so the training objective only guards against exact underflow.
TRAIN_LOG_FLOOR = 1e-300


@dataclass
class LossWeights:
    """Scales of the combined objective."""

    tau: float = DEFAULT_TAU
    temp: float = DEFAULT_TEMP
    alpha: float = DEFAULT_ALPHA
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    beta3: float = DEFAULT_BETAS[2]

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.temp <= 0:
            raise ValueError("distillation temperature must be positive")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha bounds a cosine and must lie in [-1, 1]")


@dataclass
class ClassEmbeddings:
    """One trainable row per observed class, plus per-row frozen flags.

    Rows are only ever appended, never reordered, so row index order matches
    the order classes were observed in.
    """

    matrix: np.ndarray                       # (n_classes, d_feat)
    frozen: np.ndarray                       # (n_classes,) bool
    row_of: dict[int, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, d_feat: int) -> "ClassEmbeddings":
        return cls(matrix=np.zeros((0, d_feat)), frozen=np.zeros(0, dtype=bool))

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_feat(self) -> int:
        return self.matrix.shape[1]

    def append(self, class_id: int, vector: np.ndarray) -> None:
        if class_id in self.row_of:
            raise ValueError(f"class id {class_id} already has an embedding row")
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.d_feat,):
            raise ValueError(f"embedding row must have dim {self.d_feat}")
        self.row_of[class_id] = self.n_classes
        self.matrix = np.vstack([self.matrix, vector[None, :]])
        self.frozen = np.append(self.frozen, False)

    def copy(self) -> "ClassEmbeddings":
        return ClassEmbeddings(self.matrix.copy(), self.frozen.copy(), dict(self.row_of))


# ------------------------------------------------------------------- heads


def _require_norm(v: np.ndarray, what: str) -> float:
    n = float(np.sqrt((v * v).sum()))
    if n < NORM_FLOOR:
        raise ZeroNormError(f"{what} has zero norm")
    return n


def _as_matrix(theta) -> np.ndarray:
    return theta.matrix if isinstance(theta, ClassEmbeddings) else np.asarray(theta, float)


def dot_scores(f: np.ndarray, theta) -> np.ndarray:
    """Dot-product score per class: s_i = f . theta_i."""
    mat = _as_matrix(theta)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (mat.shape[1],):
        raise ValueError(f"feature dim {f.shape} does not match embeddings {mat.shape}")
    return mat @ f


def cosine_scores(f: np.ndarray, theta) -> np.ndarray:
    mat = _as_matrix(theta)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (mat.shape[1],):
        raise ValueError(f"feature dim {f.shape} does not match embeddings {mat.shape}")
    fn = _require_norm(f, "feature vector")
    out = np.empty(mat.shape[0])
    for i, row in enumerate(mat):
        rn = _require_norm(row, f"class embedding row {i}")
        out[i] = float(row @ f) / (rn * fn)
    return out


def cosine_probs(f: np.ndarray, theta, tau: float) -> np.ndarray:
    """Softmax over tau-scaled cosine similarities, overflow-safe."""
    s = tau * cosine_scores(f, theta)
    s -= s.max()
    e = np.exp(s)
    return e / e.sum()


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """-sum(y log p) with the log clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError("label vector must match probability vector")
    ones = np.flatnonzero(y == 1.0)
    if len(ones) != 1 or not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must be one-hot")
    return float(-math.log(max(p[ones[0]], LOG_FLOOR)))


def _soft(s: np.ndarray, temp: float) -> np.ndarray:
    z = np.asarray(s, dtype=np.float64) / temp
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def kd_loss(s_star: np.ndarray, s: np.ndarray, temp: float) -> float:
    """Cross entropy from the frozen model's softened old-class scores to ours.

    Both score vectors are restricted to the old classes in matching order;
    `s_star` carries no gradient by construction (it comes from a snapshot).
    """
    s_star = np.asarray(s_star, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s_star.size == 0 or s.size == 0:
        raise ValueError("distillation needs at least one old class; skip it at step 1")
    if s_star.shape != s.shape:
        raise ValueError("old-class score vectors must have matching shape")
    target = _soft(s_star, temp)
    ours = _soft(s, temp)
    return float(-(target * np.log(np.maximum(ours, TRAIN_LOG_FLOOR))).sum())


def fkd_loss(f: np.ndarray, f_star: np.ndarray) -> float:
    """1 - cos(f, f_star): angular drift from the frozen model's feature."""
    f = np.asarray(f, dtype=np.float64)
    f_star = np.asarray(f_star, dtype=np.float64)
    fn = _require_norm(f, "feature vector")
    gn = _require_norm(f_star, "snapshot feature vector")
    return float(1.0 - (f @ f_star) / (fn * gn))


def icml_loss(theta_new: np.ndarray, theta_old: np.ndarray, alpha: float,
              include_new_pairs: bool = False) -> float:
    """Hinge on pairwise cosines between new and old class embeddings.

    Summed (not averaged) over pairs. With `include_new_pairs` the distinct
    new-new pairs are penalized too; default keeps new-old pairs only.
    """
    theta_new = np.atleast_2d(np.asarray(theta_new, dtype=np.float64))
    theta_old = np.atleast_2d(np.asarray(theta_old, dtype=np.float64))
    if theta_old.shape[0] == 0 or theta_old.size == 0:
        raise ValueError("margin loss needs at least one old class; skip it at step 1")
    new_norms = [_require_norm(r, f"new embedding row {i}") for i, r in enumerate(theta_new)]
    old_norms = [_require_norm(r, f"old embedding row {j}") for j, r in enumerate(theta_old)]
    total = 0.0
    for i, ni in enumerate(new_norms):
        for j, nj in enumerate(old_norms):
            c = float(theta_new[i] @ theta_old[j]) / (ni * nj)
            total += max(c - alpha, 0.0)
    if include_new_pairs:
        for i in range(len(new_norms)):
            for j in range(i + 1, len(new_norms)):
                c = float(theta_new[i] @ theta_new[j]) / (new_norms[i] * new_norms[j])
                total += max(c - alpha, 0.0)
    return total


def total_loss(features: np.ndarray, onehot: np.ndarray, theta,
               weights: LossWeights, *, head: str = "cosine", n_old: int = 0,
               snapshot_features: np.ndarray | None = None,
               snapshot_scores: np.ndarray | None = None,
               use_pkd: bool = False, use_fkd: bool = False, use_icml: bool = False,
               include_new_pairs: bool = False) -> float:
    """Reference evaluation of the combined objective over one batch.

    Classification, prediction-level, and feature-level terms are averaged
    over the batch (replayed and new samples alike); the margin term is
    computed once per batch over embedding-row pairs. When there is no
    previous model (`n_old` == 0 / no snapshot inputs) the result is exactly
    the classification loss.
    """
    mat = _as_matrix(theta)
    features = np.asarray(features, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    batch = features.shape[0]

    ce_terms = []
    for b in range(batch):
        if head == "cosine":
            p = cosine_probs(features[b], mat, weights.tau)
        else:
            s = dot_scores(features[b], mat)
            p = _soft(s, 1.0)
        target = int(np.flatnonzero(onehot[b] == 1.0)[0])
        ce_terms.append(float(-math.log(max(p[target], TRAIN_LOG_FLOOR))))
    loss = float(np.mean(ce_terms))

    if use_pkd and n_old > 0 and snapshot_scores is not None:
        kd_terms = []
        for b in range(batch):
            if head == "cosine":
                s = weights.tau * cosine_scores(features[b], mat[:n_old])
            else:
                s = dot_scores(features[b], mat[:n_old])
            kd_terms.append(kd_loss(snapshot_scores[b], s, weights.temp))
        loss += weights.beta1 * float(np.mean(kd_terms))

    if use_fkd and snapshot_features is not None:
        fkd_terms = [fkd_loss(features[b], snapshot_features[b]) for b in range(batch)]
        loss += weights.beta2 * float(np.mean(fkd_terms))

    if use_icml and n_old > 0 and mat.shape[0] > n_old:
        loss += weights.beta3 * icml_loss(mat[n_old:], mat[:n_old], weights.alpha,
                                          include_new_pairs=include_new_pairs)
    return loss


# ----------------------------------------------------------- graph builders


def build_batch_loss(g: Graph, features: Node, theta: Node, onehot: np.ndarray,
                     weights: LossWeights, *, head: str = "cosine", n_old: int = 0,
                     snapshot_features: np.ndarray | None = None,
                     snapshot_scores: np.ndarray | None = None,
                     use_pkd: bool = False, use_fkd: bool = False,
                     use_icml: bool = False,
                     include_new_pairs: bool = False) -> dict[str, Node]:
    """Assemble the combined objective on an autodiff graph.

    `features` is the (B, d) feature node, `theta` the (C, d) class-embedding
    leaf. Snapshot quantities enter as constants so no gradient reaches the
    previous model. Returns the component nodes under keys total/ce/kd/fkd/icml.
    """
    batch, n_classes = onehot.shape
    y = g.constant(onehot, name="labels")

    if head == "cosine":
        logits = g.scale(g.cosine_rows(features, theta), weights.tau)
    else:
        logits = g.matmul(features, theta, transpose_b=True)
    probs = g.softmax(logits)
    ce = g.scale(g.sum(g.mul(y, g.log(probs, floor=TRAIN_LOG_FLOOR))), -1.0 / batch)
    nodes = {"ce": ce}
    loss = ce

    if use_pkd and n_old > 0:
        if snapshot_scores is None:
            raise ValueError("prediction-level distillation needs snapshot scores")
        theta_old = g.slice_rows(theta, 0, n_old)
        if head == "cosine":
            s = g.scale(g.cosine_rows(features, theta_old), weights.tau)
        else:
            s = g.matmul(features, theta_old, transpose_b=True)
        soft_target = np.apply_along_axis(_soft, 1, np.asarray(snapshot_scores, float),
                                          weights.temp)
        target = g.constant(soft_target, name="kd_target")
        gamma = g.softmax(s, temperature=weights.temp)
        kd = g.scale(g.sum(g.mul(target, g.log(gamma, floor=TRAIN_LOG_FLOOR))), -1.0 / batch)
        nodes["kd"] = kd
        loss = g.add(loss, g.scale(kd, weights.beta1))

    if use_fkd:
        if snapshot_features is None:
            raise ValueError("feature-level distillation needs snapshot features")
        f_star = g.constant(np.asarray(snapshot_features, float), name="snapshot_features")
        cos = g.cosine_pairs(features, f_star)
        fkd = g.mean(g.sub(g.constant(np.ones(batch)), cos))
        nodes["fkd"] = fkd
        loss = g.add(loss, g.scale(fkd, weights.beta2))

    if use_icml and n_old > 0 and n_classes > n_old:
        theta_new = g.slice_rows(theta, n_old, n_classes)
        theta_old = g.slice_rows(theta, 0, n_old)
        cos = g.cosine_rows(theta_new, theta_old)
        icml = g.sum(g.relu(g.sub(cos, g.constant(weights.alpha))))
        if include_new_pairs:
            cos_nn = g.cosine_rows(theta_new, theta_new)
            hinge_nn = g.relu(g.sub(cos_nn, g.constant(weights.alpha)))
            n_new = n_classes - n_old
            # each unordered pair appears twice off-diagonal; the diagonal is
            # cos(x, x) = 1 and must not be counted
            diag_correction = n_new * max(1.0 - weights.alpha, 0.0)
            icml = g.add(icml, g.scale(g.sub(g.sum(hinge_nn),
                                             g.constant(diag_correction)), 0.5))
        nodes["icml"] = icml
        loss = g.add(loss, g.scale(icml, weights.beta3))

    nodes["total"] = loss
    return nodes

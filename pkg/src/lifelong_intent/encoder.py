"""Text side of the model: tokenizer, growable vocabulary, and the trainable
encoder that maps an utterance to its feature vector.

The encoder is deliberately small: mean-pooled trainable token embeddings
followed by a two-layer MLP with a tanh in between. Mean pooling makes the
mapping order-invariant over tokens, and the whole thing is differentiable
end to end through the autodiff graph.

The vocabulary only ever grows, and only from training splits: already
assigned token ids never change, so a snapshot of an older model keeps
encoding any text it could encode before (plus new tokens via fresh rows).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node

UNK_ID = 0
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\w+")


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    """Token-to-id map with id 0 reserved for unknown tokens."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    min_freq: int = 1

    @property
    def size(self) -> int:
        return len(self.token_to_id) + 1  # + unk

    def tokenize(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in split_text(text)]

    def extend(self, texts: list[str]) -> int:
        """Append unseen tokens meeting min_freq; returns how many were added.

        Call this only with training-split texts.
        """
        counts = Counter()
        for text in texts:
            counts.update(split_text(text))
        fresh = [(tok, n) for tok, n in counts.items()
                 if n >= self.min_freq and tok not in self.token_to_id]
        fresh.sort(key=lambda item: (-item[1], item[0]))
        for tok, _ in fresh:
            self.token_to_id[tok] = len(self.token_to_id) + 1
        return len(fresh)

    def save(self, path) -> None:
        tokens = [UNK_TOKEN] + sorted(self.token_to_id, key=self.token_to_id.get)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(tokens) + "\n")

    @classmethod
    def load(cls, path, min_freq: int = 1) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValueError(f"vocab file {path} must start with {UNK_TOKEN}")
        return cls(token_to_id={tok: i + 1 for i, tok in enumerate(tokens[1:])},
                   min_freq=min_freq)


def build_vocab(texts: list[str], min_freq: int = 1) -> Vocab:
    """Build a vocabulary from training texts (frequency desc, then lexicographic)."""
    if not texts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    vocab = Vocab(min_freq=min_freq)
    vocab.extend(texts)
    return vocab


@dataclass
class EncoderParams:
    """Trainable arrays of the encoder. Output dim is fixed for a run."""

    embedding: np.ndarray  # (vocab size, d_emb)
    w1: np.ndarray         # (d_emb, d_feat)
    b1: np.ndarray         # (d_feat,)
    w2: np.ndarray         # (d_feat, d_feat)
    b2: np.ndarray         # (d_feat,)

    @property
    def d_feat(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embedding.copy(), self.w1.copy(), self.b1.copy(),
                             self.w2.copy(), self.b2.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}


def init_encoder(vocab_size: int, d_emb: int, d_feat: int,
                 rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(
        embedding=rng.normal(0.0, 0.1, size=(vocab_size, d_emb)),
        w1=rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(d_emb, d_feat)),
        b1=np.zeros(d_feat),
        w2=rng.normal(0.0, 1.0 / np.sqrt(d_feat), size=(d_feat, d_feat)),
        b2=np.zeros(d_feat),
    )


def extend_embedding(params: EncoderParams, n_new: int, rng: np.random.Generator) -> None:
    """Append seeded rows for tokens added at a step boundary."""
    if n_new <= 0:
        return
    rows = rng.normal(0.0, 0.1, size=(n_new, params.embedding.shape[1]))
    params.embedding = np.vstack([params.embedding, rows])


def bag_of_words(token_id_lists: list[list[int]], vocab_size: int) -> np.ndarray:
    """Mean-pooling weights per utterance; an empty token list gives a zero row."""
    bow = np.zeros((len(token_id_lists), vocab_size))
    for row, ids in enumerate(token_id_lists):
        if not ids:
            continue
        w = 1.0 / len(ids)
        for tid in ids:
            bow[row, tid] += w
    return bow


def encode_batch(params: EncoderParams, token_id_lists: list[list[int]]) -> np.ndarray:
    """Feature vectors for a batch of tokenized utterances, shape (B, d_feat)."""
    bow = bag_of_words(token_id_lists, params.embedding.shape[0])
    pooled = bow @ params.embedding
    hidden = np.tanh(pooled @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def encode(token_ids: list[int], params: EncoderParams) -> np.ndarray:
    """Feature vector for one tokenized utterance, shape (d_feat,)."""
    return encode_batch(params, [token_ids])[0]


def encode_graph(g: Graph, leaves: dict[str, Node], bow: Node) -> Node:
    """Build the encoder forward pass on a graph; returns the feature node.

    `leaves` must hold nodes named embedding/w1/b1/w2/b2; `bow` is the
    constant pooling-weight matrix of the batch.
    """
    pooled = g.matmul(bow, leaves["embedding"])
    hidden = g.tanh(g.add(g.matmul(pooled, leaves["w1"]), leaves["b1"]))
    return g.add(g.matmul(hidden, leaves["w2"]), leaves["b2"])

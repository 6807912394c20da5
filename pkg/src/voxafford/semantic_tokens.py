"""Bag-of-words query embedding that yields one token per voxel scale.

Each lowercase word hashes to a fixed pseudo-random vector, the word vectors
are averaged, and a separate linear head per scale produces that scale's
token.  Unknown words simply hash to new vectors.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .numcore import Linear, Module, Tensor, stack

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class AffordanceQuery:
    text: str

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


def tokenize(text: str) -> list[str]:
    words = _WORD.findall(text.lower())
    if not words:
        raise InputError(f"query {text!r} contains no words")
    return words


def word_vector(word: str, d: int, seed: int = 0) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{word}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(d) / np.sqrt(d)


def bag_of_words(text: str, d: int, seed: int = 0) -> np.ndarray:
    words = tokenize(text)
    return np.mean([word_vector(w, d, seed) for w in words], axis=0)


@dataclass(frozen=True)
class AffordanceTokenSet:
    tokens: Tensor  # [..., K, d]
    scale_tags: tuple[int, ...]

    @property
    def K(self):
        return len(self.scale_tags)


class TokenHeads(Module):
    def __init__(self, d, scales, word_seed=0):
        self.d = d
        self.scales = tuple(scales)
        self.word_seed = word_seed
        self.heads = [Linear(d, d) for _ in self.scales]

    def embed_vectors(self, bow: np.ndarray) -> AffordanceTokenSet:
        """``bow`` is ``[Q, d]`` (or ``[d]``) averaged word vectors."""
        x = Tensor(bow)
        if x.shape[-1] != self.d:
            raise ContractError(f"bag-of-words width {x.shape[-1]} != token width {self.d}")
        return AffordanceTokenSet(stack([h(x) for h in self.heads], axis=-2), self.scales)

    def embed_query(self, query) -> AffordanceTokenSet:
        text = query.text if isinstance(query, AffordanceQuery) else str(query)
        return self.embed_vectors(bag_of_words(text, self.d, self.word_seed))

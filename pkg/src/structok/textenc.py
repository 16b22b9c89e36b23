"""Deterministic hashed bag-of-words featurizer for current-visit clinical text.

Stands in for a learned text encoder behind the same fusion interface: the
output is a dense L2-normalized vector, so any encoder producing one can be
swapped in. Hashing uses keyed BLAKE2b-64, stable across processes and
platforms.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TextFeatConfig:
    n_buckets: int = 1024
    hash_seed: int = 0
    lowercase: bool = True

    def validate(self) -> None:
        if self.n_buckets < 1:
            raise ConfigError("n_buckets must be positive")


def _bucket(token: str, seed: int, n_buckets: int) -> int:
    key = int(seed).to_bytes(8, "little", signed=True)
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(h, "big") % n_buckets


def featurize_text(text: str, cfg: TextFeatConfig = TextFeatConfig()) -> np.ndarray:
    """Hash whitespace tokens into log(1+tf) buckets and L2-normalize.

    Empty text yields the zero vector; otherwise the result has unit norm.
    """
    cfg.validate()
    vec = np.zeros(cfg.n_buckets, dtype=np.float64)
    tokens = text.split()
    if not tokens:
        return vec
    if cfg.lowercase:
        tokens = [t.lower() for t in tokens]
    for token, tf in Counter(tokens).items():
        vec[_bucket(token, cfg.hash_seed, cfg.n_buckets)] += np.log1p(tf)
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec

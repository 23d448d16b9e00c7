"""Shared helpers: deterministic named RNG substreams and one-hot encoding."""

from __future__ import annotations

import zlib

import numpy as np


def _key_ints(keys) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode("utf-8")))
        elif isinstance(k, (int, np.integer)):
            if int(k) < 0:
                raise ValueError(f"seed keys must be non-negative, got {k}")
            out.append(int(k))
        else:
            raise TypeError(f"seed keys must be int or str, got {type(k).__name__}")
    return out


def substream(*keys) -> np.random.Generator:
    """Independent generator for the named stream; same keys, same stream."""
    return np.random.default_rng(np.random.SeedSequence(_key_ints(keys)))


def derive_seed(*keys) -> int:
    """Collapse named keys into a single reproducible integer seed."""
    return int(np.random.SeedSequence(_key_ints(keys)).generate_state(1, np.uint64)[0])


def one_hot(labels: np.ndarray, class_count: int, dtype=np.float32) -> np.ndarray:
    """Map integer labels (...,) to one-hot (..., class_count)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(
            f"labels must lie in [0, {class_count}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    flat = np.eye(class_count, dtype=dtype)[labels.reshape(-1)]
    return flat.reshape(labels.shape + (class_count,))

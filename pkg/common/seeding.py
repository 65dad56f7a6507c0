"""
Deterministic random stream derivation.

Every random draw in training and evaluation comes from a stream addressed by
(root seed, purpose, *indices). Streams never depend on the order in which they
are requested, so parallel or reordered evaluation reproduces the same numbers.
"""

import zlib
from typing import Tuple, Union

import numpy as np
import torch

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    spawn_key: Tuple[int, ...] = tuple(_key_to_int(k) for k in keys)
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=spawn_key)


def numpy_stream(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def torch_stream(seed: int, *keys: Key) -> torch.Generator:
    # torch generators take a 64 bit seed; fold the sequence state into one
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    generator = torch.Generator()
    generator.manual_seed((int(state[0]) << 32) | int(state[1]))
    return generator

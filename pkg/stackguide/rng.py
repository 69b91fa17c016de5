"""
Reproducible random streams.

Every random draw comes from a ``Philox4x64-10`` counter-based generator whose
128-bit key is derived with numpy's ``SeedSequence`` from the integer tuple
``(global_seed, *keys)``; string keys are first mapped to 32-bit integers with
murmurhash3. Streams therefore depend only on their key path, never on the
order in which samples are generated.
"""
from typing import Union

import numpy as np

from stackguide.utils import seed32

Key = Union[int, str]


def _entropy(seed: int, keys) -> list:
    entropy = [int(seed) & (1 << 64)-1]
    for k in keys:
        entropy.append(seed32(k) if isinstance(k, str) else int(k) & (1 << 64)-1)
    return entropy


def stream(seed: int, *keys: Key) -> np.random.Generator:
    """the generator for ``seed`` and the given key path (e.g. "train", 17)"""
    key = np.random.SeedSequence(_entropy(seed, keys)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substream_seed(seed: int, *keys: Key) -> int:
    """a 63-bit seed identifying a stream, recorded in manifests"""
    return int(np.random.SeedSequence(_entropy(seed, keys)).generate_state(1, np.uint64)[0] >> np.uint64(1))

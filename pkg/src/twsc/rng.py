"""Named random streams.

All randomness in a run is drawn from generators derived here. A stream
is identified by the run seed plus a tuple of string labels; the same
(seed, labels) always yields the same draws, and distinct labels yield
independent streams. Ownership rule: each consumer holds its own stream
object, so the draw sequence of one consumer never depends on how often
another consumer was called.
"""

import hashlib

import numpy as np
import torch


def stream_seed(seed: int, *labels: str) -> int:
    """Derive a 63-bit child seed from a root seed and string labels."""
    tag = f"{seed}/" + "/".join(labels)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def torch_stream(seed: int, *labels: str) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(stream_seed(seed, *labels))
    return gen


def numpy_stream(seed: int, *labels: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, *labels)))

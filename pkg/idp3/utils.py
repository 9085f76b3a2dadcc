
import hashlib
import struct
from typing import Any, TypeAlias, Union

import numpy as np
import numpy.typing as npt


FloatArray: TypeAlias = npt.NDArray[np.float64]
IntArray: TypeAlias = npt.NDArray[np.int64]


def duration(seconds: Union[float, int]) -> str:
    """
    Return 'human' description of number of seconds given. eg.

        >>> duration(300)
        '5 minutes'
        >>> duration(0.25)
        '0.25 seconds'

    Training epochs and sampler runs are often shorter than a second, so
    anything under a minute keeps two decimal places.

    Args:
        seconds (float)

    Returns (str):
        Approximate (in both senses) human expression of time.
    """
    DURATIONS = {
        'day': 60 * 60 * 24,
        'hour': 60 * 60,
        'minute': 60,
    }

    # Validate input
    try:
        seconds = float(seconds)
    except (TypeError, ValueError):
        raise ValueError(f"Number of seconds expected, given: {seconds!r}")

    if seconds < 0:
        raise ValueError(f"Positive number expected, given: {seconds!r}")

    for key, length in DURATIONS.items():
        count = int(seconds // length)
        if count > 1:
            return f"{count:,} {key}s"

    if seconds == 1:
        return '1 second'
    if seconds == int(seconds):
        return f"{int(seconds)} seconds"
    return f"{seconds:.2f} seconds"


def content_hash(text: str, length: int = 12) -> str:
    """
    Short hexadecimal SHA-256 digest used to name run artifacts.
    """
    digest = hashlib.sha256(text.encode('utf-8')).hexdigest()
    return digest[:length]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Independent generator for the stream identified by (seed, *keys).

    Streams for different keys never overlap, so an episode, a step or a
    replan can own its generator without consulting any shared state.
    """
    entropy = [int(seed) & 0xFFFF_FFFF_FFFF_FFFF]
    entropy.extend(int(key) & 0xFFFF_FFFF for key in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: int) -> int:
    """
    Integer seed for the stream identified by (seed, *keys).
    """
    entropy = [int(seed) & 0xFFFF_FFFF_FFFF_FFFF]
    entropy.extend(int(key) & 0xFFFF_FFFF for key in keys)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


class BinaryReader:
    """
    Sequential reader over a byte string, failing loudly on truncation.
    """
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)

    def take(self, length: int) -> bytes:
        if self.offset + length > len(self.data):
            raise ValueError('unexpected end of file')
        chunk = self.data[self.offset:self.offset + length]
        self.offset += length
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> FloatArray:
        """
        Little-endian float64 values, copied into a native array.
        """
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype='<f8').astype(np.float64)

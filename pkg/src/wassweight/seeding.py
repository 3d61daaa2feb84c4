"""Named random streams derived from one root seed."""
import zlib

import numpy as np

STREAMS = ("init", "shuffle", "projections", "synth", "subsample", "folds")


def stream_rng(seed, name, *extra):
    """Return a Generator for stream ``name`` under root ``seed``.

    The stream id is a CRC32 of the name, so adding streams never shifts
    the others. ``extra`` integers further namespace the stream (fold index,
    refresh epoch, ...).
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(seed, name, *extra):
    return int(stream_rng(seed, name, *extra).integers(0, 2**31 - 1))

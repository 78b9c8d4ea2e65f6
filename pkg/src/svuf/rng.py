"""Named random substreams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "corpus", "init", "sampling").

    Changing what one consumer draws never shifts another consumer's numbers,
    so ablations differ only in the component that was ablated.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))

"""Counter-based seed derivation.

Every random stream in the package is addressed by a chain of
``(parent seed, role tag, index)`` triples hashed with BLAKE2b.  The derived
64-bit key feeds a Philox generator, so a stream's contents depend only on
its address and never on the order in which streams are created.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(parent: int, tag: str, index: int = 0) -> int:
    """Return the child seed ``blake2b(parent | tag | index)`` as a 64-bit int."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & _MASK64).to_bytes(8, "little"))
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    h.update(int(index & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def seed_chain(root: int, *path: tuple[str, int]) -> int:
    seed = int(root)
    for tag, index in path:
        seed = derive_seed(seed, tag, index)
    return seed


def generator(seed: int) -> np.random.Generator:
    """Philox generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


_SCRATCH = threading.local()


def scratch_generator(seed: int) -> np.random.Generator:
    """Same stream as :func:`generator` on a reused per-thread Philox.

    Rekeying skips bit-generator construction, which dominates the cost of
    short per-particle streams.  The returned object is invalidated by the
    next call on the same thread, so it must be consumed immediately.
    """
    slot = getattr(_SCRATCH, "slot", None)
    if slot is None:
        bg = np.random.Philox(key=0)
        slot = _SCRATCH.slot = (bg, np.random.Generator(bg), bg.state)
    bg, gen, state = slot
    state["state"]["counter"] = np.zeros(4, dtype=np.uint64)
    state["state"]["key"] = np.array([int(seed) & _MASK64, 0], dtype=np.uint64)
    state["buffer_pos"] = 4
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bg.state = state
    return gen

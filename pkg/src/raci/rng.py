"""Splittable random streams.

Every stream is a Philox4x64 generator seeded with ``SeedSequence`` whose
entropy is the run seed followed by a 128-bit BLAKE2b digest of the stream
purpose and its keys. Streams for different (purpose, site, year, ...) tuples
are therefore independent and reproducible regardless of evaluation order.
"""

from __future__ import annotations

import hashlib

import numpy as np

RNG_DECLARATION = {
    "bit_generator": "Philox4x64-10 (numpy.random.Philox)",
    "seeding": "SeedSequence([seed mod 2**64, *blake2b128('|'.join([purpose, *keys])) as 4 uint32 words])",
}


def _digest_words(parts) -> list:
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, purpose: str, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *keys)``."""
    entropy = [int(seed) % (1 << 64)] + _digest_words((purpose,) + keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

"""Named seed derivation.

All randomness in the package flows from one master seed. Independent
streams (synthesis, augmentation, splits, init, ...) get their own child
seeds derived from the master seed plus a tag path, so adding or removing
one consumer never perturbs the others.
"""

import hashlib


def derive_seed(master: int, *tags) -> int:
    """Derive a child seed from a master seed and a sequence of tags.

    Tags may be strings or integers. The derivation is a stable hash, so
    the same (master, tags) always maps to the same 63-bit seed on every
    platform and run.
    """
    text = ":".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF

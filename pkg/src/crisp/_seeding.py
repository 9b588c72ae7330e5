"""Named random streams derived from one root seed."""

import hashlib

import numpy as np
import torch


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def derive_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name))


def derive_generator(root: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, name))
    return g

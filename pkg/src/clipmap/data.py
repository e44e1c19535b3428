"""Procedural aligned image-text pairs.

Each pair has a latent vector of ``n_attributes`` categorical values.  The
caption spells every attribute as one token; the image paints attribute k's
value as a flat intensity over its own contiguous block of patches, plus
Gaussian pixel noise.

Token ids: 0 = pad, 1 = BOS, 2 = EOS, 3 = wildcard, and attribute k with
value v is ``4 + k * n_values + v``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, InputError
from .model import BOS_ID, EOS_ID, PAD_ID, WILDCARD_ID
from .rng import substream

FIRST_VALUE_TOKEN = 4
SPLITS = {"train": 0, "val": 1}


@dataclass(frozen=True)
class SyntheticSpec:
    n_attributes: int = 6
    n_values: int = 4
    grid: int = 4
    patch: int = 2
    channels: int = 3
    noise: float = 0.1
    seed: int = 0
    n_train: int = 16384
    n_val: int = 256
    seq_len: int = 16
    vocab_size: int = 64

    def __post_init__(self):
        if self.n_values < 2:
            raise ContractError("n_values must be >= 2")
        if FIRST_VALUE_TOKEN + self.n_attributes * self.n_values > self.vocab_size:
            raise ContractError("attribute-value tokens exceed the vocabulary budget")
        if self.n_attributes + 2 > self.seq_len:
            raise ContractError("caption (BOS, attributes, EOS) does not fit in seq_len")
        if self.n_attributes > self.grid * self.grid:
            raise ContractError("more attributes than patches")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val}[split]


@dataclass(frozen=True)
class Pair:
    image: np.ndarray   # [g, g, p*p*c]
    tokens: np.ndarray  # [seq_len] int64
    latent: np.ndarray  # [K] int64


@dataclass
class SplitData:
    images: np.ndarray   # [N, g, g, p*p*c]
    tokens: np.ndarray   # [N, seq_len]
    latents: np.ndarray  # [N, K]

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.tokens[idx]


def region_of_patch(spec: SyntheticSpec) -> np.ndarray:
    """Attribute index owning each patch (row-major), in contiguous runs."""
    n = spec.grid * spec.grid
    return (np.arange(n) * spec.n_attributes) // n


def value_intensity(spec: SyntheticSpec, v) -> np.ndarray:
    return -1.0 + 2.0 * np.asarray(v) / (spec.n_values - 1)


def encode_caption(spec: SyntheticSpec, latent) -> np.ndarray:
    tokens = np.full(spec.seq_len, PAD_ID, dtype=np.int64)
    tokens[0] = BOS_ID
    k = np.arange(spec.n_attributes)
    tokens[1:1 + spec.n_attributes] = FIRST_VALUE_TOKEN + k * spec.n_values + np.asarray(latent)
    tokens[1 + spec.n_attributes] = EOS_ID
    return tokens


def render_image(spec: SyntheticSpec, latent, noise: np.ndarray | None = None) -> np.ndarray:
    levels = value_intensity(spec, np.asarray(latent))[region_of_patch(spec)]
    img = np.repeat(levels[:, None], spec.patch_dim, axis=1)
    if noise is not None:
        img = img + noise
    return img.reshape(spec.grid, spec.grid, spec.patch_dim)


def generate_pair(spec: SyntheticSpec, index: int, split: str = "train") -> Pair:
    """Deterministic pair ``index`` of ``split``; each (split, index) has its own seed stream."""
    if not 0 <= index < spec.split_size(split):
        raise InputError(f"index {index} outside the {split} split of size {spec.split_size(split)}")
    rng = substream(spec.seed, "data", SPLITS[split], index)
    latent = rng.integers(0, spec.n_values, spec.n_attributes)
    noise = rng.normal(0.0, 1.0, (spec.grid * spec.grid, spec.patch_dim)) * spec.noise
    return Pair(render_image(spec, latent, noise), encode_caption(spec, latent), latent.astype(np.int64))


def make_split(spec: SyntheticSpec, split: str) -> SplitData:
    pairs = [generate_pair(spec, i, split) for i in range(spec.split_size(split))]
    return SplitData(
        images=np.stack([p.image for p in pairs]),
        tokens=np.stack([p.tokens for p in pairs]),
        latents=np.stack([p.latent for p in pairs]),
    )


def prompt_for_class(spec: SyntheticSpec, k: int, v: int) -> np.ndarray:
    """Caption with attribute ``k`` fixed to ``v`` and every other slot set to the wildcard."""
    if not (0 <= k < spec.n_attributes and 0 <= v < spec.n_values):
        raise InputError(f"class (attribute={k}, value={v}) out of range")
    tokens = encode_caption(spec, np.zeros(spec.n_attributes, dtype=np.int64))
    tokens[1:1 + spec.n_attributes] = WILDCARD_ID
    tokens[1 + k] = FIRST_VALUE_TOKEN + k * spec.n_values + v
    return tokens


def parse_prompt(spec: SyntheticSpec, tokens) -> tuple[int, int]:
    """Inverse of :func:`prompt_for_class`."""
    slots = np.asarray(tokens)[1:1 + spec.n_attributes]
    fixed = np.flatnonzero(slots != WILDCARD_ID)
    if len(fixed) != 1:
        raise InputError("not a single-attribute prompt")
    k = int(fixed[0])
    return k, int(slots[k] - FIRST_VALUE_TOKEN - k * spec.n_values)


def batch_iter(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches for one epoch: seeded permutation, trailing partial batch dropped."""
    if batch_size > n or batch_size < 1:
        raise ContractError(f"batch size {batch_size} must lie in [1, {n}]")
    perm = substream(seed, "shuffle", epoch).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def batch_stream(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless sequence of batches, epoch after epoch."""
    epoch = 0
    while True:
        yield from batch_iter(n, batch_size, seed, epoch)
        epoch += 1

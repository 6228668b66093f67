"""Deterministic image <-> token-grid codec.

A fixed palette of V patch prototypes stands in for a learned codec: encoding
maps each PxP patch to its nearest prototype under squared Euclidean distance
(ties to the lowest index), decoding pastes prototype patches back. Both
directions are pure functions, so every downstream component sees a stable,
reproducible token space.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import substream


@dataclass(frozen=True)
class Palette:
    """V patch prototypes of length P*P*C with values in [0, 1]."""

    prototypes: np.ndarray  # (V, P*P*C) float64
    patch_size: int
    channels: int

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        object.__setattr__(self, "prototypes", protos)
        if protos.ndim != 2 or protos.shape[0] < 2:
            raise ValueError("palette needs at least 2 prototypes")
        if protos.shape[1] != self.patch_size * self.patch_size * self.channels:
            raise ValueError("prototype length does not match patch geometry")
        if not np.isfinite(protos).all() or protos.min() < 0.0 or protos.max() > 1.0:
            raise ValueError("prototype entries must lie in [0, 1]")
        if len(np.unique(protos, axis=0)) != protos.shape[0]:
            raise ValueError("prototypes must be pairwise distinct")

    @property
    def vocab_size(self) -> int:
        return int(self.prototypes.shape[0])


@dataclass(frozen=True)
class TokenGrid:
    """H x W grid of codebook indices, row-major."""

    tokens: np.ndarray  # (H, W) int32

    def __post_init__(self):
        toks = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.int32))
        toks.setflags(write=False)
        object.__setattr__(self, "tokens", toks)
        if toks.ndim != 2 or toks.size == 0:
            raise ValueError("token grid must be a non-empty 2D array")
        if toks.min() < 0:
            raise ValueError("negative token index")

    @property
    def height(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def width(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.size)

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenGrid) and np.array_equal(self.tokens, other.tokens)


def build_palette(patches: np.ndarray, vocab_size: int, iters: int = 20, seed: int = 0,
                  patch_size: int = 4, channels: int = 3) -> Palette:
    """Lloyd's k-means over patch vectors, fully pinned down.

    Rules (the reference oracle in the tests follows the same ones):
      * init: walk a seeded permutation of the patches, taking the first V
        pairwise-distinct patch values as centroids;
      * assignment: nearest centroid by squared distance, ties to the lowest
        centroid index;
      * update: cluster mean; a cluster left empty is re-seeded, in ascending
        cluster order, from the not-yet-taken patch farthest from its assigned
        centroid (ties to the lowest patch index).

    Runs exactly ``iters`` assign/update rounds. Raises if fewer than V
    distinct patches exist.
    """
    pts = np.asarray(patches, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("patches must be a 2D array of flattened patch vectors")
    if pts.min() < 0.0 or pts.max() > 1.0:
        raise ValueError("patch entries must lie in [0, 1]")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if len(np.unique(pts, axis=0)) < vocab_size:
        raise ValueError("insufficient distinct patches")

    order = substream(seed, 0x504C).permutation(len(pts))  # path tag "PL"
    centroids = np.empty((vocab_size, pts.shape[1]))
    taken = 0
    for idx in order:
        cand = pts[idx]
        if taken and any(np.array_equal(cand, centroids[j]) for j in range(taken)):
            continue
        centroids[taken] = cand
        taken += 1
        if taken == vocab_size:
            break

    for _ in range(iters):
        assign = _nearest(pts, centroids)
        dists = np.sum((pts - centroids[assign]) ** 2, axis=1)
        new_centroids = np.empty_like(centroids)
        for j in range(vocab_size):
            members = assign == j
            if members.any():
                new_centroids[j] = pts[members].mean(axis=0)
        reseeded: list[int] = []
        for j in range(vocab_size):
            if (assign == j).any():
                continue
            d = dists.copy()
            d[reseeded] = -np.inf
            far = int(np.argmax(d))  # argmax ties -> lowest index
            new_centroids[j] = pts[far]
            reseeded.append(far)
        centroids = new_centroids

    return Palette(prototypes=centroids, patch_size=patch_size, channels=channels)


def _nearest(vectors: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    # Plain squared-difference sums; the oracle computes distances the same
    # way so near-tie argmins agree bit-for-bit.
    d = np.sum((vectors[:, None, :] - prototypes[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1).astype(np.int32)


def encode(image: np.ndarray, palette: Palette) -> TokenGrid:
    """Quantize an (H_px, W_px, C) image in [0, 1] to its token grid."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    p = palette.patch_size
    h_px, w_px, c = img.shape
    if c != palette.channels:
        raise ValueError(f"expected {palette.channels} channels, got {c}")
    if h_px % p or w_px % p:
        raise ValueError(f"image dims {h_px}x{w_px} not divisible by patch size {p}")
    h, w = h_px // p, w_px // p
    patches = img.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * c)
    return TokenGrid(_nearest(patches, palette.prototypes).reshape(h, w))


def decode(grid: TokenGrid, palette: Palette) -> np.ndarray:
    """Expand a token grid back to an (H*P, W*P, C) image."""
    toks = grid.tokens
    if toks.max() >= palette.vocab_size:
        raise ValueError("token out of vocabulary")
    p, c = palette.patch_size, palette.channels
    h, w = grid.height, grid.width
    patches = palette.prototypes[toks.reshape(-1)].reshape(h, w, p, p, c)
    return np.ascontiguousarray(patches.transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, c))


# --- canonical toy palette -------------------------------------------------
#
# The synthetic training task and the CLI demos share one deterministic
# palette: 8 flat "named" colors plus seeded texture patches, clustered once.

NAMED_COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.15),
    "blue": (0.15, 0.2, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "cyan": (0.1, 0.85, 0.85),
    "magenta": (0.85, 0.1, 0.8),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.5, 0.5, 0.5),
}

TOY_PATCH = 4
TOY_CHANNELS = 3
TOY_VOCAB = 64
_TOY_SEED = 77


@lru_cache(maxsize=1)
def toy_palette() -> Palette:
    """The default 64-entry palette used by training and the CLI.

    Entries 0..7 are the flat named colors in declaration order, so their
    token ids are stable; the rest are texture centroids clustered from
    seeded noise.
    """
    p, c = TOY_PATCH, TOY_CHANNELS
    dim = p * p * c
    flats = np.stack([np.tile(np.asarray(rgb), p * p) for rgb in NAMED_COLORS.values()])
    g = substream(_TOY_SEED, 0x5459)  # path tag "TY"
    noise = g.random((TOY_VOCAB * 4, dim))
    textures = build_palette(noise, TOY_VOCAB - len(NAMED_COLORS), iters=25,
                             seed=_TOY_SEED, patch_size=p, channels=c)
    protos = np.concatenate([flats, textures.prototypes], axis=0)
    return Palette(prototypes=protos, patch_size=p, channels=c)


def toy_color_ids() -> dict[str, int]:
    """Token index of each named color under the toy palette."""
    return {name: i for i, name in enumerate(NAMED_COLORS)}

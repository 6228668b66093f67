"""Edit localization and region-hold reversion.

A localization map scores each image token's relevance to the instruction by
averaging text->iterate attention over chosen layers and text rows, optional
smoothing, and min-max normalization. During sampling, positions scoring
below a threshold are flipped back to the original image's tokens after each
decode step, which confines the edit to where the model is actually looking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .consolidation import SmoothSpec, apply_smoothing, stack_layers
from .model import AttentionRecord


@dataclass(frozen=True)
class RegionHoldSpec:
    """Region-hold configuration.

    ``lam`` is the revert threshold on normalized scores; ``layers`` and
    ``rows`` select which attention records and text rows feed the map;
    ``every`` sets the application cadence in decode steps.
    """

    lam: float
    layers: tuple[int, ...]
    rows: tuple[int, ...]
    smooth: SmoothSpec | None = None
    every: int = 1

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        object.__setattr__(self, "rows", tuple(sorted(set(int(m) for m in self.rows))))
        if not self.layers or not self.rows:
            raise ValueError("layer and row sets must be non-empty")
        if self.every < 1:
            raise ValueError("cadence must be >= 1")


def default_layers(n_layers: int) -> tuple[int, ...]:
    """Default consolidation range: the last third of the stack."""
    k = max(1, round(n_layers / 3))
    return tuple(range(n_layers - k, n_layers))


def resolve_threshold(lam: float) -> float:
    """Effective strict-inequality threshold for a user-facing lambda.

    Scores are normalized so the peak is exactly 1.0; a user asking for
    lambda = 1 means "revert everything", so the boundary is nudged past 1
    to catch the peak under the strict comparison.
    """
    if lam >= 1.0:
        return math.nextafter(1.0, 2.0)
    return float(lam)


def localization_map(records: list[AttentionRecord], spec: RegionHoldSpec,
                     grid_shape: tuple[int, int]) -> np.ndarray:
    """Per-position relevance scores in [0, 1], flattened row-major.

    Degenerate maps (max equals min) normalize to all ones, which keeps
    every position editable rather than freezing the image.
    """
    amap = stack_layers(records, spec.layers, spec.rows, grid_shape)
    if spec.smooth is not None:
        amap = apply_smoothing(amap, spec.smooth)
    lo, hi = float(amap.min()), float(amap.max())
    if hi > lo:
        amap = (amap - lo) / (hi - lo)
    else:
        amap = np.ones_like(amap)
    return amap.reshape(-1)


def apply_region_hold(state, scores: np.ndarray, lam: float,
                      original: np.ndarray):
    """Revert positions scoring strictly below lam to original tokens.

    Reverted positions are marked committed so the scheduler's surviving
    mask count stays consistent; everything else is untouched. Pure: the
    input state is not modified.
    """
    scores = np.asarray(scores, dtype=np.float64)
    original = np.asarray(original)
    if scores.shape != state.tokens.shape or original.shape != state.tokens.shape:
        raise ValueError("score/original shape does not match sampler state")
    rev = scores < lam
    tokens = state.tokens.copy()
    committed = state.committed.copy()
    tokens[rev] = original[rev]
    committed[rev] = True
    return replace(state, tokens=tokens, committed=committed)


def replay_with_threshold(step_traces, original: np.ndarray, lam: float) -> np.ndarray:
    """Re-run a recorded mask-free trajectory under a different threshold.

    Commit events and per-step score maps come from one reference run;
    replaying them keeps the maps fixed across thresholds, so revert sets
    are nested in lam and the distance to the original is monotone. A
    position reverted once stays committed and skips later commits.
    """
    original = np.asarray(original)
    tokens = original.copy()
    committed = np.zeros(original.shape[0], dtype=bool)
    for st in step_traces:
        for p, tok in st.commits:
            if not committed[p]:
                tokens[p] = tok
                committed[p] = True
        if st.scores is not None:
            rev = st.scores < lam
            tokens[rev] = original[rev]
            committed[rev] = True
    return tokens

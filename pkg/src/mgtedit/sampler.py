"""Iterative parallel decoding with confidence-ranked token commitment.

Editing starts from a fully (or partially) masked grid and runs a fixed
number of parallel refinement steps. Each step predicts every masked
position, samples a candidate token per position, and commits the most
confident candidates so the surviving mask count follows a cosine schedule;
the rest stay masked for the next round. Confidence is the perturbed key
log(eps)/p, whose argmax reproduces proportional sampling. All randomness
comes from per-(step, position) counter streams, so trajectories are
reproducible and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BiasSpec, EditModel, TokenStreams
from .region_hold import (
    RegionHoldSpec,
    apply_region_hold,
    localization_map,
    resolve_threshold,
)
from .rng import step_uniforms
from .tokenizer import TokenGrid


def mask_fraction(t: float) -> float:
    """Fraction of tokens still masked at normalized time t: cos(pi*t/2).

    Endpoints are exact so the final step always reaches zero masks.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t <= 0.0:
        return 1.0
    if t >= 1.0:
        return 0.0
    return math.cos(math.pi * t / 2.0)


def perturbed_confidence(prob: float, eps: float) -> float:
    """Commitment key log(eps)/prob; larger keys commit first.

    A zero-probability candidate gets -inf and is never selected ahead of
    any live candidate.
    """
    if prob < 0.0:
        raise ValueError("prob must be non-negative")
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1)")
    if prob == 0.0:
        return -math.inf
    return math.log(eps) / prob


@dataclass(frozen=True)
class MaskSchedule:
    """Cosine mask schedule over a fixed number of decode steps."""

    total_steps: int = 16

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def fraction(self, step: int) -> float:
        return mask_fraction(step / self.total_steps)


@dataclass(frozen=True)
class SamplerState:
    """Decoding state: flat token array with mask sentinels plus bookkeeping.

    ``committed[p]`` is false exactly when ``tokens[p]`` is the mask
    sentinel, except where region-hold has reverted a position (then the
    token is the original and committed is true). ``editable`` marks the
    user-editable positions; the rest never change.
    """

    tokens: np.ndarray
    committed: np.ndarray
    step: int
    editable: np.ndarray
    seed: int

    def masked(self) -> np.ndarray:
        return ~self.committed


@dataclass
class StepTrace:
    """One decode step's commit events and optional localization scores."""

    commits: list[tuple[int, int]] = field(default_factory=list)
    scores: np.ndarray | None = None


@dataclass
class EditTrace:
    steps: list[StepTrace] = field(default_factory=list)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def decode_step(model: EditModel, state: SamplerState, schedule: MaskSchedule,
                bias: BiasSpec, text_ids, condition: np.ndarray,
                capture_layers=None):
    """Advance the sampler by one parallel refinement step.

    Returns the new state plus any captured attention records. The number
    of surviving masked positions after the step follows the schedule,
    recomputed from the state so earlier region-hold commits stay counted.
    """
    if state.step >= schedule.total_steps:
        raise ValueError("decode_step called after the final step")
    cfg = model.config
    n = cfg.n_tokens
    t_now = state.step / schedule.total_steps
    streams = TokenStreams(text=text_ids, iterate=state.tokens, condition=condition)
    logits, records = model(streams, bias, t=t_now, capture_layers=capture_layers)
    probs = _softmax_rows(logits.detach().numpy().astype(np.float64))

    draws = step_uniforms(state.seed, state.step, n)
    candidates = _sample_categorical(probs, draws[:, 0])
    cand_probs = probs[np.arange(n), candidates]
    with np.errstate(divide="ignore"):
        keys = np.where(cand_probs > 0.0, np.log(draws[:, 1]) / np.maximum(cand_probs, 1e-300), -np.inf)

    masked = state.tokens == cfg.mask_id
    n_editable = int(state.editable.sum())
    n_next = math.ceil(n_editable * schedule.fraction(state.step + 1))
    n_commit = max(0, int(masked.sum()) - n_next)

    masked_pos = np.flatnonzero(masked)
    order = np.argsort(-keys[masked_pos], kind="stable")  # ties: lowest index
    commit_pos = masked_pos[order[:n_commit]]

    tokens = state.tokens.copy()
    committed = state.committed.copy()
    tokens[commit_pos] = candidates[commit_pos]
    committed[commit_pos] = True
    new_state = SamplerState(tokens=tokens, committed=committed,
                             step=state.step + 1, editable=state.editable,
                             seed=state.seed)
    return new_state, records


def _initial_state(model: EditModel, original: TokenGrid, user_mask, seed: int) -> SamplerState:
    cfg = model.config
    n = cfg.n_tokens
    if (original.height, original.width) != (cfg.grid_h, cfg.grid_w):
        raise ValueError("original grid does not match the model's grid shape")
    orig = original.flat().astype(np.int64)
    if user_mask is None:
        editable = np.ones(n, dtype=bool)
    else:
        editable = np.asarray(user_mask).reshape(-1).astype(bool)
        if editable.size != n:
            raise ValueError("user mask size does not match the token grid")
    tokens = np.where(editable, cfg.mask_id, orig)
    return SamplerState(tokens=tokens, committed=~editable, step=0,
                        editable=editable, seed=int(seed))


def edit_traced(model: EditModel, original: TokenGrid, text_ids, gamma: float = 1.0,
                steps: int = 16, seed: int = 0, user_mask=None,
                hold: RegionHoldSpec | None = None, capture_layers=None):
    """Full edit run returning the output grid and a per-step trace."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.config
    orig_flat = original.flat().astype(np.int64)
    state = _initial_state(model, original, user_mask, seed)
    schedule = MaskSchedule(steps)
    bias = BiasSpec(gamma)
    capture = set() if capture_layers is None else set(capture_layers)
    if hold is not None:
        capture |= set(hold.layers)
    trace = EditTrace()
    pooled = []
    for i in range(steps):
        before = state.tokens
        state, records = decode_step(model, state, schedule, bias, text_ids,
                                     orig_flat, capture_layers=capture or None)
        newly = np.flatnonzero((before == cfg.mask_id) & (state.tokens != cfg.mask_id))
        st = StepTrace(commits=[(int(p), int(state.tokens[p])) for p in newly])
        if hold is not None:
            # Records accumulate between applications so a sparse cadence
            # scores tokens from every step since the last hold, not just
            # the latest forward pass.
            pooled.extend(records)
            if (i + 1) % hold.every == 0:
                st.scores = localization_map(pooled, hold, (cfg.grid_h, cfg.grid_w))
                state = apply_region_hold(state, st.scores,
                                          resolve_threshold(hold.lam), orig_flat)
                pooled = []
        trace.steps.append(st)
    assert not (state.tokens == cfg.mask_id).any()
    grid = TokenGrid(state.tokens.reshape(cfg.grid_h, cfg.grid_w).astype(np.int32))
    return grid, trace


def edit(model: EditModel, original: TokenGrid, text_ids, gamma: float = 1.0,
         steps: int = 16, seed: int = 0, user_mask=None,
         hold: RegionHoldSpec | None = None) -> TokenGrid:
    """Edit an image's token grid under a text instruction."""
    grid, _ = edit_traced(model, original, text_ids, gamma=gamma, steps=steps,
                          seed=seed, user_mask=user_mask, hold=hold)
    return grid

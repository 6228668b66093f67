"""Toy training loop for the editing objective.

Each step draws a masking rate from the truncated-arccos law, masks that
fraction of the target grid, and trains the model to reconstruct the masked
tokens from the instruction, the visible target tokens, and the source image
riding along as the condition stream. Updates are plain first-order descent;
all randomness is counter-addressed, so a (seed, data, config) triple always
produces the same weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import BiasSpec, EditModel, TokenStreams
from .region_hold import RegionHoldSpec, default_layers
from .rng import substream
from .sampler import edit
from .tokenizer import TokenGrid, toy_color_ids
from .textvocab import QUADRANTS, encode_text


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 2
    lr: float = 0.05
    seed: int = 0
    gamma_train: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not (self.lr > 0):
            raise ValueError("lr must be positive")
        if not (self.gamma_train >= 0):
            raise ValueError("gamma_train must be non-negative")


@dataclass(frozen=True)
class EditSample:
    """An {instruction, source, edited target} training triplet."""

    source: TokenGrid
    target: TokenGrid
    instruction: tuple[int, ...]

    def __post_init__(self):
        if self.source.tokens.shape != self.target.tokens.shape:
            raise ValueError("source and target must share grid dims")
        object.__setattr__(self, "instruction", tuple(int(t) for t in self.instruction))
        if not self.instruction:
            raise ValueError("instruction must be non-empty")

    def edit_region(self) -> np.ndarray:
        """Boolean mask of positions the edit is supposed to change."""
        return (self.source.tokens != self.target.tokens).reshape(-1)


def sample_mask_rate(u: float) -> float:
    """Inverse-CDF draw of a masking rate: r = sin(pi*u/2).

    The density (2/pi)/sqrt(1-r^2) concentrates rates near 1, biasing
    training toward heavily masked grids.
    """
    if not (0.0 <= u <= 1.0):
        raise ValueError("u must lie in [0, 1]")
    return math.sin(math.pi * u / 2.0)


def masked_ce_loss(logits: torch.Tensor, targets, mask) -> torch.Tensor:
    """Mean negative log-likelihood of targets over masked positions only."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("no masked tokens")
    targets = torch.as_tensor(np.asarray(targets).reshape(-1)[mask], dtype=torch.long)
    logp = torch.log_softmax(logits[torch.from_numpy(mask)], dim=-1)
    return -logp.gather(1, targets[:, None]).mean()


def _sample_loss(model: EditModel, sample: EditSample, config: TrainConfig,
                 step: int, k: int) -> torch.Tensor:
    cfg = model.config
    n = cfg.n_tokens
    u = float(substream(config.seed, 0x5241, step, k).random())  # path tag "RA"
    r = sample_mask_rate(u)
    n_mask = max(1, math.ceil(r * n))
    pos = substream(config.seed, 0x4D4B, step, k).permutation(n)[:n_mask]  # "MK"
    mask = np.zeros(n, dtype=bool)
    mask[pos] = True

    target_flat = sample.target.flat().astype(np.int64)
    iterate = np.where(mask, cfg.mask_id, target_flat)
    streams = TokenStreams(text=list(sample.instruction), iterate=iterate,
                           condition=sample.source.flat().astype(np.int64))
    t = (2.0 / math.pi) * math.acos(r)  # schedule time whose mask level is r
    logits, _ = model(streams, BiasSpec(config.gamma_train), t=t)
    return masked_ce_loss(logits, target_flat, mask)


def train_step(model: EditModel, batch: list[EditSample], config: TrainConfig,
               step: int = 0) -> tuple[EditModel, float]:
    """One batch forward/backward plus a plain descent update."""
    losses = [_sample_loss(model, s, config, step, k) for k, s in enumerate(batch)]
    loss = torch.stack(losses).mean()
    model.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= config.lr * p.grad
    model.zero_grad(set_to_none=True)
    return model, float(loss.detach())


def train(model: EditModel, samples: list[EditSample], config: TrainConfig,
          log=None) -> EditModel:
    """Run the full loop; emits "step=<i> loss=<f>" lines through ``log``."""
    if not samples:
        raise ValueError("empty training set")
    for step in range(config.steps):
        picks = substream(config.seed, 0x4241, step).integers(0, len(samples),
                                                              config.batch)  # "BA"
        batch = [samples[int(i)] for i in picks]
        model, loss = train_step(model, batch, config, step=step)
        if log is not None:
            log(f"step={step} loss={loss:.6f}")
    return model


# --- synthetic task --------------------------------------------------------
#
# Single colored rectangle on a flat background. Three edit kinds:
#   recolor block to <color>
#   remove block
#   add <color> block at <quadrant>
# Grids hold palette token ids, so samples decode to real images.

BACKGROUNDS = ("gray", "white")


def _block_span(g, grid: int, lo: int, hi: int, start: int = 0, stop: int | None = None):
    size = int(g.integers(lo, hi + 1))
    stop = grid if stop is None else stop
    top = int(g.integers(start, stop - size + 1))
    return top, size


def make_synthetic_task(seed: int, count: int, grid_h: int = 16,
                        grid_w: int = 16) -> list[EditSample]:
    """Deterministic list of edit triplets over the toy palette."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if grid_h < 4 or grid_w < 4:
        raise ValueError("grid dims must be >= 4")
    ids = toy_color_ids()
    block_colors = [c for c in ids if c not in BACKGROUNDS]
    # Span bounds keep every edit region at or below a quarter of the grid.
    g_min = min(grid_h, grid_w)
    lo = max(2, g_min // 5)
    hi = max(lo, min(g_min // 4 + 2, g_min // 2))
    g = substream(seed, 0x5443)  # path tag "TC"
    samples = []
    for _ in range(count):
        # Weighted mix: the kinds that must contradict the condition stream
        # (recolor, add) need more training exposure than plain removal.
        u = g.random()
        kind = 0 if u < 0.45 else (1 if u < 0.65 else 2)
        bg = ids[BACKGROUNDS[int(g.integers(0, len(BACKGROUNDS)))]]
        source = np.full((grid_h, grid_w), bg, dtype=np.int32)
        if kind in (0, 1):  # recolor / remove need an existing block
            color_name = block_colors[int(g.integers(0, len(block_colors)))]
            top, h = _block_span(g, grid_h, lo, hi)
            left, w = _block_span(g, grid_w, lo, hi)
            source[top:top + h, left:left + w] = ids[color_name]
            target = source.copy()
            if kind == 0:
                others = [c for c in block_colors if c != color_name]
                new_name = others[int(g.integers(0, len(others)))]
                target[top:top + h, left:left + w] = ids[new_name]
                text = f"recolor block to {new_name}"
            else:
                target[top:top + h, left:left + w] = bg
                text = "remove block"
        else:  # add a block filling a named quadrant
            # Placement is a pure function of the instruction, so the target
            # stays inferable from (source, text) alone under a full mask.
            color_name = block_colors[int(g.integers(0, len(block_colors)))]
            q = int(g.integers(0, 4))
            half_h, half_w = grid_h // 2, grid_w // 2
            top = 0 if q < 2 else half_h
            left = 0 if q % 2 == 0 else half_w
            target = source.copy()
            target[top:top + half_h, left:left + half_w] = ids[color_name]
            text = f"add {color_name} block at {QUADRANTS[q]}"
        samples.append(EditSample(source=TokenGrid(source), target=TokenGrid(target),
                                  instruction=encode_text(text)))
    return samples


def default_hold(model_config, instruction, lam: float = 0.3,
                 smooth=None, every: int = 1) -> RegionHoldSpec:
    """Region-hold spec reading all instruction rows over the last layers."""
    return RegionHoldSpec(lam=lam, layers=default_layers(model_config.n_layers),
                          rows=tuple(range(len(instruction))), smooth=smooth,
                          every=every)


def evaluate_edits(model: EditModel, samples: list[EditSample], lam: float = 0.3,
                   gamma: float = 1.0, steps: int = 16, seed: int = 0,
                   smooth=None, every: int = 1, edit_tol: float = 0.95) -> float:
    """Fraction of samples edited correctly under a full mask-free run.

    A sample passes when the output matches the target on at least
    ``edit_tol`` of the edit-region tokens and on every token outside it.
    """
    if not samples:
        raise ValueError("empty evaluation set")
    passed = 0
    for idx, s in enumerate(samples):
        hold = default_hold(model.config, s.instruction, lam=lam, smooth=smooth,
                            every=every)
        out = edit(model, s.source, list(s.instruction), gamma=gamma,
                   steps=steps, seed=seed + idx, hold=hold)
        region = s.edit_region()
        tgt = s.target.flat()
        got = out.flat()
        outside_ok = np.array_equal(got[~region], tgt[~region])
        inside_ok = region.sum() == 0 or \
            (got[region] == tgt[region]).mean() >= edit_tol
        if outside_ok and inside_ok:
            passed += 1
    return passed / len(samples)

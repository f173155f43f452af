"""Availability masking and the synthesis / classification objectives.

Image stacks are laid out as ``(N, I, H, W)``: one channel slot per MRI
sequence. ``a`` is the availability mask over the ``I`` slots (1 = source,
0 = target).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 100.0
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0

    def __post_init__(self) -> None:
        w = (self.lambda_pix, self.lambda_rec, self.lambda_adv)
        if any(v < 0 for v in w):
            raise ValueError(f"loss weights must be nonnegative, got {w}")
        if not any(w):
            raise ValueError("at least one loss weight must be nonzero")


def availability_mask(sequences: Sequence[str], sources: Sequence[str]) -> Tensor:
    """0/1 vector over ``sequences`` with 1 at every source slot."""
    unknown = set(sources) - set(sequences)
    if unknown:
        raise ValueError(f"sources {sorted(unknown)} are not among sequences {list(sequences)}")
    a = torch.tensor([1.0 if s in sources else 0.0 for s in sequences])
    if a.sum() == 0 or a.sum() == len(a):
        raise ValueError("mask needs at least one source and one target")
    return a


def _as_mask(a, like: Tensor) -> Tensor:
    a = torch.as_tensor(a, dtype=like.dtype, device=like.device)
    if a.dim() != 1:
        raise ValueError(f"mask must be a vector, got shape {tuple(a.shape)}")
    if like.dim() < 2 or like.shape[1] != a.numel():
        raise ValueError(f"mask length {a.numel()} does not match {like.shape[1]} sequence slots")
    return a.reshape(1, -1, *([1] * (like.dim() - 2)))


def masked_input(m: Tensor, a) -> Tensor:
    """Generator input: slot i keeps m_i where a_i = 1 and is zeroed where a_i = 0."""
    return m * _as_mask(a, m)


def _slot_l1(pred: Tensor, m: Tensor) -> Tensor:
    if pred.shape != m.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(m.shape)}")
    # E over batch and pixels, per slot
    return (pred - m).abs().transpose(0, 1).reshape(m.shape[1], -1).mean(dim=1)


def l_pix(pred: Tensor, m: Tensor, a) -> Tensor:
    """Sum over target slots of the mean absolute error."""
    w = 1 - _as_mask(a, m).flatten()
    return (w * _slot_l1(pred, m)).sum()


def l_rec(pred: Tensor, m: Tensor, a) -> Tensor:
    """Sum over source slots of the mean absolute error."""
    w = _as_mask(a, m).flatten()
    return (w * _slot_l1(pred, m)).sum()


def l_adv_d(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Least-squares discriminator loss: E[(D(real) - 1)^2] + E[D(fake)^2]."""
    if d_real.shape != d_fake.shape:
        raise ValueError(f"score maps differ: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    return ((d_real - 1) ** 2).mean() + (d_fake**2).mean()


def l_adv_g(d_fake: Tensor) -> Tensor:
    """Least-squares generator loss: E[(D(fake) - 1)^2]."""
    return ((d_fake - 1) ** 2).mean()


def l_adv_printed(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Difference-of-squares form E[D(real)^2] - E[(D(fake) - 1)^2].

    Kept for reference only; it is unbounded below for both players and is
    not used in training.
    """
    return (d_real**2).mean() - ((d_fake - 1) ** 2).mean()


def total_generator_loss(pix, rec, adv, w: LossWeights) -> Tensor:
    parts = {"l_pix": pix, "l_rec": rec, "l_adv_G": adv}
    for name, v in parts.items():
        if not math.isfinite(float(v.detach()) if torch.is_tensor(v) else float(v)):
            raise FloatingPointError(f"non-finite loss component {name}={float(v)}")
    return w.lambda_pix * pix + w.lambda_rec * rec + w.lambda_adv * adv


def cross_entropy(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-probability of the true class; zeros are clamped to 1e-12."""
    if probs.dim() != 2 or labels.shape != probs.shape[:1]:
        raise ValueError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree")
    p = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    if bool((p <= 0).any()):
        log.warning("zero probability at the true class; clamping to %g", EPS)
    return -torch.log(p.clamp_min(EPS)).mean()


def cross_entropy_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Same objective computed from logits (numerically stable training path)."""
    return F.cross_entropy(logits, labels.long())

"""Language-model objective and the two router auxiliary losses.

All three accept graph Vars and return scalar Vars, so they compose into
one backward pass. The auxiliary weights default to z=0.001 and load
balance=0.01.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .model import RouterDecision


@dataclass(frozen=True)
class LossConfig:
    z_loss_weight: float = 0.001
    load_balance_weight: float = 0.01

    def __post_init__(self) -> None:
        for name in ("z_loss_weight", "load_balance_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss.{name} must be finite and >= 0, got {v!r}")


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean next-token negative log-likelihood.

    ``logits`` is (batch, seq, vocab); ``targets`` holds the token ids the
    model should predict at each position (the caller applies the shift).
    """
    if not np.all(np.isfinite(logits.value)):
        raise FloatingPointError("non-finite logits in cross_entropy")
    b, s, vocab = logits.shape
    targets = np.asarray(targets).reshape(b * s)
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    flat = ad.reshape(logits, (b * s, vocab))
    log_norm = ad.logsumexp(flat, axis=-1)
    picked = ad.gather_last(flat, targets)
    return ad.mean(ad.sub(log_norm, picked))


def z_loss(router_logits: Var) -> Var:
    """Mean squared log-partition of the router logits, one row per token."""
    lse = ad.logsumexp(router_logits, axis=-1)
    return ad.mean(ad.mul(lse, lse))


def load_balance_loss(decision: RouterDecision, n_experts: int) -> Var:
    """Switch-style balance penalty: n * sum_i f_i * P_i.

    f_i is the hard fraction of tokens whose top-1 pick is expert i (a
    census, no gradient); P_i is the mean router probability of expert i.
    Equals 1 exactly when both are uniform.
    """
    n_tokens = decision.chosen.shape[0]
    if n_tokens == 0:
        raise ValueError("load_balance_loss needs at least one routed token")
    counts = np.bincount(decision.chosen, minlength=n_experts)
    fractions = counts / n_tokens
    mean_probs = ad.mean(decision.probs, axis=0)
    return ad.mul(ad.reduce_sum(ad.mul(mean_probs, fractions)), float(n_experts))


def total_loss(ce: Var, z: Var | None, lb: Var | None, cfg: LossConfig) -> Var:
    """Weighted sum of the objective and auxiliaries; dense models pass None."""
    out = ce
    if z is not None and cfg.z_loss_weight != 0:
        out = ad.add(out, ad.mul(z, cfg.z_loss_weight))
    if lb is not None and cfg.load_balance_weight != 0:
        out = ad.add(out, ad.mul(lb, cfg.load_balance_weight))
    return out

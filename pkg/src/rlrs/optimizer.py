"""AdamW with learning rates assigned per component tag.

The update direction is computed once per parameter and the tag's rate is
applied at the very end, so the pre-rate direction is available for
instrumentation (it is independent of whatever schedule drives the rates).
Weight decay is decoupled and scaled by the same per-tag rate.

Internally the moments live in flat buffers mirroring the parameter set's
flat layout; all elementwise work happens in a few whole-buffer numpy
calls, which is bitwise-identical to doing it tensor by tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .model import ParameterSet
from .schedule import ComponentTag

Array = np.ndarray

# elementwise work runs over cache-sized windows of the flat buffers
_CHUNK = 64 * 1024


@dataclass
class AdamWState:
    """Moment estimates plus the shared step counter, flat-packed."""

    m_flat: Array
    v_flat: Array
    slices: dict[str, slice]
    shapes: dict[str, tuple[int, ...]]
    tags: dict[str, ComponentTag]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    decay_exclude: frozenset[str] = frozenset()
    _grad_buf: Array = field(default=None, repr=False)
    _lr_buf: Array = field(default=None, repr=False)
    _scratch: Array = field(default=None, repr=False)

    @classmethod
    def init(
        cls,
        params: ParameterSet,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        weight_decay: float = 0.0,
        decay_exclude: frozenset[str] = frozenset(),
    ) -> "AdamWState":
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        flat = params.ensure_flat()
        return cls(
            m_flat=np.zeros_like(flat),
            v_flat=np.zeros_like(flat),
            slices=dict(params.flat_slices),
            shapes={p.name: p.value.shape for p in params},
            tags={p.name: p.tag for p in params},
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
            decay_exclude=frozenset(decay_exclude),
            _grad_buf=np.empty_like(flat),
            _lr_buf=np.empty_like(flat),
            _scratch=np.empty(min(flat.size, _CHUNK), dtype=np.float64),
        )

    def moments(self, name: str) -> tuple[Array, Array]:
        """Per-parameter views of the first and second moment."""
        sl, shape = self.slices[name], self.shapes[name]
        return self.m_flat[sl].reshape(shape), self.v_flat[sl].reshape(shape)


@dataclass
class PreLrUpdates:
    """Pre-rate update directions of one step, with their component tags."""

    by_name: dict[str, Array]
    tag_by_name: dict[str, ComponentTag]


def adamw_step(
    state: AdamWState,
    params: ParameterSet,
    grads: Mapping[str, Array],
    lr_by_tag: Mapping[ComponentTag, float],
) -> PreLrUpdates:
    """One optimizer step; mutates ``params`` and ``state`` in place.

    Every present tag must have a rate. Returns the pre-rate updates
    (bias-corrected Adam direction plus the decay term) for instrumentation.
    """
    missing = {p.tag for p in params} - set(lr_by_tag)
    if missing:
        raise ConfigError(f"no learning rate for component(s): {sorted(t.value for t in missing)}")
    flat = params.ensure_flat()
    g = state._grad_buf
    lr = state._lr_buf
    for p in params:
        sl = state.slices[p.name]
        g[sl] = grads[p.name].ravel()
        lr[sl] = lr_by_tag[p.tag]
    if not np.all(np.isfinite(g)):
        for p in params:
            if not np.all(np.isfinite(grads[p.name])):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")

    state.step_count += 1
    bias1 = 1.0 - state.beta1**state.step_count
    bias2 = 1.0 - state.beta2**state.step_count
    update = np.empty_like(flat)
    decay_mask = None
    if state.weight_decay != 0.0 and state.decay_exclude:
        decay_mask = np.ones_like(flat)
        for name in state.decay_exclude:
            if name in state.slices:
                decay_mask[state.slices[name]] = 0.0
    for lo in range(0, flat.size, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, flat.size))
        cm, cv, cg, cf, cu = state.m_flat[sl], state.v_flat[sl], g[sl], flat[sl], update[sl]
        t = state._scratch[: cf.size]
        np.multiply(cm, state.beta1, out=cm)
        np.multiply(cg, 1.0 - state.beta1, out=t)
        np.add(cm, t, out=cm)
        np.multiply(cv, state.beta2, out=cv)
        np.square(cg, out=t)
        np.multiply(t, 1.0 - state.beta2, out=t)
        np.add(cv, t, out=cv)
        np.divide(cm, bias1, out=cu)
        np.divide(cv, bias2, out=t)
        np.sqrt(t, out=t)
        np.add(t, state.epsilon, out=t)
        np.divide(cu, t, out=cu)
        if state.weight_decay != 0.0:
            np.multiply(cf, state.weight_decay, out=t)
            if decay_mask is not None:
                np.multiply(t, decay_mask[sl], out=t)
            np.add(cu, t, out=cu)
        np.multiply(cu, lr[sl], out=t)
        np.subtract(cf, t, out=cf)

    by_name = {p.name: update[state.slices[p.name]].reshape(p.value.shape) for p in params}
    return PreLrUpdates(by_name=by_name, tag_by_name=dict(state.tags))


def update_magnitude(updates: PreLrUpdates, tag: ComponentTag) -> float:
    """L2 norm of all pre-rate update tensors belonging to one component."""
    names = [n for n, t in updates.tag_by_name.items() if t is tag]
    if not names:
        raise ConfigError(f"no updates recorded for component {tag.value!r}")
    return float(np.sqrt(sum(float(np.sum(np.square(updates.by_name[n]))) for n in names)))


def clip_gradients(grads: Mapping[str, Array], max_norm: float) -> dict[str, Array]:
    """Global-norm gradient clipping; returns scaled copies when over the cap."""
    total = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads)
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}

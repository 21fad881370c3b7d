"""Decoder-only transformer with component-tagged parameters.

The feed-forward block is either a dense SwiGLU or a token-choice top-1
mixture of experts. Every trainable parameter carries exactly one
:class:`~rlrs.schedule.ComponentTag`, assigned by a fixed rule:

  token and position embeddings        -> EMBEDDING
  q/k/v/output projections             -> ATTENTION
  dense SwiGLU matrices                -> FEED_FORWARD
  router matrix                        -> ROUTER
  expert SwiGLU matrices               -> EXPERTS
  output projection to the vocabulary  -> UNEMBEDDING

Normalization gains follow the block they precede (attention norm ->
ATTENTION, feed-forward/MoE norm -> FEED_FORWARD/EXPERTS, and the final
norm before the unembedding -> UNEMBEDDING).

Routing is dropless: every token goes to its argmax expert with no
capacity limit, and the expert output is scaled by the chosen gate
probability, which is the only path carrying gradient to the router.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError
from .schedule import ComponentTag, schedule_set

Array = np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings. ``n_experts == 0`` selects the dense variant."""

    d_model: int
    n_layers: int
    n_heads: int = 4
    ff_multiplier: float = 8 / 3
    n_experts: int = 0
    vocab_size: int = 256
    seq_len: int = 128

    def __post_init__(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.ff_multiplier <= 0:
            raise ConfigError(f"model.ff_multiplier must be positive, got {self.ff_multiplier}")
        if self.n_experts == 1 or self.n_experts < 0:
            raise ConfigError(f"model.n_experts must be 0 (dense) or >= 2, got {self.n_experts}")

    @property
    def is_moe(self) -> bool:
        return self.n_experts >= 2

    @property
    def kind(self) -> str:
        return "moe" if self.is_moe else "dense"

    @property
    def ff_hidden(self) -> int:
        # per-branch SwiGLU width, rounded to a multiple of 8
        return max(8, int(round(self.ff_multiplier * self.d_model / 8)) * 8)

    @property
    def components(self) -> tuple[ComponentTag, ...]:
        return schedule_set(self.kind)


@dataclass
class TaggedParameter:
    name: str
    value: Array  # mutated in place by the optimizer
    tag: ComponentTag


class ParameterSet:
    """Ordered collection of tagged parameters with name lookup.

    The optimizer packs all values into one flat buffer (see
    :meth:`ensure_flat`); after that every ``value`` is a reshaped view
    into it and elementwise updates can run in a handful of numpy calls.
    """

    def __init__(self, params: list[TaggedParameter]):
        self._params = params
        self._by_name = {p.name: p for p in params}
        if len(self._by_name) != len(params):
            raise ConfigError("duplicate parameter names")
        self._flat: Array | None = None
        self._slices: dict[str, slice] = {}

    def ensure_flat(self) -> Array:
        """Back all parameters by one contiguous buffer; idempotent."""
        if self._flat is None:
            total = sum(p.value.size for p in self._params)
            flat = np.empty(total, dtype=np.float64)
            offset = 0
            for p in self._params:
                sl = slice(offset, offset + p.value.size)
                flat[sl] = p.value.ravel()
                p.value = flat[sl].reshape(p.value.shape)
                self._slices[p.name] = sl
                offset = sl.stop
            self._flat = flat
        return self._flat

    @property
    def flat_slices(self) -> dict[str, slice]:
        self.ensure_flat()
        return self._slices

    def __iter__(self) -> Iterator[TaggedParameter]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> TaggedParameter:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def names(self) -> list[str]:
        return [p.name for p in self._params]

    def tags_present(self) -> set[ComponentTag]:
        return {p.tag for p in self._params}

    def by_tag(self, tag: ComponentTag) -> list[TaggedParameter]:
        return [p for p in self._params if p.tag is tag]

    def total_parameters(self) -> int:
        return sum(p.value.size for p in self._params)

    def copy(self) -> "ParameterSet":
        return ParameterSet([TaggedParameter(p.name, p.value.copy(), p.tag) for p in self._params])


@dataclass
class RouterDecision:
    """Routing outcome of one MoE layer, flattened over batch and sequence."""

    logits: Var  # (tokens, n_experts)
    probs: Var   # rows sum to 1
    chosen: Array  # (tokens,) argmax expert index


def tag_of(name: str) -> ComponentTag:
    """Component tag of a parameter, derived from its name path."""
    parts = name.split(".")
    if parts[0] == "embed":
        return ComponentTag.EMBEDDING
    if parts[0] == "unembed" or parts[0] == "final_norm":
        return ComponentTag.UNEMBEDDING
    if parts[0] == "layers" and len(parts) >= 4:
        block = parts[2]
        if block == "attention":
            return ComponentTag.ATTENTION
        if block == "ff":
            return ComponentTag.FEED_FORWARD
        if block == "moe":
            return ComponentTag.ROUTER if parts[3] == "router" else ComponentTag.EXPERTS
    raise ConfigError(f"cannot derive a component tag for parameter {name!r}")


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Array:
    """Sample a truncated normal, mean 0, the given parent std, cut at +/- 2 std.

    Uses the inverse-CDF transform so a single uniform draw per element keeps
    initialization deterministic for a given generator state.
    """
    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.random(shape) * (hi - lo) + lo
    return ndtri(u) * std


def init_model(config: ModelConfig, init_scale: float, seed: int) -> ParameterSet:
    """Initialize all parameters, deterministically for a given seed.

    Weight matrices are truncated normal with std ``init_scale / sqrt(fan_in)``
    where fan_in is the contraction dimension; normalization gains start at 1.
    """
    if init_scale <= 0:
        raise ConfigError(f"init_scale must be positive, got {init_scale}")
    rng = np.random.Generator(np.random.PCG64(seed))
    d, h = config.d_model, config.ff_hidden
    params: list[TaggedParameter] = []

    def matrix(name: str, shape: tuple[int, ...], fan_in: int) -> None:
        params.append(TaggedParameter(name, _truncated_normal(rng, shape, init_scale / np.sqrt(fan_in)), tag_of(name)))

    def gain(name: str) -> None:
        params.append(TaggedParameter(name, np.ones(d, dtype=np.float64), tag_of(name)))

    matrix("embed.tokens", (config.vocab_size, d), d)
    matrix("embed.positions", (config.seq_len, d), d)
    for i in range(config.n_layers):
        base = f"layers.{i}"
        gain(f"{base}.attention.norm_gain")
        for w in ("wq", "wk", "wv", "wo"):
            matrix(f"{base}.attention.{w}", (d, d), d)
        if config.is_moe:
            gain(f"{base}.moe.norm_gain")
            matrix(f"{base}.moe.router", (d, config.n_experts), d)
            for e in range(config.n_experts):
                matrix(f"{base}.moe.experts.{e}.w_gate", (d, h), d)
                matrix(f"{base}.moe.experts.{e}.w_val", (d, h), d)
                matrix(f"{base}.moe.experts.{e}.w_out", (h, d), h)
        else:
            gain(f"{base}.ff.norm_gain")
            matrix(f"{base}.ff.w_gate", (d, h), d)
            matrix(f"{base}.ff.w_val", (d, h), d)
            matrix(f"{base}.ff.w_out", (h, d), h)
    gain("final_norm.gain")
    matrix("unembed.weight", (d, config.vocab_size), d)
    return ParameterSet(params)


def wrap_parameters(tape: Tape, params: ParameterSet) -> dict[str, Var]:
    """Expose every parameter array as a leaf Var on ``tape`` (no copies)."""
    return {p.name: tape.var(p.value) for p in params}


def _causal_mask(seq_len: int) -> Array:
    mask = np.triu(np.full((seq_len, seq_len), -1e30), k=1)
    return mask[None, None, :, :]


def _attention(v: Mapping[str, Var], base: str, flat: Var, b: int, s: int, config: ModelConfig, mask: Array) -> Var:
    """Causal multi-head attention over tokens flattened to (b*s, d)."""
    d = config.d_model
    nh, dh = config.n_heads, d // config.n_heads

    def heads(w: str) -> Var:
        proj = ad.matmul(flat, v[f"{base}.{w}"])
        return ad.transpose(ad.reshape(proj, (b, s, nh, dh)), (0, 2, 1, 3))

    q, k, val = heads("wq"), heads("wk"), heads("wv")
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = ad.softmax(ad.add(scores, scores.tape.var(mask)), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, val), (0, 2, 1, 3)), (b * s, d))
    return ad.matmul(ctx, v[f"{base}.wo"])


def _moe_block(v: Mapping[str, Var], base: str, flat: Var, config: ModelConfig) -> tuple[Var, RouterDecision]:
    n_tokens = flat.shape[0]
    logits = ad.matmul(flat, v[f"{base}.router"])
    probs = ad.softmax(logits, axis=-1)
    chosen = np.argmax(probs.value, axis=-1)
    combined: Var | None = None
    for e in range(config.n_experts):
        idx = np.flatnonzero(chosen == e)
        if idx.size == 0:
            continue
        ex = f"{base}.experts.{e}"
        out = ad.swiglu(ad.take_rows(flat, idx, unique=True), v[f"{ex}.w_gate"], v[f"{ex}.w_val"], v[f"{ex}.w_out"])
        placed = ad.scatter_rows(out, idx, n_tokens)
        combined = placed if combined is None else ad.add(combined, placed)
    gate = ad.reshape(ad.gather_last(probs, chosen), (n_tokens, 1))
    return ad.mul(combined, gate), RouterDecision(logits=logits, probs=probs, chosen=chosen)


def forward(
    param_vars: Mapping[str, Var], config: ModelConfig, tokens: Array
) -> tuple[Var, list[RouterDecision]]:
    """Run the model on a (batch, seq) matrix of token ids.

    Returns logits of shape (batch, seq, vocab) and one RouterDecision per
    MoE layer (empty list for dense models).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    b, s = tokens.shape
    if s > config.seq_len:
        raise ValueError(f"sequence length {s} exceeds model maximum {config.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")

    v = param_vars
    # residual stream kept flat as (b*s, d); attention reshapes internally
    x = ad.reshape(
        ad.add(
            ad.embedding_lookup(v["embed.tokens"], tokens),
            ad.embedding_lookup(v["embed.positions"], np.arange(s)),
        ),
        (b * s, config.d_model),
    )
    mask = _causal_mask(s)
    decisions: list[RouterDecision] = []
    for i in range(config.n_layers):
        base = f"layers.{i}"
        normed = ad.rms_norm(x, v[f"{base}.attention.norm_gain"])
        x = ad.add(x, _attention(v, f"{base}.attention", normed, b, s, config, mask))
        if config.is_moe:
            normed = ad.rms_norm(x, v[f"{base}.moe.norm_gain"])
            out, decision = _moe_block(v, f"{base}.moe", normed, config)
            decisions.append(decision)
            x = ad.add(x, out)
        else:
            normed = ad.rms_norm(x, v[f"{base}.ff.norm_gain"])
            x = ad.add(x, ad.swiglu(normed, v[f"{base}.ff.w_gate"], v[f"{base}.ff.w_val"], v[f"{base}.ff.w_out"]))
    x = ad.rms_norm(x, v["final_norm.gain"])
    logits = ad.matmul(x, v["unembed.weight"])
    return ad.reshape(logits, (b, s, config.vocab_size)), decisions


def run_forward(params: ParameterSet, config: ModelConfig, tokens: Array) -> tuple[Array, list[RouterDecision]]:
    """Forward pass on a throwaway tape; returns plain logit values."""
    tape = Tape()
    logits, decisions = forward(wrap_parameters(tape, params), config, tokens)
    return logits.value, decisions


# ---------------------------------------------------------------------------
# Checkpoint format
#
# Little-endian binary layout:
#   magic b"RLRS" | version u32 | header_len u32 | header json (utf-8)
#   tensor_count u32, then per tensor:
#     name_len u32 | name utf-8 | rank u32 | dims u64 * rank | float64 payload
# The header carries a config echo, the seed, and the step counter.

_MAGIC = b"RLRS"
_VERSION = 1


def save_checkpoint(path, params: ParameterSet, header: Mapping, extra_tensors: Mapping[str, Array] | None = None) -> None:
    tensors: list[tuple[str, Array]] = [(p.name, p.value) for p in params]
    for name, arr in (extra_tensors or {}).items():
        tensors.append((name, arr))
    header_bytes = json.dumps(dict(header), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, Array]]:
    """Read a checkpoint; returns (header, tensors by name)."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(header_len).decode("utf-8"))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", buf.read(4))
        name = buf.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", buf.read(4))
        dims = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(dims).copy()
    return header, tensors

"""Deterministic token sources: raw bytes and a synthetic Markov corpus.

The synthetic corpus is drawn from a seeded Markov chain whose rows are
deliberately peaked, so its conditional entropy sits well below its
unigram entropy and a small model has structure worth learning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

SYNTHETIC_VOCAB = 32


@dataclass(frozen=True)
class TokenStream:
    tokens: Array  # 1-D int64
    vocab_size: int
    source: str

    def __post_init__(self) -> None:
        if self.tokens.ndim != 1:
            raise ValueError("token stream must be one-dimensional")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise ValueError(f"token outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return int(self.tokens.size)


def tokenize_bytes(data: bytes, source: str = "<bytes>") -> TokenStream:
    """Identity byte-level tokenizer over a 256-symbol vocabulary."""
    if len(data) == 0:
        raise ValueError("cannot tokenize an empty input")
    return TokenStream(np.frombuffer(data, dtype=np.uint8).astype(np.int64), 256, source)


def detokenize(stream: TokenStream) -> bytes:
    if stream.vocab_size != 256:
        raise ValueError("only byte-level streams can be detokenized")
    return stream.tokens.astype(np.uint8).tobytes()


def load_file(path) -> TokenStream:
    with open(path, "rb") as fh:
        return tokenize_bytes(fh.read(), source=str(path))


def transition_matrix(seed: int, vocab: int = SYNTHETIC_VOCAB, order: int = 1) -> Array:
    """Row-stochastic transition table of shape (vocab**order, vocab).

    Each state concentrates most of its mass on four successors, so the
    chain's next-token entropy is far below log(vocab).
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, order, vocab])))
    n_states = vocab**order
    matrix = np.full((n_states, vocab), 1e-4)
    weights = np.array([0.55, 0.25, 0.12, 0.08])
    for s in range(n_states):
        successors = rng.choice(vocab, size=4, replace=False)
        matrix[s, successors] += weights
    return matrix / matrix.sum(axis=1, keepdims=True)


def sample_chain(matrix: Array, vocab: int, order: int, length: int, seed: int) -> Array:
    """Sample ``length`` tokens from the chain, deterministically for a seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    cumulative = np.cumsum(matrix, axis=1)
    uniforms = rng.random(length)
    tokens = np.empty(length, dtype=np.int64)
    state = 0
    for i in range(length):
        nxt = int(np.searchsorted(cumulative[state], uniforms[i], side="right"))
        nxt = min(nxt, vocab - 1)
        tokens[i] = nxt
        state = nxt if order == 1 else (state % vocab) * vocab + nxt
    return tokens


def synthetic_corpus(seed: int, length: int, order: int = 1, vocab: int = SYNTHETIC_VOCAB) -> TokenStream:
    """Seeded Markov corpus; the chain itself is a function of the same seed."""
    if length <= 0:
        raise ValueError(f"corpus length must be positive, got {length}")
    matrix = transition_matrix(seed, vocab=vocab, order=order)
    tokens = sample_chain(matrix, vocab, order, length, seed)
    return TokenStream(tokens, vocab, f"synthetic(seed={seed}, order={order}, vocab={vocab})")


def corpus_from_matrix(matrix: Array, order: int, length: int, seed: int, source: str = "synthetic(custom)") -> TokenStream:
    """Corpus drawn from a caller-supplied transition table."""
    vocab = matrix.shape[1]
    return TokenStream(sample_chain(matrix, vocab, order, length, seed), vocab, source)


def stationary_distribution(matrix: Array, tol: float = 1e-12) -> Array:
    """Stationary distribution over chain states, by power iteration.

    For an order-2 table of shape (vocab**2, vocab) the result is over the
    vocab**2 two-token states.
    """
    n_states, vocab = matrix.shape
    pi = np.full(n_states, 1.0 / n_states)
    if n_states == vocab:
        step = lambda p: p @ matrix
    elif n_states == vocab * vocab:
        cube = matrix.reshape(vocab, vocab, vocab)
        step = lambda p: np.einsum("ab,abc->bc", p.reshape(vocab, vocab), cube).ravel()
    else:
        raise ValueError(f"transition table shape {matrix.shape} is neither order 1 nor 2")
    for _ in range(100_000):
        nxt = step(pi)
        if np.abs(nxt - pi).max() < tol:
            break
        pi = nxt
    return nxt / nxt.sum()


def unigram_distribution(matrix: Array) -> Array:
    """Stationary distribution of single tokens."""
    n_states, vocab = matrix.shape
    pi = stationary_distribution(matrix)
    if n_states == vocab:
        return pi
    return pi.reshape(vocab, vocab).sum(axis=0)


def unigram_entropy(matrix: Array) -> float:
    """Entropy (nats) of the stationary unigram distribution."""
    pi = unigram_distribution(matrix)
    nz = pi[pi > 0]
    return float(-(nz * np.log(nz)).sum())


def batches(stream: TokenStream, batch_size: int, seq_len: int, seed: int):
    """One pass of shuffled non-overlapping (inputs, targets) windows.

    Windows stride by ``seq_len`` over the stream prefix; targets are the
    inputs shifted by one, so each window consumes seq_len + 1 tokens.
    Window order is a seeded permutation; incomplete trailing batches are
    dropped. Deterministic in (stream, batch_size, seq_len, seed).
    """
    if batch_size < 1 or seq_len < 1:
        raise ValueError("batch_size and seq_len must be >= 1")
    n_windows = (len(stream) - 1) // seq_len
    if n_windows < batch_size:
        raise ValueError(
            f"stream of {len(stream)} tokens yields {n_windows} windows; "
            f"need at least {batch_size} (batch_size) of length {seq_len}+1"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 13])))
    window_order = rng.permutation(n_windows)
    tokens = stream.tokens
    for start in range(0, n_windows - batch_size + 1, batch_size):
        picks = window_order[start : start + batch_size]
        inputs = np.stack([tokens[w * seq_len : w * seq_len + seq_len] for w in picks])
        targets = np.stack([tokens[w * seq_len + 1 : w * seq_len + seq_len + 1] for w in picks])
        yield inputs, targets


def batch_cycle(stream: TokenStream, batch_size: int, seq_len: int, seed: int):
    """Endless batch iterator; every pass reshuffles with a derived seed."""
    epoch = 0
    while True:
        epoch_seed = int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
        yield from batches(stream, batch_size, seq_len, epoch_seed)
        epoch += 1

"""Content encoder, duration predictor and repeat upsampling.

The encoder maps token ids ``(L,)`` to a hidden sequence ``(L, D)``; the
duration predictor assigns every token a positive integer frame count and the
upsampler repeats rows so that the output has ``N = sum(durations)`` frames.
Parameters live in the shared parameter dict under ``enc.*`` and ``dur.*``.
"""
from __future__ import annotations

import numpy as np

# printable ASCII; id 0 is reserved
VOCAB_OFFSET = 31
VOCAB_SIZE = 127 - VOCAB_OFFSET


class UnknownTokenError(ValueError):
    pass


class BudgetMismatchError(ValueError):
    pass


def char_tokenize(text: str) -> np.ndarray:
    """Character-level token ids; an empty prompt gives an empty array."""
    ids = [ord(ch) - VOCAB_OFFSET for ch in text]
    bad = [ch for ch, i in zip(text, ids) if not 1 <= i < VOCAB_SIZE]
    if bad:
        raise UnknownTokenError(f"characters outside the vocabulary: {bad!r}")
    return np.asarray(ids, dtype=np.int64)


def content_tokens(text: str):
    """Tokens for a content prompt, or ``None`` (null condition) when empty."""
    ids = char_tokenize(text)
    return ids if len(ids) else None


def positional_tags(L: int, D: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(100.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(rng: np.random.Generator, D: int, d_ff: int, max_tokens: int) -> dict:
    def lin(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    return {
        "enc.tok": rng.standard_normal((VOCAB_SIZE, D)) * 0.5,
        "enc.w1": lin(D, d_ff),
        "enc.b1": np.zeros(d_ff),
        "enc.w2": lin(d_ff, D) * 0.5,
        "enc.b2": np.zeros(D),
        "dur.w1": lin(D, d_ff),
        "dur.b1": np.zeros(d_ff),
        "dur.w2": lin(d_ff, 1) * 0.1,
        "dur.b2": np.zeros(1),
    }


def _check_tokens(tokens: np.ndarray, max_tokens: int | None) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] < 1:
        raise ValueError("content sequence is empty; use the null condition instead")
    if max_tokens is not None and tokens.shape[-1] > max_tokens:
        raise ValueError(f"{tokens.shape[-1]} tokens exceed the limit of {max_tokens}")
    if np.any((tokens < 1) | (tokens >= VOCAB_SIZE)):
        raise UnknownTokenError(f"token ids must lie in [1, {VOCAB_SIZE})")
    return tokens


def encode_content(params: dict, tokens, max_tokens: int | None = None, cache: dict | None = None) -> np.ndarray:
    """Hidden sequence ``H = X + tanh(X W1 + b1) W2 + b2``, ``X`` = embedding + position.

    ``tokens`` may be ``(L,)`` or a batch ``(B, L)``.  When ``cache`` is a dict
    it receives the intermediates needed by :func:`encode_content_backward`.
    """
    tokens = _check_tokens(tokens, max_tokens)
    D = params["enc.tok"].shape[1]
    X = params["enc.tok"][tokens] + positional_tags(tokens.shape[-1], D)
    A = np.tanh(X @ params["enc.w1"] + params["enc.b1"])
    H = X + A @ params["enc.w2"] + params["enc.b2"]
    if cache is not None:
        cache.update(tokens=tokens, X=X, A=A)
    return H


def encode_content_backward(params: dict, cache: dict, dH: np.ndarray, grads: dict) -> None:
    """Accumulate ``enc.*`` gradients for upstream gradient ``dH``."""
    X, A, tokens = cache["X"], cache["A"], cache["tokens"]
    D = X.shape[-1]
    Xf, Af, dHf = X.reshape(-1, D), A.reshape(-1, A.shape[-1]), dH.reshape(-1, D)
    grads["enc.w2"] += Af.T @ dHf
    grads["enc.b2"] += dHf.sum(0)
    dpre = (dHf @ params["enc.w2"].T) * (1.0 - Af**2)
    grads["enc.w1"] += Xf.T @ dpre
    grads["enc.b1"] += dpre.sum(0)
    dX = dHf + dpre @ params["enc.w1"].T
    np.add.at(grads["enc.tok"], tokens.reshape(-1), dX)


def _softplus(x):
    return np.logaddexp(0.0, x)


def raw_durations(params: dict, H: np.ndarray) -> np.ndarray:
    """Positive real-valued durations from a two-layer softplus head."""
    h = np.tanh(H @ params["dur.w1"] + params["dur.b1"])
    return 1.0 + _softplus(h @ params["dur.w2"] + params["dur.b2"])[..., 0]


def largest_remainder(raw, n_target: int) -> np.ndarray:
    """Integer durations ``>= 1`` summing to ``n_target``.

    Every token gets one frame; the remaining ``n_target - L`` frames are
    apportioned in proportion to ``raw`` by the largest-remainder rule, with
    ties going to the earlier token.
    """
    raw = np.asarray(raw, dtype=np.float64)
    L = len(raw)
    if n_target < L:
        raise BudgetMismatchError(f"frame budget {n_target} below token count {L}")
    if not np.all(np.isfinite(raw)) or np.any(raw <= 0) or raw.sum() <= 0:
        raw = np.ones(L)
    spare = n_target - L
    quota = raw * spare / raw.sum()
    base = np.floor(quota).astype(np.int64)
    left = spare - int(base.sum())
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:left]] += 1
    return 1 + base


def predict_durations(params: dict, H: np.ndarray, n_target: int | None = None) -> np.ndarray:
    """Per-token frame counts for one hidden sequence ``(L, D)``."""
    raw = raw_durations(params, H)
    if n_target is not None:
        return largest_remainder(raw, n_target)
    raw = np.where(np.isfinite(raw), raw, 1.0)
    return np.maximum(1, np.round(raw)).astype(np.int64)


def upsample_index(durations) -> np.ndarray:
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 1):
        raise BudgetMismatchError("durations must be positive")
    return np.repeat(np.arange(len(durations)), durations)


def upsample(H: np.ndarray, durations, n_frames: int | None = None) -> np.ndarray:
    """Repeat row ``i`` of ``H`` ``durations[i]`` times, keeping order."""
    durations = np.asarray(durations, dtype=np.int64)
    if len(durations) != len(H):
        raise BudgetMismatchError(f"{len(durations)} durations for {len(H)} rows")
    if n_frames is not None and int(durations.sum()) != n_frames:
        raise BudgetMismatchError(f"durations sum to {durations.sum()}, expected {n_frames}")
    return H[upsample_index(durations)]

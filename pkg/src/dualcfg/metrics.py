"""Evaluation metrics: WER, cross-ASR WER, KL, Frechet distance, cosine score."""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_PUNCT = str.maketrans("", "", string.punctuation)
KL_EPS = 1e-10


def normalize(text: str) -> list:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def _words(x) -> list:
    return normalize(x) if isinstance(x, str) else list(x)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Minimum substitutions + insertions + deletions turning ``ref`` into ``hyp``."""
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        for j in range(1, len(hyp) + 1):
            if ref[i - 1] == hyp[j - 1]:
                cur[j] = prev[j - 1]
            else:
                cur[j] = 1 + min(prev[j - 1], prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Word error rate of ``hyp`` against ``ref``.

    Strings are normalized with :func:`normalize`; lists are used as given.
    Raises ``ValueError`` on an empty reference.
    """
    r, h = _words(ref), _words(hyp)
    if not r:
        raise ValueError("empty reference")
    return edit_distance(r, h) / len(r)


def delta_wer(hyp_primary, hyp_secondary) -> float:
    """WER between two ASR transcripts of the same audio, the secondary as reference."""
    return wer(hyp_secondary, hyp_primary)


def corpus_wer(refs: Sequence, hyps: Sequence) -> float:
    """Total edits over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    edits = words = 0
    for r, h in zip(refs, hyps):
        r, h = _words(r), _words(h)
        edits += edit_distance(r, h)
        words += len(r)
    if words == 0:
        raise ValueError("empty reference corpus")
    return edits / words


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """``sum p log(p / q)`` for categorical distributions.

    Both are smoothed by ``eps`` and renormalized, so ``q`` may contain zeros.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return max(float(np.sum(p * np.log(p / q))), 0.0)


@dataclass(frozen=True)
class EmbeddingSet:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0

    def __post_init__(self):
        s = self.sigma
        if s.shape != (len(self.mu), len(self.mu)):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(s, s.T, atol=1e-10, rtol=0):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def fit(cls, vectors) -> "EmbeddingSet":
        x = np.asarray(vectors, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError("need an (n >= 2, k) matrix of embeddings")
        sigma = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(0), 0.5 * (sigma + sigma.T), len(x))


class NotPSDError(ValueError):
    pass


def _psd_sqrt(m: np.ndarray, name: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min(initial=0.0) < -1e-8 * max(1.0, abs(vals).max(initial=0.0)):
        raise NotPSDError(f"{name} has eigenvalue {vals.min():.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product root is taken from the symmetric matrix
    ``S_a^{1/2} S_b S_a^{1/2}``, which has the same eigenvalues as ``S_a S_b``.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("embedding dimensions differ")
    ra = _psd_sqrt(a.sigma, "first covariance")
    mid = ra @ b.sigma @ ra
    vals = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if vals.min(initial=0.0) < -1e-8 * max(1.0, abs(vals).max(initial=0.0)):
        raise NotPSDError(f"covariance product has eigenvalue {vals.min():.3e}")
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mu - b.mu
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root)
    return max(val, 0.0)


def embedding_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))

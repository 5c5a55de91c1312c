"""Labeled Gaussian-mixture worlds with exact diffused scores.

A world has one isotropic Gaussian component per (description, content) label
pair.  Forward diffusion keeps it a mixture: component means shrink to
``sqrt(abar) mu`` and the shared variance becomes ``abar sigma^2 + 1 - abar``,
so every masked conditional score is available in closed form.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConditionPair,
    GuidanceWeights,
    NoiseSchedule,
    dual_cfg_combine,
    unified_cfg_combine,
)


class UnknownLabelError(KeyError):
    pass


@dataclass(frozen=True)
class ToyWorld:
    labels_desc: tuple
    labels_cont: tuple
    means: np.ndarray  # (A, B, d)
    weights: np.ndarray  # (A, B), sums to 1
    sigma: float

    def __post_init__(self):
        A, B = len(self.labels_desc), len(self.labels_cont)
        if self.means.shape[:2] != (A, B) or self.weights.shape != (A, B):
            raise ValueError("means/weights do not match the label sets")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("component weights must be positive and sum to 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def d(self) -> int:
        return self.means.shape[2]

    def desc_index(self, label) -> int:
        return _index(self.labels_desc, label)

    def cont_index(self, label) -> int:
        return _index(self.labels_cont, label)

    def components(self, desc=None, cont=None):
        """Means ``(K, d)`` and normalized weights ``(K,)`` of the masked mixture."""
        means, weights = self.means, self.weights
        if desc is not None:
            a = self.desc_index(desc)
            means, weights = means[a : a + 1], weights[a : a + 1]
        if cont is not None:
            b = self.cont_index(cont)
            means, weights = means[:, b : b + 1], weights[:, b : b + 1]
        w = weights.reshape(-1)
        return means.reshape(-1, self.d), w / w.sum()

    def conditional_mean(self, desc=None, cont=None) -> np.ndarray:
        means, w = self.components(desc, cont)
        return w @ means

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` clean points with their (desc index, cont index) labels."""
        A, B = self.weights.shape
        k = rng.choice(A * B, size=n, p=self.weights.reshape(-1))
        a, b = np.divmod(k, B)
        z = self.means[a, b] + self.sigma * rng.standard_normal((n, self.d))
        return z, a, b

    def to_dict(self) -> dict:
        return {
            "labels_desc": list(self.labels_desc),
            "labels_cont": list(self.labels_cont),
            "means": self.means.tolist(),
            "weights": self.weights.tolist(),
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorld":
        return cls(
            labels_desc=tuple(d["labels_desc"]),
            labels_cont=tuple(d["labels_cont"]),
            means=np.asarray(d["means"], dtype=np.float64),
            weights=np.asarray(d["weights"], dtype=np.float64),
            sigma=float(d["sigma"]),
        )


def _index(labels: Sequence, label) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if 0 <= label < len(labels):
            return int(label)
    elif label in labels:
        return labels.index(label)
    raise UnknownLabelError(f"unknown label {label!r}; known: {list(labels)}")


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of the grid world; serializable into run configs."""

    n_desc: int = 3
    n_cont: int = 3
    d: int = 2
    spacing: float = 1.0
    sigma: float = 0.3
    coupling: float = 0.0

    def build(self) -> ToyWorld:
        return grid_world(**asdict(self))


def grid_world(
    n_desc: int = 3,
    n_cont: int = 3,
    d: int = 2,
    spacing: float = 1.0,
    sigma: float = 0.3,
    coupling: float = 0.0,
) -> ToyWorld:
    """Means on a grid: description moves along axis 0, content along axis 1.

    With ``coupling == 0`` the prior is a product, so the density factorizes
    across the two axes and the labels are conditionally independent in the
    sense ``p(z | a, b) ∝ p(z) p(a | z) p(b | z)`` at every noise level.
    ``coupling > 0`` ties the labels through the prior, ``pi_ab ∝ exp(coupling
    * [a == b])``, which breaks that factorization.
    """
    if d < 2:
        raise ValueError("grid world needs d >= 2")
    ca, cb = (n_desc - 1) / 2, (n_cont - 1) / 2
    means = np.zeros((n_desc, n_cont, d))
    means[:, :, 0] = spacing * (np.arange(n_desc)[:, None] - ca)
    means[:, :, 1] = spacing * (np.arange(n_cont)[None, :] - cb)
    logits = coupling * (np.arange(n_desc)[:, None] == np.arange(n_cont)[None, :])
    weights = np.exp(logits)
    weights /= weights.sum()
    return ToyWorld(
        labels_desc=tuple(f"d{i:0{len(str(n_desc - 1))}d}" for i in range(n_desc)),
        labels_cont=tuple(f"c{j:0{len(str(n_cont - 1))}d}" for j in range(n_cont)),
        means=means,
        weights=weights,
        sigma=float(sigma),
    )


def default_world() -> ToyWorld:
    return grid_world()


def diffused_score(world: ToyWorld, z, t: int, s: NoiseSchedule, mask: ConditionPair = ConditionPair()) -> np.ndarray:
    """Exact noise prediction ``E[eps | z_t]`` under the masked conditioning.

    ``mask.desc`` / ``mask.cont`` hold labels (name or index) or ``None``.
    Accepts ``z`` of shape ``(d,)`` or ``(n, d)``.
    """
    ab = s.abar(t)
    return _eps_at(world, np.asarray(z, dtype=np.float64), ab, mask.desc, mask.cont)


def diffused_score_rows(world: ToyWorld, z, t, s: NoiseSchedule, desc=None, cont=None) -> np.ndarray:
    """Like :func:`diffused_score` with one timestep per row of ``z`` (n, d)."""
    ab = s.alpha_bar[np.asarray(t)]
    return _eps_at(world, np.asarray(z, dtype=np.float64), ab[:, None], desc, cont)


def _eps_at(world: ToyWorld, z: np.ndarray, ab, desc, cont) -> np.ndarray:
    # ab is a scalar or an (n, 1) column
    means, w = world.components(desc, cont)
    if z.shape[-1] != world.d:
        raise ValueError(f"latent dim {z.shape[-1]} != world dim {world.d}")
    var = ab * world.sigma**2 + (1.0 - ab)
    zz = np.atleast_2d(z)
    m = np.sqrt(ab)[..., None] * means  # (K, d) or (n, K, d)
    d2 = ((zz[:, None, :] - m) ** 2).sum(-1)  # (n, K)
    logits = np.log(w)[None, :] - 0.5 * d2 / var
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=1, keepdims=True)
    mbar = r @ m if m.ndim == 2 else np.einsum("nk,nkd->nd", r, m)
    eps = np.sqrt(1.0 - ab) * (zz - mbar) / var
    return eps.reshape(z.shape)


def log_density(world: ToyWorld, z, t: int, s: NoiseSchedule, mask: ConditionPair = ConditionPair()) -> np.ndarray:
    """Log of the diffused (masked) mixture density, normalized."""
    ab = s.abar(t)
    means, w = world.components(mask.desc, mask.cont)
    var = ab * world.sigma**2 + (1.0 - ab)
    zz = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d2 = ((zz[:, None, :] - np.sqrt(ab) * means[None]) ** 2).sum(-1)
    lp = np.log(w)[None] - 0.5 * d2 / var - 0.5 * world.d * np.log(2 * np.pi * var)
    hi = lp.max(axis=1, keepdims=True)
    out = (hi + np.log(np.exp(lp - hi).sum(axis=1, keepdims=True)))[:, 0]
    return out if np.ndim(z) > 1 else out[0]


def label_posterior(world: ToyWorld, z, axis: str = "desc") -> np.ndarray:
    """``p(label | z)`` at the clean end, for the description or content axis."""
    zz = np.atleast_2d(np.asarray(z, dtype=np.float64))
    A, B = world.weights.shape
    d2 = ((zz[:, None, :] - world.means.reshape(-1, world.d)[None]) ** 2).sum(-1)
    logits = np.log(world.weights.reshape(-1))[None] - 0.5 * d2 / world.sigma**2
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits).reshape(-1, A, B)
    post = r.sum(axis=2) if axis == "desc" else r.sum(axis=1)
    return post / post.sum(axis=1, keepdims=True)


class OracleScore:
    """Adapter exposing :func:`diffused_score` as a sampler score function."""

    def __init__(self, world: ToyWorld, s: NoiseSchedule):
        self.world = world
        self.schedule = s

    def __call__(self, z: np.ndarray, t: int, conds: ConditionPair) -> np.ndarray:
        return diffused_score(self.world, z, t, self.schedule, conds)


@dataclass
class DecompositionReport:
    samples: int
    tol: float
    max_deviation: float
    max_cfg_deviation: float
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tol and self.max_cfg_deviation < self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        rel = "<" if self.passed else ">="
        return f"max deviation {self.max_deviation:.3e} {rel} {self.tol:g}, {verdict}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def verify_score_decomposition(
    world: ToyWorld,
    s: NoiseSchedule,
    samples: int = 1000,
    tol: float = 1e-9,
    seed: int = 0,
    w_max: float = 10.0,
) -> DecompositionReport:
    """Check that the joint guidance direction splits into per-label parts.

    For random ``(z, t, a, b)`` compares ``eps(a,b) - eps(∅)`` with
    ``[eps(a) - eps(∅)] + [eps(b) - eps(∅)]`` and, at a random common weight
    ``w``, the dual combiner with ``(w, w)`` against the single-weight one.
    Returns the worst deviations; ``report.passed`` compares them to ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    A, B = world.weights.shape
    worst_dev, worst_cfg, worst = 0.0, 0.0, {}
    for i in range(samples):
        t = int(rng.integers(0, s.T))
        a, b = int(rng.integers(0, A)), int(rng.integers(0, B))
        ab = s.abar(t)
        # spread z around the diffused data scale
        z = np.sqrt(ab) * world.means[a, b] + 2.0 * rng.standard_normal(world.d)
        w = float(rng.uniform(0.0, w_max))
        full = _eps_at(world, z, ab, a, b)
        desc = _eps_at(world, z, ab, a, None)
        cont = _eps_at(world, z, ab, None, b)
        null = _eps_at(world, z, ab, None, None)
        dev = float(np.max(np.abs((full - null) - ((desc - null) + (cont - null)))))
        g = GuidanceWeights(w, w)
        cfg = float(np.max(np.abs(dual_cfg_combine(full, desc, cont, null, g) - unified_cfg_combine(full, null, w))))
        if dev > worst_dev:
            worst_dev = dev
            worst = {"z": z.tolist(), "t": t, "desc": world.labels_desc[a], "cont": world.labels_cont[b]}
        worst_cfg = max(worst_cfg, cfg)
    return DecompositionReport(samples, tol, worst_dev, worst_cfg, worst)

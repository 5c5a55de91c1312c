"""Variance-preserving diffusion schedule, DDIM steps and guidance combiners.

Timesteps are integer indices ``0 <= t < T``.  The marker ``CLEAN`` (-1) stands
for the data end of the chain where ``alpha_bar == 1``; a DDIM step towards
``CLEAN`` returns the clean estimate.

Networks in this package predict the added noise ``eps``.  The score of the
diffused density relates to it through ``score = -eps / sqrt(1 - alpha_bar_t)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

CLEAN = -1


class InvalidRangeError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class TimestepOrderError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """``alpha_bar`` at ``t``; 1.0 for ``CLEAN``."""
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.T:
            raise InvalidRangeError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def params(self) -> dict:
        return {"T": self.T, "beta_min": float(self.beta[0]), "beta_max": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products ``alpha_bar``."""
    if int(T) != T or T < 1:
        raise InvalidRangeError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def _check_same_shape(*arrays: np.ndarray) -> None:
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise DimensionMismatchError(f"shape {np.shape(a)} != {shape}")


def forward_diffuse(z0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Sample ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(z0, eps)
    ab = s.abar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def eps_to_score(eps, t: int, s: NoiseSchedule) -> np.ndarray:
    return -np.asarray(eps) / np.sqrt(1.0 - s.abar(t))


def score_to_eps(score, t: int, s: NoiseSchedule) -> np.ndarray:
    return -np.asarray(score) * np.sqrt(1.0 - s.abar(t))


def predict_z0(z_t, eps_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    ab = s.abar(t)
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def ddim_step(
    z_t,
    eps_hat,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
    eta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev`` may be ``CLEAN``).

    With ``eta == 0`` the update is deterministic.  For ``eta > 0`` fresh noise
    is drawn from ``rng``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape(z_t, eps_hat)
    if t == CLEAN or t_prev >= t:
        raise TimestepOrderError(f"need t_prev < t, got t={t}, t_prev={t_prev}")
    if eta < 0:
        raise InvalidRangeError(f"eta must be >= 0, got {eta}")
    ab, ab_prev = s.abar(t), s.abar(t_prev)
    z0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    z_prev = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ValueError("eta > 0 needs an rng")
        z_prev = z_prev + sigma * rng.standard_normal(z_t.shape)
    return z_prev


def unified_cfg_combine(eps_cond, eps_null, w: float) -> np.ndarray:
    """Single-weight guidance: ``eps_cond + w (eps_cond - eps_null)``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_null = np.asarray(eps_null, dtype=np.float64)
    _check_same_shape(eps_cond, eps_null)
    return eps_cond + w * (eps_cond - eps_null)


@dataclass(frozen=True)
class GuidanceWeights:
    w_desc: float = 7.0
    w_cont: float = 7.0

    def __post_init__(self):
        for name in ("w_desc", "w_cont"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidRangeError(f"{name} must be finite and >= 0, got {v}")


# Presets used for joint, speech-dominant and audio-dominant generation.
JOINT = GuidanceWeights(7.0, 7.0)
CONTENT_DOMINANT = GuidanceWeights(1.0, 9.0)
DESCRIPTION_DOMINANT = GuidanceWeights(9.0, 1.0)
DEFAULT_N_STEPS = 100


def dual_cfg_combine(eps_full, eps_desc_only, eps_cont_only, eps_null, g: GuidanceWeights) -> np.ndarray:
    """Per-condition guidance from the four masked noise predictions.

    ``eps_full + w_desc (eps_desc_only - eps_null) + w_cont (eps_cont_only - eps_null)``
    """
    arrs = [np.asarray(a, dtype=np.float64) for a in (eps_full, eps_desc_only, eps_cont_only, eps_null)]
    _check_same_shape(*arrs)
    full, desc_only, cont_only, null = arrs
    return full + g.w_desc * (desc_only - null) + g.w_cont * (cont_only - null)


@dataclass(frozen=True)
class ConditionPair:
    """Description and content conditions; ``None`` marks the null condition.

    The payload type depends on the score function: label names for the
    analytic oracle, an embedding vector and token ids for the network.
    """

    desc: Any = None
    cont: Any = None

    def masked(self, keep_desc: bool, keep_cont: bool) -> "ConditionPair":
        return ConditionPair(self.desc if keep_desc else None, self.cont if keep_cont else None)


# score_fn(z (n, d), t, conds) -> eps (n, d)
ScoreFn = Callable[[np.ndarray, int, ConditionPair], np.ndarray]


def sampling_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Descending timesteps from ``T - 1`` to 0, evenly spaced."""
    if int(n_steps) != n_steps or not 1 <= n_steps <= T:
        raise InvalidRangeError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, int(n_steps))).astype(int)


def guided_eps(score_fn: ScoreFn, z: np.ndarray, t: int, conds: ConditionPair, g: GuidanceWeights) -> np.ndarray:
    eps_full = score_fn(z, t, conds)
    eps_desc = score_fn(z, t, conds.masked(True, False))
    eps_cont = score_fn(z, t, conds.masked(False, True))
    eps_null = score_fn(z, t, conds.masked(False, False))
    return dual_cfg_combine(eps_full, eps_desc, eps_cont, eps_null, g)


def sample(
    score_fn: ScoreFn,
    s: NoiseSchedule,
    n_steps: int = DEFAULT_N_STEPS,
    g: GuidanceWeights = JOINT,
    conds: ConditionPair = ConditionPair(),
    seed: int = 0,
    *,
    n: int = 1,
    d: int = 2,
    eta: float = 0.0,
    z_T: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Run a guided DDIM chain and return ``(n, d)`` clean estimates.

    ``z_T`` is drawn from a standard normal seeded by ``seed`` unless given.
    """
    ts = sampling_timesteps(s.T, n_steps)
    rng = np.random.default_rng(seed)
    if z_T is None:
        z = rng.standard_normal((n, d))
    else:
        z = np.array(z_T, dtype=np.float64, copy=True)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else CLEAN
        eps = guided_eps(score_fn, z, int(t), conds, g)
        z = ddim_step(z, eps, int(t), t_prev, s, eta=eta, rng=rng)
    return z

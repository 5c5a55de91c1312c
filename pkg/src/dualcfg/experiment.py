"""Training, sampling and guidance sweeps on a toy world.

Description labels are turned into condition vectors by a frozen synthetic
text embedder; content labels are fed as character tokens through the
content encoder and durator.  Everything is seeded and deterministic.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics, scorenet
from .clients import SyntheticEmbedder
from .core import ConditionPair, GuidanceWeights, NoiseSchedule, sample
from .durator import content_tokens
from .oracle import OracleScore, ToyWorld, diffused_score_rows, label_posterior

log = logging.getLogger(__name__)

MASKS = {
    "full": (True, True),
    "desc_only": (True, False),
    "cont_only": (False, True),
    "null": (False, False),
}


class ToyConditioner:
    """Maps world labels to network conditions."""

    def __init__(self, world: ToyWorld, cfg: scorenet.NetConfig, salt: str = "desc"):
        self.world = world
        emb = SyntheticEmbedder(cfg.d_desc, salt)
        self.desc_vectors = np.stack([emb.embed_text(lab) for lab in world.labels_desc])
        toks = [content_tokens(lab) for lab in world.labels_cont]
        if len({len(t) for t in toks}) != 1:
            raise ValueError("content labels must have equal length")
        self.cont_tokens = np.stack(toks)

    def pair(self, desc=None, cont=None) -> ConditionPair:
        dv = None if desc is None else self.desc_vectors[self.world.desc_index(desc)]
        ct = None if cont is None else self.cont_tokens[self.world.cont_index(cont)]
        return ConditionPair(dv, ct)


class LabeledNetScore:
    """Network score function driven by world labels instead of raw conditions."""

    def __init__(self, params: dict, cfg: scorenet.NetConfig, conditioner: ToyConditioner):
        self.net = scorenet.NetScore(params, cfg)
        self.conditioner = conditioner

    def __call__(self, z, t, conds: ConditionPair):
        return self.net(z, t, self.conditioner.pair(conds.desc, conds.cont))


@dataclass
class TrainResult:
    params: dict
    losses: list
    opt: scorenet.Adam
    rng: np.random.Generator


def train_on_world(
    world: ToyWorld,
    cfg: scorenet.NetConfig,
    s: NoiseSchedule,
    steps: int = 5000,
    batch_size: int = 256,
    lr: float = 2e-3,
    dropout_p: float = 0.1,
    seed: int = 0,
    params: Optional[dict] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    rng = np.random.default_rng(seed)
    cond = ToyConditioner(world, cfg)
    p = scorenet.init_params(cfg) if params is None else params
    opt = scorenet.Adam(lr=lr)
    losses = []
    for step in range(steps):
        z0, a, b = world.sample(batch_size, rng)
        loss, p = scorenet.training_step(
            p, cfg, z0, cond.desc_vectors[a], cond.cont_tokens[b], s, dropout_p, rng, opt
        )
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return TrainResult(p, losses, opt, rng)


def mse_vs_oracle(
    params: dict,
    cfg: scorenet.NetConfig,
    world: ToyWorld,
    s: NoiseSchedule,
    n: int = 4000,
    seed: int = 12345,
) -> dict:
    """Mean ``|eps_net - eps_oracle|^2`` per condition mask on held-out ``(z_t, t)``."""
    rng = np.random.default_rng(seed)
    cond = ToyConditioner(world, cfg)
    z0, a, b = world.sample(n, rng)
    t = rng.integers(0, s.T, size=n)
    eps = rng.standard_normal(z0.shape)
    ab = s.alpha_bar[t][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    out = {}
    for name, (kd, kc) in MASKS.items():
        batch = scorenet.Batch(
            z_t,
            t,
            cond.desc_vectors[a],
            np.full(n, kd),
            cond.cont_tokens[b],
            np.full(n, kc),
        )
        pred = scorenet.forward(params, cfg, batch)
        ref = np.empty_like(pred)
        for ia in range(len(world.labels_desc)):
            for ib in range(len(world.labels_cont)):
                rows = (a == ia) & (b == ib)
                ref[rows] = diffused_score_rows(
                    world, z_t[rows], t[rows], s, ia if kd else None, ib if kc else None
                )
        out[name] = float(np.mean(np.sum((pred - ref) ** 2, axis=1)))
    return out


def heldout_batch(
    world: ToyWorld, cfg: scorenet.NetConfig, s: NoiseSchedule, n: int, seed: int, dropout_p: float
) -> scorenet.TrainingSample:
    """A fixed evaluation batch drawn exactly like a training batch."""
    rng = np.random.default_rng([seed, 7919])
    cond = ToyConditioner(world, cfg)
    z0, a, b = world.sample(n, rng)
    t = rng.integers(0, s.T, size=n)
    eps = rng.standard_normal(z0.shape)
    kd, kc = scorenet.draw_condition_masks(rng, n, dropout_p)
    return scorenet.TrainingSample(z0, t, eps, cond.desc_vectors[a], cond.cont_tokens[b], kd, kc)


def heldout_loss(
    params: dict, cfg: scorenet.NetConfig, world: ToyWorld, s: NoiseSchedule, n: int = 4000, seed: int = 0, dropout_p: float = 0.1
) -> float:
    """Training objective on :func:`heldout_batch`; no parameters change."""
    smp = heldout_batch(world, cfg, s, n, seed, dropout_p)
    return scorenet.loss_and_grad(params, cfg, s, smp, with_grad=False)[0]


def cell_seed(seed: int, w_desc: float, w_cont: float) -> int:
    """Per-cell seed from a stable hash of ``(seed, w_desc, w_cont)``."""
    key = f"{seed}|{float(w_desc)!r}|{float(w_cont)!r}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


@dataclass(frozen=True)
class SweepSettings:
    desc: str
    cont: str
    n_samples: int = 2000
    n_steps: int = 100
    seed: int = 0


SWEEP_COLUMNS = (
    "w_desc",
    "w_cont",
    "fd",
    "kl_desc",
    "desc_align",
    "cont_error",
    "cont_proj",
)


def sweep_cell(score_fn, world: ToyWorld, s: NoiseSchedule, g: GuidanceWeights, st: SweepSettings) -> dict:
    """Desk-scale analogues of the audio metrics for one guidance setting.

    * ``fd``: Frechet distance between generated samples and exact samples
      of the target component;
    * ``kl_desc``: KL(reference || generated) of the mean description-label
      posterior;
    * ``desc_align``: mean cosine between a sample's offset from the global
      mean and the description direction;
    * ``cont_error``: fraction of samples whose most likely content label is
      wrong (an intelligibility proxy);
    * ``cont_proj``: mean projection onto the content direction.
    """
    seed = cell_seed(st.seed, g.w_desc, g.w_cont)
    conds = ConditionPair(st.desc, st.cont)
    gen = sample(score_fn, s, st.n_steps, g, conds, seed, n=st.n_samples, d=world.d)
    rng = np.random.default_rng(seed + 1)
    a, b = world.desc_index(st.desc), world.cont_index(st.cont)
    ref = world.means[a, b] + world.sigma * rng.standard_normal((st.n_samples, world.d))

    fd = metrics.frechet_distance(metrics.EmbeddingSet.fit(ref), metrics.EmbeddingSet.fit(gen))
    kl = metrics.kl_divergence(
        label_posterior(world, ref, "desc").mean(0), label_posterior(world, gen, "desc").mean(0)
    )
    mu = world.conditional_mean()
    desc_dir = world.conditional_mean(desc=st.desc) - mu
    cont_dir = world.conditional_mean(cont=st.cont) - mu
    offs = gen - mu
    norms = np.linalg.norm(offs, axis=1) * np.linalg.norm(desc_dir)
    cos = np.divide(offs @ desc_dir, norms, out=np.zeros(len(offs)), where=norms > 0)
    cont_err = float(np.mean(label_posterior(world, gen, "cont").argmax(1) != b))
    proj = float(np.mean(offs @ cont_dir)) / max(float(np.linalg.norm(cont_dir)), 1e-300)
    return {
        "w_desc": g.w_desc,
        "w_cont": g.w_cont,
        "fd": fd,
        "kl_desc": kl,
        "desc_align": float(np.mean(cos)),
        "cont_error": cont_err,
        "cont_proj": proj,
    }


def content_projection(samples: np.ndarray, world: ToyWorld, cont) -> np.ndarray:
    """Per-sample projection onto the unit content direction ``mu(cont) - mu``."""
    mu = world.conditional_mean()
    direction = world.conditional_mean(cont=cont) - mu
    return (samples - mu) @ direction / np.linalg.norm(direction)


DEFAULT_GRID = tuple(GuidanceWeights(wd, wc) for wd in (5.0, 7.0, 9.0) for wc in (5.0, 7.0, 9.0))


def oracle_score(world: ToyWorld, s: NoiseSchedule) -> OracleScore:
    return OracleScore(world, s)


def run_sweep(score_fn, world: ToyWorld, s: NoiseSchedule, grid: Sequence[GuidanceWeights], st: SweepSettings, workers: int = 1) -> list:
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(sweep_cell, score_fn, world, s, g, st) for g in grid]
            return [f.result() for f in futs]
    return [sweep_cell(score_fn, world, s, g, st) for g in grid]

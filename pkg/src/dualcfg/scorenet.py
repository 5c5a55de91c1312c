"""Small two-condition noise-prediction network with manual backprop.

Conditioning paths:

* description vector -> linear projection (or learned null), concatenated with
  a sinusoidal timestep embedding, projected and added to the trunk input;
* content tokens -> encoder -> duration upsampling -> ``c_cont`` (N x D), read
  by one single-head cross-attention block (learned null token when dropped).

The trunk is an MLP with SiLU activations.  Everything is float64 numpy; the
gradient of the mean-squared noise loss is written out by hand and checked
against finite differences in :func:`grad_check`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import durator
from .core import ConditionPair, NoiseSchedule

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    d: int = 2
    d_desc: int = 16
    d_model: int = 64
    d_cont: int = 16
    d_ff: int = 32
    n_cont_tokens_max: int = 8
    n_frames: int = 8
    layers: int = 3
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v < 1 and not (k == "layers" and v == 0):
                raise ValueError(f"NetConfig.{k} must be >= 1, got {v}")
        if self.n_frames < self.n_cont_tokens_max:
            raise ValueError("n_frames must be >= n_cont_tokens_max so that L <= N holds")


def init_params(cfg: NetConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    M, D = cfg.d_model, cfg.d_cont

    def lin(n_in, n_out, scale=1.0):
        return scale * rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    p = {
        "desc.w": lin(cfg.d_desc, M),
        "desc.b": np.zeros(M),
        "desc.null": rng.standard_normal(M) * 0.5,
        "cond.w": lin(2 * M, M),
        "cond.b": np.zeros(M),
        "in.w": lin(cfg.d, M),
        "in.b": np.zeros(M),
        "cont.null": rng.standard_normal(D) * 0.5,
        "attn.q": lin(M, M),
        "attn.k": lin(D, M),
        "attn.v": lin(D, M),
        "attn.o": lin(M, M, 0.5),
    }
    for l in range(cfg.layers):
        p[f"trunk.{l}.w"] = lin(M, M)
        p[f"trunk.{l}.b"] = np.zeros(M)
    p["out.w"] = lin(M, cfg.d, 0.1)
    p["out.b"] = np.zeros(cfg.d)
    p.update(durator.init_params(rng, D, cfg.d_ff, cfg.n_cont_tokens_max))
    return p


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Batch:
    """A batch of network inputs; ``None`` arrays mean "all null"."""

    z: np.ndarray  # (B, d)
    t: np.ndarray  # (B,)
    desc: Optional[np.ndarray] = None  # (B, d_desc)
    desc_keep: Optional[np.ndarray] = None  # (B,) bool
    tokens: Optional[np.ndarray] = None  # (B, L) int
    cont_keep: Optional[np.ndarray] = None  # (B,) bool

    def __post_init__(self):
        B = len(self.z)
        if self.desc is None:
            self.desc_keep = np.zeros(B, bool)
        elif self.desc_keep is None:
            self.desc_keep = np.ones(B, bool)
        if self.tokens is None:
            self.cont_keep = np.zeros(B, bool)
        elif self.cont_keep is None:
            self.cont_keep = np.ones(B, bool)


def content_condition(p: dict, cfg: NetConfig, tokens) -> np.ndarray:
    """``c_cont`` (n_frames x D) for one token sequence."""
    H = durator.encode_content(p, tokens, cfg.n_cont_tokens_max)
    dur = durator.predict_durations(p, H, cfg.n_frames)
    return durator.upsample(H, dur, cfg.n_frames)


def forward(p: dict, cfg: NetConfig, batch: Batch, cache: Optional[dict] = None) -> np.ndarray:
    """Noise prediction ``(B, d)``; fills ``cache`` for :func:`backward`."""
    z = np.asarray(batch.z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cfg.d:
        raise ValueError(f"latent shape {z.shape} does not match d={cfg.d}")
    B, M, N, D = len(z), cfg.d_model, cfg.n_frames, cfg.d_cont

    temb = timestep_embedding(batch.t, M)
    dk = batch.desc_keep
    if batch.desc is not None:
        e_proj = np.asarray(batch.desc, dtype=np.float64) @ p["desc.w"] + p["desc.b"]
        e_desc = np.where(dk[:, None], e_proj, p["desc.null"])
    else:
        e_desc = np.broadcast_to(p["desc.null"], (B, M))
    u = np.concatenate([temb, e_desc], axis=1)
    h0 = z @ p["in.w"] + p["in.b"] + u @ p["cond.w"] + p["cond.b"]

    ck = batch.cont_keep
    C = np.broadcast_to(p["cont.null"], (B, N, D)).copy()
    enc = None
    if batch.tokens is not None and ck.any():
        uniq, inv = np.unique(np.asarray(batch.tokens), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        enc_cache: dict = {}
        H = durator.encode_content(p, uniq, cfg.n_cont_tokens_max, cache=enc_cache)
        idx = np.stack([durator.upsample_index(durator.predict_durations(p, h, N)) for h in H])
        Cu = np.take_along_axis(H, idx[:, :, None], axis=1)  # (U, N, D)
        C[ck] = Cu[inv[ck]]
        enc = dict(cache=enc_cache, inv=inv, idx=idx, U=len(uniq), L=uniq.shape[1])

    # keys/values are linear in C, so fold the projections onto the query
    # side and the pooled content instead of materializing (B, N, M) tensors
    scale = 1.0 / np.sqrt(M)
    q = h0 @ p["attn.q"]
    qk = q @ p["attn.k"].T  # (B, D)
    s = np.einsum("bnd,bd->bn", C, qk) * scale
    s -= s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    cbar = np.einsum("bn,bnd->bd", a, C)
    ctx = cbar @ p["attn.v"]
    h = h0 + ctx @ p["attn.o"]

    pre = []
    hs = [h]
    for l in range(cfg.layers):
        x = h @ p[f"trunk.{l}.w"] + p[f"trunk.{l}.b"]
        pre.append(x)
        h = _silu(x)
        hs.append(h)
    out = h @ p["out.w"] + p["out.b"]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations in forward pass")
    if cache is not None:
        cache.update(z=z, u=u, h0=h0, C=C, q=q, qk=qk, a=a, cbar=cbar, ctx=ctx, pre=pre, hs=hs, enc=enc, batch=batch)
    return out


def backward(p: dict, cfg: NetConfig, cache: dict, dout: np.ndarray) -> dict:
    """Gradients of ``sum(dout * forward(...))`` with respect to every parameter."""
    g = {k: np.zeros_like(v) for k, v in p.items()}
    batch = cache["batch"]
    hs, pre = cache["hs"], cache["pre"]
    M = cfg.d_model

    g["out.w"] += hs[-1].T @ dout
    g["out.b"] += dout.sum(0)
    dh = dout @ p["out.w"].T
    for l in reversed(range(cfg.layers)):
        dx = dh * _silu_grad(pre[l])
        g[f"trunk.{l}.w"] += hs[l].T @ dx
        g[f"trunk.{l}.b"] += dx.sum(0)
        dh = dx @ p[f"trunk.{l}.w"].T

    # cross-attention block, h = h0 + ctx Wo
    q, qk, a, C, cbar, ctx = (cache[k] for k in ("q", "qk", "a", "C", "cbar", "ctx"))
    scale = 1.0 / np.sqrt(M)
    D = C.shape[2]
    g["attn.o"] += ctx.T @ dh
    dctx = dh @ p["attn.o"].T
    g["attn.v"] += cbar.T @ dctx
    dcbar = dctx @ p["attn.v"].T
    da = np.einsum("bnd,bd->bn", C, dcbar)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
    dqk = np.einsum("bn,bnd->bd", ds, C)
    dC = a[:, :, None] * dcbar[:, None, :] + ds[:, :, None] * qk[:, None, :]
    g["attn.k"] += dqk.T @ q
    dq = dqk @ p["attn.k"]
    g["attn.q"] += cache["h0"].T @ dq
    dh0 = dh + dq @ p["attn.q"].T

    ck = batch.cont_keep
    g["cont.null"] += dC[~ck].sum(axis=(0, 1))
    enc = cache["enc"]
    if enc is not None:
        dCu = np.zeros((enc["U"],) + dC.shape[1:])
        np.add.at(dCu, enc["inv"][ck], dC[ck])
        dH = np.zeros((enc["U"], enc["L"], D))
        for i in range(enc["U"]):
            np.add.at(dH[i], enc["idx"][i], dCu[i])
        durator.encode_content_backward(p, enc["cache"], dH, g)

    g["in.w"] += cache["z"].T @ dh0
    g["in.b"] += dh0.sum(0)
    g["cond.w"] += cache["u"].T @ dh0
    g["cond.b"] += dh0.sum(0)
    de = (dh0 @ p["cond.w"].T)[:, M:]
    dk = batch.desc_keep
    g["desc.null"] += de[~dk].sum(0)
    if batch.desc is not None and dk.any():
        g["desc.w"] += np.asarray(batch.desc)[dk].T @ de[dk]
        g["desc.b"] += de[dk].sum(0)
    return g


def predict_noise(p: dict, cfg: NetConfig, z_t, t: int, c: ConditionPair = ConditionPair()) -> np.ndarray:
    """Forward pass for one latent ``(d,)`` or several ``(n, d)`` sharing ``c``."""
    z = np.asarray(z_t, dtype=np.float64)
    zz = np.atleast_2d(z)
    n = len(zz)
    desc = None if c.desc is None else np.broadcast_to(np.asarray(c.desc, dtype=np.float64), (n, cfg.d_desc))
    tokens = None if c.cont is None else np.broadcast_to(np.asarray(c.cont, dtype=np.int64), (n, len(c.cont)))
    out = forward(p, cfg, Batch(zz, np.full(n, t), desc, None, tokens, None))
    return out.reshape(z.shape)


class NetScore:
    """Adapter exposing a trained network as a sampler score function."""

    def __init__(self, params: dict, cfg: NetConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, z: np.ndarray, t: int, conds: ConditionPair) -> np.ndarray:
        return predict_noise(self.params, self.cfg, z, t, conds)


@dataclass
class TrainingSample:
    """Fully specified inputs of one loss evaluation (no randomness left)."""

    z0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    desc: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = None
    desc_keep: Optional[np.ndarray] = None
    cont_keep: Optional[np.ndarray] = None


def loss_and_grad(p: dict, cfg: NetConfig, s: NoiseSchedule, smp: TrainingSample, with_grad: bool = True):
    ab = s.alpha_bar[smp.t][:, None]
    z_t = np.sqrt(ab) * smp.z0 + np.sqrt(1.0 - ab) * smp.eps
    cache: dict = {}
    batch = Batch(z_t, smp.t, smp.desc, smp.desc_keep, smp.tokens, smp.cont_keep)
    out = forward(p, cfg, batch, cache)
    diff = out - smp.eps
    loss = float(np.mean(diff**2))
    if not with_grad:
        return loss, None
    return loss, backward(p, cfg, cache, 2.0 * diff / diff.size)


def draw_condition_masks(rng: np.random.Generator, n: int, dropout_p: float):
    """Independent keep-masks for the two conditions."""
    keep_desc = rng.random(n) >= dropout_p
    keep_cont = rng.random(n) >= dropout_p
    return keep_desc, keep_cont


@dataclass
class Adam:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, p: dict, g: dict) -> dict:
        self.step += 1
        b1c = 1.0 - self.beta1**self.step
        b2c = 1.0 - self.beta2**self.step
        new = {}
        for k, w in p.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g[k]
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g[k] ** 2
            self.m[k], self.v[k] = m, v
            new[k] = w - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return new


def training_step(
    p: dict,
    cfg: NetConfig,
    z0: np.ndarray,
    desc: Optional[np.ndarray],
    tokens: Optional[np.ndarray],
    s: NoiseSchedule,
    dropout_p: float,
    rng: np.random.Generator,
    opt: Adam,
    dump_dir: Optional[Path] = None,
):
    """One optimizer step on the noise-prediction loss.

    Draws ``t`` uniformly, Gaussian ``eps``, and drops each condition
    independently with probability ``dropout_p``.  Returns ``(loss, params)``;
    ``opt`` is updated in place.
    """
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError(f"dropout_p must lie in [0, 1], got {dropout_p}")
    B = len(z0)
    if B == 0:
        raise ValueError("empty batch")
    t = rng.integers(0, s.T, size=B)
    eps = rng.standard_normal(z0.shape)
    keep_desc, keep_cont = draw_condition_masks(rng, B, dropout_p)
    smp = TrainingSample(z0, t, eps, desc, tokens, keep_desc, keep_cont)
    loss, g = loss_and_grad(p, cfg, s, smp)
    new = opt.update(p, g) if np.isfinite(loss) else p
    if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in new.values()):
        bad = sorted(k for k, v in new.items() if not np.all(np.isfinite(v)))
        msg = f"training diverged at step {opt.step}: loss={loss}, non-finite tensors={bad}"
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            np.savez(dump_dir / "diverged.npz", **{f"param/{k}": v for k, v in p.items()}, z0=z0, t=t, eps=eps)
            msg += f"; state dumped to {dump_dir / 'diverged.npz'}"
        raise TrainingDivergedError(msg)
    return loss, new


def grad_check(
    p: dict,
    cfg: NetConfig,
    s: NoiseSchedule,
    smp: TrainingSample,
    h: float = 1e-5,
    grad_fn: Optional[Callable] = None,
):
    """Compare analytic gradients with central differences.

    Returns ``(max_rel_error, per_tensor)`` where the relative error of a
    tensor is ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`` in the 2-norm.
    ``grad_fn(p)`` overrides the analytic gradient (used for mutation tests).
    """
    if grad_fn is None:
        analytic = loss_and_grad(p, cfg, s, smp)[1]
    else:
        analytic = grad_fn(p)
    per = {}
    for k, w in p.items():
        num = np.zeros_like(w)
        flat = num.reshape(-1)
        for i in range(w.size):
            q = dict(p)
            wp = w.copy().reshape(-1)
            wp[i] += h
            q[k] = wp.reshape(w.shape)
            lp = loss_and_grad(q, cfg, s, smp, with_grad=False)[0]
            wp[i] -= 2 * h
            q[k] = wp.reshape(w.shape)
            lm = loss_and_grad(q, cfg, s, smp, with_grad=False)[0]
            flat[i] = (lp - lm) / (2 * h)
        a = analytic[k]
        per[k] = float(np.linalg.norm(a - num) / max(np.linalg.norm(a) + np.linalg.norm(num), 1e-12))
    return max(per.values()), per


def save_checkpoint(path, p: dict, cfg: NetConfig, meta: Optional[dict] = None, rng: Optional[np.random.Generator] = None, opt: Optional[Adam] = None) -> None:
    """Write params, config, RNG and optimizer state into one ``.npz`` file."""
    header = {
        "version": CHECKPOINT_VERSION,
        "net": asdict(cfg),
        "meta": meta or {},
        "rng": rng.bit_generator.state if rng is not None else None,
        "adam": None if opt is None else {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
    }
    arrays = {f"param/{k}": v for k, v in p.items()}
    if opt is not None:
        arrays.update({f"adam.m/{k}": np.asarray(v) for k, v in opt.m.items()})
        arrays.update({f"adam.v/{k}": np.asarray(v) for k, v in opt.v.items()})
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    params: dict
    cfg: NetConfig
    meta: dict
    rng: Optional[np.random.Generator]
    opt: Optional[Adam]


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
        m = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("adam.m/")}
        v = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("adam.v/")}
    rng = None
    if header["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    opt = None
    if header["adam"] is not None:
        opt = Adam(**header["adam"], m=m, v=v)
    return Checkpoint(params, NetConfig(**header["net"]), header["meta"], rng, opt)

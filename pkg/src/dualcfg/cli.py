"""Command-line entry point: ``dualcfg <command> --config run.cfg``.

Commands: ``curate``, ``train``, ``sample``, ``sweep``, ``eval``, ``oracle-check``.
Exit codes: 0 success, 1 input error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import experiment, metrics, svg
from .clients import ClientError, make_asr_client, resolve_endpoint
from .core import ConditionPair, GuidanceWeights, make_schedule, sample
from .datapipe.curate import curate, plan_mixing, read_manifest, write_records
from .datapipe.audio import read_wav, standardize, wav_bytes
from .oracle import OracleScore, ToyWorld, UnknownLabelError, verify_score_decomposition
from .scorenet import init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("dualcfg")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class InputError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def _out_dir(cfg: config_mod.RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config_mod.dump(cfg))
    return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _schedule(cfg):
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)


def _score_source(cfg, mode: str):
    """Score function, world and schedule for oracle or checkpoint mode."""
    if mode == "oracle":
        s = _schedule(cfg)
        world = cfg.world.build()
        return OracleScore(world, s), world, s
    if mode == "checkpoint":
        path = Path(cfg.paths.checkpoint)
        if not cfg.paths.checkpoint or not path.exists():
            raise InputError(f"checkpoint not found: {cfg.paths.checkpoint!r}")
        ck = load_checkpoint(path)
        world = ToyWorld.from_dict(ck.meta["world"])
        s = make_schedule(**ck.meta["schedule"])
        cond = experiment.ToyConditioner(world, ck.cfg)
        return experiment.LabeledNetScore(ck.params, ck.cfg, cond), world, s
    raise InputError(f"unknown mode {mode!r} (expected 'oracle' or 'checkpoint')")


def cmd_train(cfg: config_mod.RunConfig) -> dict:
    out = _out_dir(cfg)
    s = _schedule(cfg)
    world = cfg.world.build()
    net = dataclasses.replace(cfg.net, d=world.d)
    tc = cfg.train
    params = init_params(net)
    initial = experiment.heldout_loss(params, net, world, s, tc.eval_samples, cfg.seed, tc.dropout_p)

    def progress(step, loss):
        if tc.log_every and (step + 1) % tc.log_every == 0:
            log.info("step %d loss %.5f", step + 1, loss)

    res = experiment.train_on_world(
        world, net, s, tc.steps, tc.batch_size, tc.lr, tc.dropout_p, cfg.seed, params, progress
    )
    final = experiment.heldout_loss(res.params, net, world, s, tc.eval_samples, cfg.seed, tc.dropout_p)
    mse = experiment.mse_vs_oracle(res.params, net, world, s, tc.eval_samples, cfg.seed + 1)
    meta = {"world": world.to_dict(), "schedule": s.params(), "seed": cfg.seed, "train": dataclasses.asdict(tc)}
    save_checkpoint(out / "checkpoint.npz", res.params, net, meta, res.rng, res.opt)
    _write_csv(out / "loss.csv", ["step", "loss"], [(i + 1, v) for i, v in enumerate(res.losses)])
    k = max(1, len(res.losses) // 200)
    smooth = np.convolve(res.losses, np.ones(k) / k, mode="valid")[::k]
    (out / "loss.svg").write_text(
        svg.line_chart({"loss": (np.arange(len(smooth)) * k + k, smooth)}, "training loss", "step", "mse")
    )
    summary = {
        "initial_heldout_loss": initial,
        "final_heldout_loss": final,
        "loss_ratio": final / initial,
        "eps_mse_vs_oracle": mse,
        "eps_mse_bound": 0.1 * world.d,
    }
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_sample(cfg: config_mod.RunConfig) -> Path:
    out = _out_dir(cfg)
    sc = cfg.sample
    score, world, s = _score_source(cfg, sc.mode)
    desc = sc.desc or None
    cont = sc.cont or None
    for lab, check in ((desc, world.desc_index), (cont, world.cont_index)):
        if lab is not None:
            check(lab)
    g = GuidanceWeights(cfg.guidance.w_desc, cfg.guidance.w_cont)
    z = sample(score, s, sc.n_steps, g, ConditionPair(desc, cont), cfg.seed, n=sc.n_samples, d=world.d, eta=sc.eta)
    _write_csv(out / "samples.csv", [f"z{i}" for i in range(world.d)], z.tolist())
    meta = {
        "mean": z.mean(0).tolist(),
        "std": z.std(0).tolist(),
        "target_mean": world.conditional_mean(desc, cont).tolist(),
        "guidance": dataclasses.asdict(g),
    }
    _write_json(out / "sample_meta.json", meta)
    if sc.svg:
        (out / "samples.svg").write_text(svg.scatter(z, f"samples desc={desc} cont={cont}", "z0", "z1"))
    return out / "samples.csv"


def cmd_sweep(cfg: config_mod.RunConfig) -> Path:
    out = _out_dir(cfg)
    sw = cfg.sweep
    score, world, s = _score_source(cfg, sw.mode)
    grid = [GuidanceWeights(wd, wc) for wd, wc in itertools.product(sw.w_desc, sw.w_cont)]
    st = experiment.SweepSettings(sw.desc, sw.cont, sw.n_samples, sw.n_steps, cfg.seed)
    rows = experiment.run_sweep(score, world, s, grid, st, sw.workers)
    cols = experiment.SWEEP_COLUMNS
    _write_csv(out / "sweep.csv", cols, [[r[c] for c in cols] for r in rows])
    series = {}
    for wd in sw.w_desc:
        sel = [r for r in rows if r["w_desc"] == wd]
        series[f"w_desc={wd:g}"] = ([r["w_cont"] for r in sel], [r["cont_proj"] for r in sel])
    (out / "sweep.svg").write_text(svg.line_chart(series, "content projection", "w_cont", "projection"))
    return out / "sweep.csv"


def _client(role: str, cfg):
    endpoint = resolve_endpoint(role, getattr(cfg.clients, role))
    if not endpoint:
        return _Unconfigured(role)
    return make_asr_client(endpoint, cfg.clients.timeout_s, cfg.clients.retries)


class _Unconfigured:
    def __init__(self, role):
        self.role = role

    def transcribe(self, wav, segment_id):
        raise ClientError(f"no endpoint configured for {self.role}")


def cmd_curate(cfg: config_mod.RunConfig) -> dict:
    out = _out_dir(cfg)
    if not cfg.paths.manifest:
        raise InputError("paths.manifest is required")
    manifest = Path(cfg.paths.manifest)
    if not manifest.exists():
        raise InputError(f"manifest not found: {manifest}")
    entries = read_manifest(manifest)
    base = Path(cfg.paths.base_dir) if cfg.paths.base_dir else manifest.parent
    res = curate(
        entries, _client("asr_primary", cfg), _client("asr_secondary", cfg), cfg.rules, base, cfg.clients.workers
    )
    records = res.records
    if cfg.curate.mix:
        records = plan_mixing(records, cfg.rules, cfg.curate.mix_seed)
    write_records(out / "manifest.jsonl", records)
    summary = res.summary()
    _write_json(out / "summary.json", summary)
    return summary


def _load_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file not found: {path}")
    if p.suffix == ".npy":
        return np.load(p)
    return np.loadtxt(p, delimiter=",", ndmin=2)


def cmd_eval(cfg: config_mod.RunConfig) -> dict:
    out = _out_dir(cfg)
    ev = cfg.eval
    result: dict = {}
    records = []
    if ev.transcripts:
        records = read_manifest(ev.transcripts)
    if ev.audio_manifest:
        base = Path(ev.audio_manifest).parent
        prim, sec = _client("asr_primary", cfg), _client("asr_secondary", cfg)
        for e in read_manifest(ev.audio_manifest):
            wav = wav_bytes(standardize(read_wav(base / e["path"])))
            rid = str(e["id"])
            records.append(
                {"id": rid, "ref": e["ref"], "hyp_primary": prim.transcribe(wav, rid).text, "hyp_secondary": sec.transcribe(wav, rid).text}
            )
    if records:
        refs = [r["ref"] for r in records]
        hyp_p = [r["hyp_primary"] for r in records]
        hyp_s = [r["hyp_secondary"] for r in records]
        result["wer"] = metrics.corpus_wer(refs, hyp_s)
        result["delta_wer"] = metrics.corpus_wer(hyp_s, hyp_p)
        result["n_utterances"] = len(records)
    if ev.real_embeddings or ev.gen_embeddings:
        a = metrics.EmbeddingSet.fit(_load_matrix(ev.real_embeddings))
        b = metrics.EmbeddingSet.fit(_load_matrix(ev.gen_embeddings))
        result["frechet_distance"] = metrics.frechet_distance(a, b)
    if ev.real_probs or ev.gen_probs:
        p, q = _load_matrix(ev.real_probs), _load_matrix(ev.gen_probs)
        if p.shape != q.shape:
            raise InputError(f"probability tables differ in shape: {p.shape} vs {q.shape}")
        result["kl"] = float(np.mean([metrics.kl_divergence(pi, qi) for pi, qi in zip(p, q)]))
    if ev.text_embeddings or ev.audio_embeddings:
        t, a = _load_matrix(ev.text_embeddings), _load_matrix(ev.audio_embeddings)
        if t.shape != a.shape:
            raise InputError("text and audio embedding tables differ in shape")
        result["cosine_score"] = float(np.mean([metrics.embedding_cosine(x, y) for x, y in zip(t, a)]))
    if not result:
        raise InputError("nothing to evaluate: set eval.transcripts, eval.audio_manifest or embedding/probability files")
    _write_json(out / "metrics.json", result)
    return result


def cmd_oracle_check(cfg: config_mod.RunConfig):
    out = _out_dir(cfg)
    world = cfg.world.build()
    report = verify_score_decomposition(world, _schedule(cfg), cfg.oracle.samples, cfg.oracle.tol, cfg.seed)
    _write_json(out / "oracle_report.json", report.to_dict())
    print(report.summary())
    if not report.passed:
        raise CheckFailed(report.summary())
    return report


COMMANDS = {
    "curate": cmd_curate,
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualcfg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "sweep"):
            p.add_argument("--mode", choices=["oracle", "checkpoint"])
        if name in ("sample", "sweep"):
            p.add_argument("--checkpoint")
        if name == "train":
            p.add_argument("--steps", type=int)
        if name == "sample":
            p.add_argument("--w-desc", type=float)
            p.add_argument("--w-cont", type=float)
        if name == "curate":
            p.add_argument("--manifest")
    return ap


def _overrides(args) -> dict:
    ov = dict(config_mod.parse_override(s) for s in args.set)
    flag_keys = {
        "seed": "seed",
        "out": "paths.out",
        "checkpoint": "paths.checkpoint",
        "steps": "train.steps",
        "w_desc": "guidance.w_desc",
        "w_cont": "guidance.w_cont",
        "manifest": "paths.manifest",
    }
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            ov[key] = v
    if getattr(args, "mode", None):
        ov[f"{args.command}.mode"] = args.mode
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_mod.load(args.config, _overrides(args))
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except (config_mod.ConfigError, InputError, UnknownLabelError, FileNotFoundError) as exc:
        code = EXIT_INPUT
        err = exc
    except Exception as exc:  # reported, not re-raised
        code = EXIT_RUNTIME
        err = exc
    report = {"command": args.command, "error": type(err).__name__, "message": str(err), "exit_code": code}
    print(json.dumps(report), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

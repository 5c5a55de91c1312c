import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

import curation_fixture
from dualcfg import cli, config
from dualcfg.clients import (
    ClientError,
    JSONASRClient,
    SubprocessBackend,
    SyntheticEmbedder,
    make_asr_client,
    make_embedder,
    resolve_endpoint,
)
from dualcfg.datapipe.audio import AudioSegment, write_wav

# config files


def test_defaults_and_overrides(tmp_path):
    cfg = config.load(None, {"seed": 4, "train.lr": 1, "sweep.w_cont": [1, 2]})
    assert cfg.seed == 4 and cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.sweep.w_cont == (1, 2)
    assert cfg.world.sigma == 0.3 and cfg.rules.english_prob_min == 0.5


def test_file_with_include_and_comments(tmp_path):
    (tmp_path / "base.cfg").write_text("seed = 1\ntrain.steps = 10  # short\n")
    (tmp_path / "run.cfg").write_text('# run\ninclude "base.cfg"\ntrain.steps = 20\nsample.desc = "d1#x"\n')
    cfg = config.load(tmp_path / "run.cfg")
    assert cfg.seed == 1 and cfg.train.steps == 20 and cfg.sample.desc == "d1#x"


@pytest.mark.parametrize(
    "text",
    ["nonsense\n", "bogus.key = 1\n", "train.bogus = 1\n", "train.steps = 'ten'\n", "sample.desc = d1\n", "seed = 1.5\n"],
)
def test_bad_config_lines(tmp_path, text):
    (tmp_path / "bad.cfg").write_text(text)
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "bad.cfg")


def test_include_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text('include "b.cfg"\n')
    (tmp_path / "b.cfg").write_text('include "a.cfg"\n')
    with pytest.raises(config.ConfigError, match="cycle"):
        config.load(tmp_path / "a.cfg")


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(config.ConfigError):
        config.load(None, {"net.d_model": 0})


def test_dump_round_trip(tmp_path):
    cfg = config.load(None, {"seed": 9, "sweep.w_desc": [0.0, 5.0], "clients.asr_primary": "replay:x.json"})
    (tmp_path / "d.cfg").write_text(config.dump(cfg))
    assert config.load(tmp_path / "d.cfg") == cfg


def test_parse_override():
    assert config.parse_override("train.lr=0.5") == ("train.lr", 0.5)
    assert config.parse_override("sample.desc=d2") == ("sample.desc", "d2")
    with pytest.raises(config.ConfigError):
        config.parse_override("novalue")


# clients


def test_replay_backend_and_errors(tmp_path):
    table = {"a": {"text": "hi", "language_prob": 0.7}, "b": {"error": "broken"}, "c": {"nope": 1}}
    path = tmp_path / "r.json"
    path.write_text(json.dumps(table))
    client = make_asr_client(f"replay:{path}")
    r = client.transcribe(b"", "a")
    assert (r.text, r.language_prob) == ("hi", 0.7)
    for key in ("b", "c", "missing"):
        with pytest.raises(ClientError):
            client.transcribe(b"", key)


def test_subprocess_backend(tmp_path):
    script = tmp_path / "asr.py"
    script.write_text(
        "import json, sys, base64\n"
        "req = json.load(sys.stdin)\n"
        "n = len(base64.b64decode(req['wav_b64']))\n"
        "print(json.dumps({'text': req['id'] + ' ' + str(n), 'language_prob': 0.9}))\n"
    )
    client = make_asr_client(f"cmd:{sys.executable} {script}")
    r = client.transcribe(b"abcd", "seg")
    assert r.text == "seg 4" and r.language_prob == 0.9


def test_subprocess_failure_is_client_error(tmp_path):
    backend = SubprocessBackend(f"{sys.executable} -c 'import sys; sys.exit(3)'", retries=1)
    with pytest.raises(ClientError, match="2 attempts"):
        JSONASRClient(backend).transcribe(b"", "x")


def test_http_backend():
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            out = json.dumps({"text": f"got {body['id']}", "language_prob": 1.0}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        client = make_asr_client(f"http://127.0.0.1:{server.server_port}/asr")
        assert client.transcribe(b"x", "k1").text == "got k1"
    finally:
        server.shutdown()


def test_endpoint_env_override(monkeypatch):
    assert resolve_endpoint("asr_primary", "replay:a.json") == "replay:a.json"
    monkeypatch.setenv("DUALCFG_ASR_PRIMARY", "cmd:echo")
    assert resolve_endpoint("asr_primary", "replay:a.json") == "cmd:echo"
    with pytest.raises(ValueError):
        make_asr_client("ftp://nowhere")


def test_synthetic_embedder():
    e = make_embedder("synthetic:8")
    a, b = e.embed_text("rain"), e.embed_text("rain")
    assert a.shape == (8,) and np.linalg.norm(a) == pytest.approx(1.0)
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, e.embed_text("wind"))
    assert not np.allclose(a, SyntheticEmbedder(8, "other").embed_text("rain"))


# command line


def test_oracle_check_command(tmp_path, capsys):
    assert cli.main(["oracle-check", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "< 1e-09, PASS" in out and out.startswith("max deviation")
    report = json.loads((tmp_path / "oracle_report.json").read_text())
    assert report["passed"] and report["max_deviation"] < 1e-9
    assert (tmp_path / "config.cfg").exists()


def test_oracle_check_fails_on_coupled_world(tmp_path, capsys):
    code = cli.main(["oracle-check", "--out", str(tmp_path), "--set", "world.coupling=1.0", "--set", "oracle.samples=50"])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CheckFailed" and err["exit_code"] == 2


def test_sample_command_deterministic(tmp_path):
    args = ["sample", "--set", "sample.n_samples=50", "--set", "sample.n_steps=20", "--seed", "3"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("samples.csv", "samples.svg", "sample_meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    z = np.loadtxt(tmp_path / "a" / "samples.csv", delimiter=",", skiprows=1)
    assert z.shape == (50, 2)
    assert cli.main(args + ["--seed", "4", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "samples.csv").read_bytes() != (tmp_path / "a" / "samples.csv").read_bytes()


def test_input_errors_exit_one(tmp_path, capsys):
    assert cli.main(["sample", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert cli.main(["sample", "--out", str(tmp_path), "--set", "sample.desc=zz"]) == 1
    assert cli.main(["sweep", "--mode", "checkpoint", "--out", str(tmp_path)]) == 1
    assert cli.main(["curate", "--out", str(tmp_path)]) == 1
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1
    lines = [json.loads(x) for x in capsys.readouterr().err.strip().splitlines()]
    assert [x["exit_code"] for x in lines] == [1] * 5
    assert lines[0]["error"] == "ConfigError"


def test_train_then_sample_from_checkpoint(tmp_path):
    train_dir = tmp_path / "train"
    code = cli.main(
        ["train", "--out", str(train_dir), "--steps", "30", "--set", "train.eval_samples=200",
         "--set", "train.batch_size=32", "--set", "net.d_model=16"]
    )
    assert code == 0
    summary = json.loads((train_dir / "train_summary.json").read_text())
    assert set(summary["eps_mse_vs_oracle"]) == {"full", "desc_only", "cont_only", "null"}
    assert len((train_dir / "loss.csv").read_text().splitlines()) == 31
    assert (train_dir / "loss.svg").read_text().startswith("<svg")
    args = ["sample", "--mode", "checkpoint", "--checkpoint", str(train_dir / "checkpoint.npz"),
            "--set", "sample.n_samples=20", "--set", "sample.n_steps=10"]
    assert cli.main(args + ["--out", str(tmp_path / "s1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "s2")]) == 0
    assert (tmp_path / "s1" / "samples.csv").read_bytes() == (tmp_path / "s2" / "samples.csv").read_bytes()


def test_sweep_command(tmp_path):
    args = ["sweep", "--out", str(tmp_path), "--set", "sweep.n_samples=100", "--set", "sweep.n_steps=10",
            "--set", "sweep.w_desc=[0.0, 5.0]", "--set", "sweep.w_cont=[0.0, 9.0]"]
    assert cli.main(args) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "w_desc,w_cont,fd,kl_desc,desc_align,cont_error,cont_proj"
    assert [tuple(l.split(",")[:2]) for l in lines[1:]] == [("0.0", "0.0"), ("0.0", "9.0"), ("5.0", "0.0"), ("5.0", "9.0")]
    assert (tmp_path / "sweep.svg").exists()


def test_curate_command_on_fixture(tmp_path):
    paths = curation_fixture.build(tmp_path)
    out = tmp_path / "out"
    code = cli.main(
        ["curate", "--manifest", str(paths["manifest"]), "--out", str(out),
         "--set", f"clients.asr_primary=replay:{paths['primary']}",
         "--set", f"clients.asr_secondary=replay:{paths['secondary']}"]
    )
    assert code == 0
    recs = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert {r["id"]: r["label"] for r in recs} == {k: v[0] for k, v in curation_fixture.EXPECTED.items()}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["counts"] == {"SPEECH": 9, "NON_SPEECH": 7, "UNRESOLVED": 4}


def test_curate_without_endpoints_marks_unresolved(tmp_path, monkeypatch):
    monkeypatch.delenv("DUALCFG_ASR_PRIMARY", raising=False)
    paths = curation_fixture.build(tmp_path)
    assert cli.main(["curate", "--manifest", str(paths["manifest"]), "--out", str(tmp_path / "o")]) == 0
    recs = [json.loads(l) for l in (tmp_path / "o" / "manifest.jsonl").read_text().splitlines()]
    # fifteen records need a recognizer and r19 has no audio file
    assert sum(r["label"] == "UNRESOLVED" for r in recs) == 16


def test_eval_command_hand_computed(tmp_path):
    rows = [
        {"id": "u1", "ref": "a b c d", "hyp_primary": "a b c d", "hyp_secondary": "a x c d"},
        {"id": "u2", "ref": "e f", "hyp_primary": "e", "hyp_secondary": "e f"},
    ]
    (tmp_path / "t.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    np.save(tmp_path / "real.npy", np.array([[0.0], [2.0]]))
    np.save(tmp_path / "gen.npy", np.array([[1.0], [5.0]]))
    np.savetxt(tmp_path / "p.csv", [[1.0, 0.0], [0.5, 0.5]], delimiter=",")
    np.savetxt(tmp_path / "q.csv", [[0.5, 0.5], [0.5, 0.5]], delimiter=",")
    np.savetxt(tmp_path / "te.csv", [[1.0, 0.0], [1.0, 1.0]], delimiter=",")
    np.savetxt(tmp_path / "ae.csv", [[0.0, 1.0], [1.0, 1.0]], delimiter=",")
    sets = {
        "eval.transcripts": "t.jsonl", "eval.real_embeddings": "real.npy", "eval.gen_embeddings": "gen.npy",
        "eval.real_probs": "p.csv", "eval.gen_probs": "q.csv",
        "eval.text_embeddings": "te.csv", "eval.audio_embeddings": "ae.csv",
    }
    args = ["eval", "--out", str(tmp_path / "o")]
    for k, v in sets.items():
        args += ["--set", f"{k}={tmp_path / v}"]
    assert cli.main(args) == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert m["wer"] == pytest.approx(1 / 6)  # one substitution over six reference words
    assert m["delta_wer"] == pytest.approx(2 / 6)  # u1 one substitution, u2 one deletion, six secondary words
    # means 1 and 3, variances 2 and 8 -> (1-3)^2 + (sqrt2 - sqrt8)^2 = 4 + 2
    assert m["frechet_distance"] == pytest.approx(6.0)
    assert m["kl"] == pytest.approx(np.log(2) / 2, abs=1e-8)
    assert m["cosine_score"] == pytest.approx(0.5)


def test_eval_from_audio_with_replayed_asr(tmp_path):
    write_wav(tmp_path / "g1.wav", AudioSegment(np.zeros(800) + 0.1, 8000))
    (tmp_path / "audio.jsonl").write_text(json.dumps({"id": "g1", "path": "g1.wav", "ref": "open the door"}) + "\n")
    (tmp_path / "p.json").write_text(json.dumps({"g1": {"text": "open a door"}}))
    (tmp_path / "s.json").write_text(json.dumps({"g1": {"text": "open the door please", "language_prob": 0.9}}))
    code = cli.main(
        ["eval", "--out", str(tmp_path / "o"), "--set", f"eval.audio_manifest={tmp_path / 'audio.jsonl'}",
         "--set", f"clients.asr_primary=replay:{tmp_path / 'p.json'}",
         "--set", f"clients.asr_secondary=replay:{tmp_path / 's.json'}"]
    )
    assert code == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert m["wer"] == pytest.approx(1 / 3)  # secondary adds "please"
    assert m["delta_wer"] == pytest.approx(2 / 4)  # primary vs secondary: one substitution, one deletion

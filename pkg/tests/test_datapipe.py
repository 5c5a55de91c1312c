import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import curation_fixture
from dualcfg.clients import ASRResult, JSONASRClient, ReplayBackend
import dualcfg.datapipe.curate as curate
from dualcfg.datapipe.audio import (
    TARGET_SAMPLES,
    AudioSegment,
    EmptyAudioError,
    SilentNoiseError,
    crop_or_pad,
    mix_snr,
    noise_gain,
    read_wav,
    rms,
    snr_db,
    standardize,
    write_wav,
)
from dualcfg.datapipe.curate import CurationRules, Label, SegmentRecord, classify_segment, classify_transcripts


def tone(seconds, rate=16_000, freq=220.0):
    t = np.arange(int(seconds * rate)) / rate
    return AudioSegment(0.5 * np.sin(2 * np.pi * freq * t), rate, "x")


def test_standardize_truncates_long_input():
    seg = tone(12)
    out = standardize(seg)
    assert len(out.samples) == TARGET_SAMPLES
    np.testing.assert_array_equal(out.samples, seg.samples[:TARGET_SAMPLES])


def test_standardize_pads_short_input():
    out = standardize(tone(4))
    assert len(out.samples) == TARGET_SAMPLES
    assert np.all(out.samples[64_000:] == 0)
    assert np.any(out.samples[:64_000] != 0)


def test_standardize_identity_and_idempotent():
    seg = tone(10)
    once = standardize(seg)
    np.testing.assert_array_equal(once.samples, seg.samples)
    assert standardize(once).samples.tobytes() == once.samples.tobytes()


def test_standardize_resamples():
    out = standardize(tone(2, rate=44_100))
    assert out.rate == 16_000 and len(out.samples) == TARGET_SAMPLES
    # a 220 Hz tone keeps its amplitude through the polyphase filter
    assert rms(out.samples[1000:31_000]) == pytest.approx(0.5 / np.sqrt(2), rel=1e-2)


def test_standardize_empty():
    with pytest.raises(EmptyAudioError):
        standardize(AudioSegment(np.zeros(0), 16_000))


def test_mix_gain_unity_for_equal_rms():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= rms(s) / rms(n)
    assert noise_gain(s, n, 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("target", [0.0, 4.0, 10.0, 20.0])
def test_mix_reaches_target_snr(target):
    rng = np.random.default_rng(1)
    s = standardize(tone(10))
    n = AudioSegment(rng.standard_normal(TARGET_SAMPLES) * 0.3, 16_000)
    mixed = mix_snr(s, n, target)
    added = mixed.samples - s.samples
    assert abs(snr_db(s.samples, added) - target) < 1e-6
    if target == 20.0:
        assert rms(s.samples) ** 2 / rms(added) ** 2 == pytest.approx(100.0)


def test_mix_errors():
    s = standardize(tone(10))
    with pytest.raises(SilentNoiseError):
        mix_snr(s, AudioSegment(np.zeros(TARGET_SAMPLES), 16_000), 5)
    with pytest.raises(ValueError):
        mix_snr(s, AudioSegment(np.ones(10), 16_000), 5)


def test_crop_or_pad():
    rng = np.random.default_rng(2)
    long = AudioSegment(np.arange(20.0), 16_000)
    cut = crop_or_pad(long, rng, 5)
    assert len(cut.samples) == 5 and np.all(np.diff(cut.samples) == 1)
    short = crop_or_pad(AudioSegment(np.ones(3), 16_000), rng, 5)
    np.testing.assert_array_equal(short.samples, [1, 1, 1, 0, 0])


def test_wav_round_trip(tmp_path):
    x = np.round(np.linspace(-0.5, 0.5, 101) * 32768) / 32768
    write_wav(tmp_path / "a.wav", AudioSegment(x, 22_050))
    seg = read_wav(tmp_path / "a.wav")
    assert seg.rate == 22_050
    np.testing.assert_array_equal(seg.samples, x)


@given(st.floats(4.0, 20.0))
@settings(max_examples=30, deadline=None)
def test_mix_snr_property(target):
    rng = np.random.default_rng(3)
    s = AudioSegment(rng.standard_normal(4000), 16_000)
    n = AudioSegment(rng.uniform(-1, 1, 4000), 16_000)
    assert abs(snr_db(s.samples, mix_snr(s, n, target).samples - s.samples) - target) < 0.01


# classification rules


def R(text, prob=None):
    return ASRResult(text, prob)


def test_rule_accepts_both_thresholds():
    # secondary five words, primary one substitution: cross-WER 0.2
    label, prov, cross = classify_transcripts(R("a b c d x"), R("a b c d e", 0.9))
    assert label is Label.SPEECH and cross == pytest.approx(0.2)


def test_rule_strict_language_boundary():
    assert classify_transcripts(R("hi there"), R("hi there", 0.5))[0] is Label.NON_SPEECH
    assert classify_transcripts(R("hi there"), R("hi there", 0.5000001))[0] is Label.SPEECH


def test_rule_strict_cross_wer_boundary():
    label, prov, cross = classify_transcripts(R("a c"), R("a b", 0.99))
    assert cross == 0.5 and label is Label.NON_SPEECH and prov == "cross_wer_reject"


def test_rule_identical_transcripts():
    label, _, cross = classify_transcripts(R("exactly this"), R("exactly this", 1.0))
    assert label is Label.SPEECH and cross == 0.0


def test_rule_primary_silence_skips_secondary():
    assert classify_transcripts(R("  ...  "), None)[0] is Label.NON_SPEECH


def test_classify_segment_marks_client_failures():
    seg = tone(1)
    good = JSONASRClient(ReplayBackend({"s": {"text": "fine words"}}))
    bad = JSONASRClient(ReplayBackend({"s": {"error": "down"}}))
    rec = classify_segment(seg, good, bad, "s")
    assert rec.label is Label.UNRESOLVED and "down" in rec.error
    ok = classify_segment(seg, good, JSONASRClient(ReplayBackend({"s": {"text": "fine words", "language_prob": 0.9}})), "s")
    assert ok.label is Label.SPEECH and ok.text_cont == "fine words"


def test_record_json_round_trip():
    rec = SegmentRecord("x", Label.SPEECH, "commonvoice", "a.wav", "hi", "source_speech", mix={"noise_id": "n", "snr_db": 5.0})
    back = SegmentRecord.from_json(rec.to_json())
    assert back == rec
    assert json.loads(rec.to_json())["v"] == 1
    with pytest.raises(ValueError):
        SegmentRecord("y", Label.SPEECH)


def test_empty_manifest():
    res = curate.curate([], None, None)
    assert res.records == [] and all(v == 0 for v in res.counts.values())


def _run_fixture(tmp_path, workers=1, paths=None):
    paths = paths or curation_fixture.build(tmp_path)
    prim = ReplayBackend(str(paths["primary"]))
    sec = ReplayBackend(str(paths["secondary"]))
    entries = curate.read_manifest(paths["manifest"])
    res = curate.curate(entries, JSONASRClient(prim), JSONASRClient(sec), CurationRules(), tmp_path, workers)
    return res, prim, sec


def test_fixture_labels_match_hand_derivation(tmp_path):
    res, prim, sec = _run_fixture(tmp_path)
    got = {r.id: (r.label.value, r.provenance, r.text_cont) for r in res.records}
    assert got == curation_fixture.EXPECTED
    assert [r.id for r in res.records] == list(curation_fixture.RECORDS)
    for rid, cross in curation_fixture.EXPECTED_CROSS.items():
        assert next(r for r in res.records if r.id == rid).cross_wer == pytest.approx(cross)
    assert res.counts == {"SPEECH": 9, "NON_SPEECH": 7, "UNRESOLVED": 4}
    assert {e["id"] for e in res.errors} == {"r14", "r15", "r19"}
    # recognizers are consulted only where the rules need them
    assert prim.calls == sum(v[2] is not None for v in curation_fixture.RECORDS.values())
    assert sec.calls == sum(v[3] is not None for v in curation_fixture.RECORDS.values())


def test_fixture_threaded_matches_serial(tmp_path):
    paths = curation_fixture.build(tmp_path)
    a, _, _ = _run_fixture(tmp_path, paths=paths)
    b, _, _ = _run_fixture(tmp_path, workers=4, paths=paths)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]


def test_mixing_plan(tmp_path):
    res, _, _ = _run_fixture(tmp_path)
    planned = curate.plan_mixing(res.records, CurationRules(mix_prob=1.0), seed=0)
    for r in planned:
        if r.mix is not None:
            assert r.source == "commonvoice" and r.label is Label.SPEECH
            assert 4.0 <= r.mix["snr_db"] <= 20.0
            assert r.mix["noise_id"] in ("r01", "r02")
    assert {r.id for r in planned if r.mix} == {"r05", "r20"}
    none = curate.plan_mixing(res.records, CurationRules(mix_prob=0.0), seed=0)
    assert all(r.mix is None for r in none)


def test_mixing_probability_and_snr_range():
    recs = [SegmentRecord(f"s{i}", Label.SPEECH, "commonvoice", "p", "t") for i in range(4000)]
    recs.append(SegmentRecord("n", Label.NON_SPEECH, "demand", "n.wav"))
    planned = curate.plan_mixing(recs, CurationRules(), seed=1)
    mixed = [r.mix["snr_db"] for r in planned if r.mix]
    assert abs(len(mixed) / 4000 - 0.5) < 3 * np.sqrt(0.25 / 4000)
    assert min(mixed) >= 4 and max(mixed) <= 20
    assert abs(np.mean(mixed) - 12) < 3 * (16 / np.sqrt(12)) / np.sqrt(len(mixed))


def test_render_mix():
    rng = np.random.default_rng(4)
    speech = tone(3)
    noise = AudioSegment(rng.standard_normal(8000 * 15) * 0.1, 8000)
    out = curate.render_mix(speech, noise, 10.0, rng)
    base = standardize(speech).samples
    assert len(out.samples) == TARGET_SAMPLES
    assert abs(snr_db(base, out.samples - base) - 10.0) < 0.01

"""Speech / non-speech allocation of raw clips and the JSONL manifest driver.

Decision rules, in order:

1. sources listed as non-speech (e.g. DEMAND) -> NON_SPEECH, no ASR;
2. clips shorter than 10 s that ship a transcript -> SPEECH with that text;
3. sources listed as speech (CommonVoice, VoxCeleb) -> SPEECH, transcript from
   the primary ASR on the first 10 s;
4. everything else goes through both recognizers: the primary transcript must
   contain words, the secondary's English probability must exceed 0.5 and the
   WER of the primary transcript against the secondary one must be below 0.5.

ASR failures never drop a record; it is emitted as UNRESOLVED with the error.
"""
from __future__ import annotations

import enum
import json
import logging
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..clients import ASRClient, ASRResult
from ..metrics import delta_wer, normalize
from .audio import (
    AudioSegment,
    crop_or_pad,
    mix_snr,
    read_wav,
    resample,
    standardize,
    wav_bytes,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class Label(str, enum.Enum):
    SPEECH = "SPEECH"
    NON_SPEECH = "NON_SPEECH"
    UNRESOLVED = "UNRESOLVED"


@dataclass(frozen=True)
class CurationRules:
    english_prob_min: float = 0.5  # strictly greater than
    cross_wer_max: float = 0.5  # strictly less than
    transcript_max_s: float = 10.0  # provided transcripts used below this duration
    speech_sources: tuple = ("commonvoice", "voxceleb")
    nonspeech_sources: tuple = ("demand",)
    mix_sources: tuple = ("commonvoice",)
    mix_prob: float = 0.5
    snr_low: float = 4.0
    snr_high: float = 20.0


@dataclass
class SegmentRecord:
    id: str
    label: Label
    source: str = ""
    path: str = ""
    text_cont: Optional[str] = None
    provenance: str = ""
    english_prob: Optional[float] = None
    cross_wer: Optional[float] = None
    mix: Optional[dict] = None
    error: Optional[str] = None

    def __post_init__(self):
        self.label = Label(self.label)
        if self.label is Label.SPEECH and self.text_cont is None:
            raise ValueError(f"speech record {self.id} has no transcript")

    def to_json(self) -> str:
        d = asdict(self)
        d["label"] = self.label.value
        return json.dumps({"v": MANIFEST_VERSION, **d}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SegmentRecord":
        d = json.loads(line)
        if d.pop("v", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ValueError("unsupported manifest version")
        return cls(**d)


def classify_transcripts(primary: ASRResult, secondary: Optional[ASRResult], rules: CurationRules = CurationRules()):
    """Pure decision on recorded ASR outputs.

    Returns ``(label, provenance, cross_wer)``.  ``secondary`` is only
    consulted when the primary transcript contains words.
    """
    if not normalize(primary.text):
        return Label.NON_SPEECH, "primary_no_speech", None
    if secondary is None:
        return Label.UNRESOLVED, "secondary_missing", None
    if secondary.language_prob is None:
        return Label.UNRESOLVED, "language_prob_missing", None
    if not normalize(secondary.text):
        return Label.NON_SPEECH, "secondary_no_speech", None
    cross = delta_wer(primary.text, secondary.text)
    if not secondary.language_prob > rules.english_prob_min:
        return Label.NON_SPEECH, "language_reject", cross
    if not cross < rules.cross_wer_max:
        return Label.NON_SPEECH, "cross_wer_reject", cross
    return Label.SPEECH, "dual_asr_accept", cross


def classify_segment(
    seg: AudioSegment,
    asr_primary: ASRClient,
    asr_secondary: ASRClient,
    segment_id: str,
    rules: CurationRules = CurationRules(),
) -> SegmentRecord:
    """Run both recognizers on the first 10 s of ``seg`` and apply the rules."""
    wav = wav_bytes(standardize(seg))
    try:
        primary = asr_primary.transcribe(wav, segment_id)
        secondary = None
        if normalize(primary.text):
            secondary = asr_secondary.transcribe(wav, segment_id)
    except Exception as exc:  # client failures are data, not crashes
        return SegmentRecord(segment_id, Label.UNRESOLVED, seg.source, provenance="asr_error", error=str(exc))
    label, prov, cross = classify_transcripts(primary, secondary, rules)
    return SegmentRecord(
        segment_id,
        label,
        seg.source,
        text_cont=primary.text if label is Label.SPEECH else None,
        provenance=prov,
        english_prob=None if secondary is None else secondary.language_prob,
        cross_wer=cross,
    )


def _wav_duration(path: Path) -> float:
    with wave.open(str(path), "rb") as wf:
        return wf.getnframes() / wf.getframerate()


def _process(entry: dict, base: Path, rules: CurationRules, asr_primary, asr_secondary) -> SegmentRecord:
    rid = str(entry["id"])
    source = str(entry.get("source", "")).lower()
    rel = str(entry.get("path", ""))
    try:
        if source in rules.nonspeech_sources:
            return SegmentRecord(rid, Label.NON_SPEECH, source, rel, provenance="source_nonspeech")
        path = base / rel
        transcript = entry.get("transcript")
        if transcript is not None:
            duration = entry.get("duration_s")
            duration = _wav_duration(path) if duration is None else float(duration)
            if duration < rules.transcript_max_s:
                return SegmentRecord(rid, Label.SPEECH, source, rel, text_cont=str(transcript), provenance="provided_transcript")
        seg = read_wav(path, source)
        if source in rules.speech_sources:
            wav = wav_bytes(standardize(seg))
            primary = asr_primary.transcribe(wav, rid)
            return SegmentRecord(rid, Label.SPEECH, source, rel, text_cont=primary.text, provenance="source_speech")
        rec = classify_segment(seg, asr_primary, asr_secondary, rid, rules)
        return replace(rec, path=rel)
    except Exception as exc:
        log.warning("record %s failed: %s", rid, exc)
        return SegmentRecord(rid, Label.UNRESOLVED, source, rel, provenance="error", error=f"{type(exc).__name__}: {exc}")


def read_manifest(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class CurationResult:
    records: list
    counts: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"v": MANIFEST_VERSION, "total": len(self.records), "counts": self.counts, "errors": self.errors}


def curate(
    entries: Iterable[dict],
    asr_primary: ASRClient,
    asr_secondary: ASRClient,
    rules: CurationRules = CurationRules(),
    base_dir=".",
    workers: int = 1,
    out_path=None,
) -> CurationResult:
    """Label every manifest entry; output order follows input order."""
    entries = list(entries)
    base = Path(base_dir)

    def work(e):
        return _process(e, base, rules, asr_primary, asr_secondary)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(work, entries))
    else:
        records = [work(e) for e in entries]
    counts = {lab.value: sum(r.label is lab for r in records) for lab in Label}
    errors = [{"id": r.id, "error": r.error} for r in records if r.error]
    if out_path is not None:
        write_records(out_path, records)
    return CurationResult(records, counts, errors)


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def plan_mixing(records: list, rules: CurationRules = CurationRules(), seed: int = 0) -> list:
    """Attach ``{"noise_id", "snr_db"}`` to eligible speech records.

    Eligible records come from ``rules.mix_sources``; each is mixed with
    probability ``rules.mix_prob`` with a random clip from
    ``rules.nonspeech_sources`` at an SNR drawn uniformly from
    ``[snr_low, snr_high]``.  Clips rejected by the ASR rules are not used as
    noise since they may still hold speech.
    """
    rng = np.random.default_rng(seed)
    pool = [r.id for r in records if r.label is Label.NON_SPEECH and r.source in rules.nonspeech_sources and r.path]
    out = []
    for r in records:
        if r.label is Label.SPEECH and r.source in rules.mix_sources and pool:
            if rng.random() < rules.mix_prob:
                noise = pool[int(rng.integers(len(pool)))]
                r = replace(r, mix={"noise_id": noise, "snr_db": float(rng.uniform(rules.snr_low, rules.snr_high))})
        out.append(r)
    return out


def render_mix(speech: AudioSegment, noise: AudioSegment, snr_db: float, rng: np.random.Generator) -> AudioSegment:
    """Standardized speech plus a random 10 s cut (or padding) of ``noise``."""
    s = standardize(speech)
    n = AudioSegment(resample(np.asarray(noise.samples, dtype=np.float64), noise.rate), s.rate, noise.source)
    return mix_snr(s, crop_or_pad(n, rng), snr_db)

"""Corpus curation: audio standardization, SNR mixing and dual-ASR labeling."""
from .audio import (
    TARGET_RATE,
    TARGET_SAMPLES,
    AudioSegment,
    crop_or_pad,
    mix_snr,
    read_wav,
    rms,
    snr_db,
    standardize,
    wav_bytes,
    write_wav,
)
from .curate import curate as curate_entries
from .curate import (
    CurationRules,
    Label,
    SegmentRecord,
    classify_segment,
    classify_transcripts,
    plan_mixing,
    render_mix,
)

__all__ = [
    "TARGET_RATE",
    "TARGET_SAMPLES",
    "AudioSegment",
    "CurationRules",
    "Label",
    "SegmentRecord",
    "classify_segment",
    "classify_transcripts",
    "crop_or_pad",
    "curate_entries",
    "mix_snr",
    "plan_mixing",
    "read_wav",
    "render_mix",
    "rms",
    "snr_db",
    "standardize",
    "wav_bytes",
    "write_wav",
]

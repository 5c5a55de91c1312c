"""Pluggable ASR and embedding clients.

Both contracts exchange JSON:

* ASR: request ``{"id": str, "wav_b64": str}`` -> ``{"text": str, "language_prob": float?}``
* embedder: request ``{"id": str, "text": str}`` or ``{"id", "wav_b64"}`` -> ``{"vector": [float]}``

Backends are selected by an endpoint string:

``replay:<path.json>``
    fixture file mapping ids to recorded responses
``cmd:<shell command>``
    subprocess that reads one JSON request on stdin and writes one JSON reply
``http://...`` / ``https://...``
    POST with the JSON request as body
``synthetic:<dim>``
    deterministic hash-seeded embeddings (embedder only)
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import shlex
import subprocess
import time
import urllib.request
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

ENV_OVERRIDES = {
    "asr_primary": "DUALCFG_ASR_PRIMARY",
    "asr_secondary": "DUALCFG_ASR_SECONDARY",
    "embedder": "DUALCFG_EMBEDDER",
}


class ClientError(RuntimeError):
    pass


@dataclass(frozen=True)
class ASRResult:
    text: str
    language_prob: Optional[float] = None


class ASRClient(Protocol):
    def transcribe(self, wav: bytes, segment_id: str) -> ASRResult: ...


class Embedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


def _parse_asr(reply: dict) -> ASRResult:
    if not isinstance(reply, dict) or "text" not in reply:
        raise ClientError(f"malformed ASR reply: {reply!r}")
    prob = reply.get("language_prob")
    return ASRResult(str(reply["text"]), None if prob is None else float(prob))


class ReplayBackend:
    """Responses recorded in a JSON file ``{id: reply}``; errors recorded as ``{"error": msg}``."""

    def __init__(self, path_or_table):
        if isinstance(path_or_table, dict):
            self.table = path_or_table
        else:
            with open(path_or_table) as fh:
                self.table = json.load(fh)
        self.calls = 0

    def request(self, payload: dict) -> dict:
        self.calls += 1
        key = payload["id"]
        if key not in self.table:
            raise ClientError(f"no recorded reply for {key!r}")
        reply = self.table[key]
        if isinstance(reply, dict) and "error" in reply:
            raise ClientError(str(reply["error"]))
        return reply


class SubprocessBackend:
    def __init__(self, command: str, timeout_s: float = 60.0, retries: int = 1):
        self.argv = shlex.split(command)
        self.timeout_s = timeout_s
        self.retries = retries

    def request(self, payload: dict) -> dict:
        def once():
            proc = subprocess.run(
                self.argv,
                input=json.dumps(payload).encode(),
                capture_output=True,
                timeout=self.timeout_s,
                check=False,
            )
            if proc.returncode != 0:
                raise ClientError(f"{self.argv[0]} exited {proc.returncode}: {proc.stderr.decode()[-500:]}")
            return json.loads(proc.stdout.decode())

        return _with_retries(once, self.retries)


class HTTPBackend:
    def __init__(self, url: str, timeout_s: float = 60.0, retries: int = 1):
        self.url = url
        self.timeout_s = timeout_s
        self.retries = retries

    def request(self, payload: dict) -> dict:
        def once():
            req = urllib.request.Request(
                self.url,
                data=json.dumps(payload).encode(),
                headers={"Content-Type": "application/json"},
                method="POST",
            )
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode())

        return _with_retries(once, self.retries)


def _with_retries(fn, retries: int):
    last = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except (OSError, subprocess.TimeoutExpired, ValueError, ClientError) as exc:
            last = exc
            if attempt < retries:
                time.sleep(min(0.1 * 2**attempt, 2.0))
    raise ClientError(f"request failed after {retries + 1} attempts: {last}") from last


class JSONASRClient:
    def __init__(self, backend):
        self.backend = backend

    def transcribe(self, wav: bytes, segment_id: str) -> ASRResult:
        payload = {"id": segment_id, "wav_b64": base64.b64encode(wav).decode()}
        try:
            return _parse_asr(self.backend.request(payload))
        except ClientError:
            raise
        except Exception as exc:
            raise ClientError(str(exc)) from exc


class SyntheticEmbedder:
    """Unit vectors seeded by a hash of the input; a stand-in for a frozen text encoder."""

    def __init__(self, dim: int, salt: str = ""):
        self.dim = dim
        self.salt = salt

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b((self.salt + "\x00" + text).encode(), digest_size=8).digest()
        v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)
        return v / np.linalg.norm(v)


class JSONEmbedder:
    def __init__(self, backend):
        self.backend = backend

    def embed_text(self, text: str) -> np.ndarray:
        reply = self.backend.request({"id": text, "text": text})
        return np.asarray(reply["vector"], dtype=np.float64)


def _backend(endpoint: str, timeout_s: float, retries: int):
    if endpoint.startswith("replay:"):
        return ReplayBackend(endpoint[len("replay:"):])
    if endpoint.startswith("cmd:"):
        return SubprocessBackend(endpoint[len("cmd:"):], timeout_s, retries)
    if endpoint.startswith(("http://", "https://")):
        return HTTPBackend(endpoint, timeout_s, retries)
    raise ValueError(f"unrecognized client endpoint {endpoint!r}")


def resolve_endpoint(role: str, configured: str) -> str:
    return os.environ.get(ENV_OVERRIDES[role], configured)


def make_asr_client(endpoint: str, timeout_s: float = 60.0, retries: int = 1) -> JSONASRClient:
    return JSONASRClient(_backend(endpoint, timeout_s, retries))


def make_embedder(endpoint: str, timeout_s: float = 60.0, retries: int = 1):
    if endpoint.startswith("synthetic:"):
        return SyntheticEmbedder(int(endpoint.split(":", 1)[1]))
    return JSONEmbedder(_backend(endpoint, timeout_s, retries))

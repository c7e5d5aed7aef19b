"""Three-stage multi-view caption pipeline: caption -> simplify -> fuse.

Providers speak a generic JSON chat-completion shape (messages array,
optional base64 image attachment). Failures are per-view: a bad view never
discards its object. Output is JSONL, one record per object, and reruns
skip already-fused ids.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

CAPTION_PROMPT = (
    "I will show you a picture of a 3D object. Briefly describe the "
    "appearance and shape of it."
)
SIMPLIFY_PROMPT = (
    "You will be given a description of an object. Please compress the "
    "description into one or two sentences. The details about the visual "
    "appearance and features must be retained. Please remove the irrelevant "
    "comments and contents that are not related to the object. Some "
    "examples are listed as follows:"
)
FUSE_PROMPT = (
    "Given a set of descriptions about the same 3D object, conclude these "
    "descriptions into one concise caption. The descriptions may contain "
    "contradictory information as each description comes from a certain "
    "view. In the output caption, keep the most specific information with "
    "more evidence and details. DO NOT generate ambiguous, contradictory "
    "or repeated information. Here is an example:"
)

MAX_VIEWS = 10
DEFAULT_AUTH_ENV = "TRIFORGE_CAPTION_TOKEN"


class CaptionError(RuntimeError):
    pass


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model: str = "mock"
    auth_env: str = DEFAULT_AUTH_ENV
    timeout: float = 30.0
    max_retries: int = 3
    concurrency: int = 4
    temperature: float = 0.2

    def __post_init__(self):
        if self.max_retries < 0:
            raise CaptionError("retries must be >= 0")
        if self.concurrency < 1:
            raise CaptionError("concurrency must be >= 1")

    @classmethod
    def from_file(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class CaptionRecord:
    object_id: str
    captions: list = field(default_factory=list)  # raw, one per view
    simplified: list = field(default_factory=list)
    fused: str | None = None
    provider: str = ""
    created: str = ""
    failed_views: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.captions) > MAX_VIEWS:
            raise CaptionError(f"at most {MAX_VIEWS} views per object")
        if self.fused is not None and not any(self.simplified):
            raise CaptionError("fused caption requires >= 1 simplified view")

    def to_dict(self):
        return {
            "id": self.object_id,
            "captions": self.captions,
            "simplified": self.simplified,
            "fused": self.fused,
            "provider": self.provider,
            "created": self.created,
            "failed_views": self.failed_views,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            object_id=d["id"], captions=d.get("captions", []),
            simplified=d.get("simplified", []), fused=d.get("fused"),
            provider=d.get("provider", ""), created=d.get("created", ""),
            failed_views=d.get("failed_views", []),
        )


# ------------------------------------------------------------------ few-shot


def _load_blocks(name):
    text = resources.files("triforge.assets").joinpath(name).read_text()
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    blocks = [b.strip() for b in "\n".join(lines).split("---")]
    out = []
    for b in blocks:
        if not b:
            continue
        parts = [p.strip() for p in b.split("\n\n") if p.strip()]
        if len(parts) != 2:
            raise CaptionError(f"malformed few-shot block in {name}")
        out.append((parts[0], parts[1]))
    return out


def simplify_fewshot():
    return _load_blocks("simplify_fewshot.txt")


def fuse_fewshot():
    return _load_blocks("fuse_fewshot.txt")


def _fewshot_messages(prompt, examples, user_text):
    messages = [{"role": "user", "content": prompt}]
    for raw, out in examples:
        messages.append({"role": "user", "content": raw})
        messages.append({"role": "assistant", "content": out})
    messages.append({"role": "user", "content": user_text})
    return messages


# ------------------------------------------------------------------ providers


class HttpProvider:
    """Generic JSON chat-completion client."""

    def __init__(self, cfg: ProviderConfig):
        if not cfg.endpoint:
            raise CaptionError("HTTP provider needs an endpoint URL")
        self.cfg = cfg

    def complete(self, messages, image=None):
        import requests

        payload = {
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        }
        if image is not None:
            payload["messages"] = [dict(m) for m in messages]
            payload["messages"][0]["image"] = base64.b64encode(image).decode()
        headers = {}
        token = os.environ.get(self.cfg.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        resp = requests.post(self.cfg.endpoint, json=payload, headers=headers,
                             timeout=self.cfg.timeout)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


class MockProvider:
    """Deterministic offline provider.

    Captioning returns `image_captions[sha256(image)]` when available, else
    a fixed phrase. Simplification echoes the description; fusion returns
    the first listed description. Tracks in-flight concurrency so tests can
    assert the configured cap.
    """

    def __init__(self, image_captions=None, delay=0.0):
        self.image_captions = image_captions or {}
        self.delay = delay
        self.calls = 0
        self._in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def complete(self, messages, image=None):
        with self._lock:
            self.calls += 1
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            if image is not None:
                key = hashlib.sha256(image).hexdigest()
                return self.image_captions.get(key, "a 3D object")
            head = messages[0]["content"]
            body = messages[-1]["content"]
            if head == FUSE_PROMPT:
                lines = [l for l in body.splitlines() if l.strip()]
                return lines[0] if lines else ""
            return body
        finally:
            with self._lock:
                self._in_flight -= 1


class FaultInjectingProvider:
    """Wraps a provider, failing the first `fail_times` calls."""

    def __init__(self, inner, fail_times=0, exc=ConnectionError):
        self.inner = inner
        self.fail_times = fail_times
        self.exc = exc
        self.failures_injected = 0

    def complete(self, messages, image=None):
        if self.failures_injected < self.fail_times:
            self.failures_injected += 1
            raise self.exc("injected transport failure")
        return self.inner.complete(messages, image=image)


# ------------------------------------------------------------------ transport


def _call_with_retries(provider, messages, image, cfg: ProviderConfig,
                       sleep=time.sleep):
    """Returns (text, retries_used). Raises after max_retries failures."""
    attempt = 0
    while True:
        try:
            return provider.complete(messages, image=image), attempt
        except Exception:
            if attempt >= cfg.max_retries:
                raise
            sleep(0.5 * (2**attempt))
            attempt += 1


class RequestLog:
    """Append-only JSONL log of request/response content hashes."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.entries = []

    def add(self, kind, messages, response, retries):
        req = hashlib.sha256(
            json.dumps(messages, sort_keys=True).encode()
        ).hexdigest()
        entry = {
            "kind": kind,
            "request_hash": req,
            "response_hash": hashlib.sha256(response.encode()).hexdigest(),
            "retries": retries,
        }
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a") as f:
                    f.write(json.dumps(entry, sort_keys=True) + "\n")


# ------------------------------------------------------------------- stages


def caption_view(image_bytes, provider, cfg: ProviderConfig, log=None,
                 sleep=time.sleep):
    """Raw caption for one rendered view."""
    messages = [{"role": "user", "content": CAPTION_PROMPT}]
    text, retries = _call_with_retries(provider, messages, image_bytes, cfg,
                                       sleep=sleep)
    if log:
        log.add("caption", messages, text, retries)
    return text


def simplify_caption(raw, provider, cfg: ProviderConfig, log=None,
                     sleep=time.sleep):
    """Compress a raw caption; empty input is skipped without a call."""
    if not raw or not raw.strip():
        return ""
    messages = _fewshot_messages(SIMPLIFY_PROMPT, simplify_fewshot(), raw)
    text, retries = _call_with_retries(provider, messages, None, cfg,
                                       sleep=sleep)
    if log:
        log.add("simplify", messages, text, retries)
    return text


def fuse_captions(simplified, provider, cfg: ProviderConfig, log=None,
                  sleep=time.sleep):
    """Fuse per-view simplified captions into one."""
    kept = [s for s in simplified if s and s.strip()]
    if not kept:
        raise CaptionError("fusion requires >= 1 non-empty caption")
    messages = _fewshot_messages(FUSE_PROMPT, fuse_fewshot(),
                                 "\n".join(kept))
    text, retries = _call_with_retries(provider, messages, None, cfg,
                                       sleep=sleep)
    if log:
        log.add("fuse", messages, text, retries)
    return text


# ------------------------------------------------------------------ pipeline


def _load_done_ids(out_path):
    done = set()
    path = Path(out_path)
    if not path.exists():
        return done
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("fused"):
                done.add(rec["id"])
    return done


def _process_object(rec, root, provider, cfg, log, sleep):
    views = rec["views"][:MAX_VIEWS]
    captions, simplified, failed = [], [], []
    for k, view in enumerate(views):
        try:
            img = (root / view["image"]).read_bytes()
            raw = caption_view(img, provider, cfg, log=log, sleep=sleep)
        except Exception:
            captions.append("")
            failed.append(k)
            continue
        captions.append(raw)
    for k, raw in enumerate(captions):
        if not raw:
            simplified.append("")
            continue
        try:
            simplified.append(
                simplify_caption(raw, provider, cfg, log=log, sleep=sleep)
            )
        except Exception:
            simplified.append("")
            if k not in failed:
                failed.append(k)
    fused = None
    if any(s for s in simplified):
        try:
            fused = fuse_captions(simplified, provider, cfg, log=log,
                                  sleep=sleep)
        except Exception:
            fused = None
    return CaptionRecord(
        object_id=rec["id"], captions=captions, simplified=simplified,
        fused=fused, provider=cfg.model,
        created=datetime.now(timezone.utc).isoformat(),
        failed_views=sorted(failed),
    )


def run_pipeline(manifest, provider, cfg: ProviderConfig, out_path,
                 log_path=None, resume=True, sleep=time.sleep):
    """Caption every object in the manifest. Returns stage counts.

    Objects already fused in `out_path` are skipped when resuming. Records
    append as JSONL through a single serialized writer.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    root = Path(manifest.path).parent
    done = _load_done_ids(out_path) if resume else set()
    todo = [r for r in manifest.records if r["id"] not in done]
    log = RequestLog(log_path)
    write_lock = threading.Lock()
    stats = {"captioned": 0, "simplified": 0, "fused": 0, "failed": 0}
    for rid in done:
        # resumed records count toward totals
        stats["captioned"] += 1
        stats["simplified"] += 1
        stats["fused"] += 1

    def work(rec):
        record = _process_object(rec, root, provider, cfg, log, sleep)
        with write_lock:
            with open(out_path, "a") as f:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            if any(record.captions):
                stats["captioned"] += 1
            if any(record.simplified):
                stats["simplified"] += 1
            if record.fused:
                stats["fused"] += 1
            else:
                stats["failed"] += 1
        return record

    if todo:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            list(pool.map(work, todo))
    return stats


def load_records(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(CaptionRecord.from_dict(json.loads(line)))
    return records


def summarize_captions(records):
    """Dataset-card style summary: sample count and mean fused length."""
    fused = [r.fused for r in records if r.fused]
    avg = sum(len(c) for c in fused) / len(fused) if fused else 0.0
    return {"samples": len(fused), "avg_length": round(avg, 2)}

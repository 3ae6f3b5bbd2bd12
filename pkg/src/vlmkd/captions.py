"""Per-image text descriptions from prompt templates.

Two sources: a deterministic captioner that verbalises the synthetic
attributes, and a client for any OpenAI-compatible chat-completions server
that accepts base64 image parts.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .data import SyntheticDataset, SyntheticImage
from .errors import ConfigError, MalformedResponseError, PartialFailure, TransportError

log = logging.getLogger(__name__)

API_KEY_ENV = "VLMKD_API_KEY"
PLACEHOLDER = "{classname}"
GENERAL, TARGETED = "General", "Targeted"


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    kind: str
    text: str

    def __post_init__(self):
        n = self.text.count(PLACEHOLDER)
        if self.kind == TARGETED and n != 1:
            raise ConfigError(f"targeted prompt {self.id!r} must contain {PLACEHOLDER} exactly once")
        if self.kind == GENERAL and n != 0:
            raise ConfigError(f"general prompt {self.id!r} must not contain {PLACEHOLDER}")
        if self.kind not in (GENERAL, TARGETED):
            raise ConfigError(f"unknown prompt kind {self.kind!r}")

    def render(self, classname: str | None = None) -> str:
        if self.kind == TARGETED:
            if classname is None:
                raise ConfigError(f"prompt {self.id!r} needs a class name")
            return self.text.replace(PLACEHOLDER, classname)
        return self.text


_BUILTIN = (
    PromptTemplate("general-short", GENERAL, "Please describe the image in one sentence."),
    PromptTemplate("general-long", GENERAL, "Please describe the image in detail."),
    PromptTemplate("keyword-short", GENERAL, "Please describe the image with three keywords."),
    PromptTemplate("keyword-long", GENERAL, "Please describe the image with ten keywords."),
    PromptTemplate("T1", TARGETED, "Please describe the {classname} in the image in one sentence."),
    PromptTemplate("T2", TARGETED, "Please describe the {classname} in the image in detail."),
    PromptTemplate("T3", TARGETED, "What visual features distinguish the {classname} in this image?"),
    PromptTemplate("T4", TARGETED, "List three keywords describing the {classname} in this image."),
)


def builtin_prompts() -> list[PromptTemplate]:
    return list(_BUILTIN)


def get_prompt(prompt_id: str) -> PromptTemplate:
    for p in _BUILTIN:
        if p.id == prompt_id:
            return p
    raise ConfigError(f"unknown prompt id {prompt_id!r}; builtin ids: {', '.join(p.id for p in _BUILTIN)}")


# What the toy captioner "answers" to each builtin prompt.
TOY_ANSWERS = {
    "general-short": "a {size} {color} {shape} on a plain background",
    "general-long": ("a {size} {color} {shape} filled with a {texture} pattern, "
                     "drawn on a plain light gray background with a little grain"),
    "keyword-short": "{color}, {shape}, {size}",
    "keyword-long": "{color}, {shape}, {size}, {texture}, pattern, plain, background, gray, single, object",
    "T1": "a {size} {color} {shape}, which is a {classname}, on a plain background",
    "T2": ("the {classname} appears as a {size} {color} {shape} filled with a {texture} pattern "
           "on a plain light gray background"),
    "T3": "the {classname} is distinguished by its {color} color and {shape} outline",
    "T4": "{classname}, {color}, {shape}",
}


def toy_caption(image: SyntheticImage, template: PromptTemplate, classnames: Sequence[str]) -> str:
    answer = TOY_ANSWERS.get(template.id)
    if answer is None:
        if template.id.startswith("keyword"):
            answer = TOY_ANSWERS["keyword-short"]
        else:
            answer = TOY_ANSWERS["T1" if template.kind == TARGETED else "general-short"]
    fields = dict(image.attributes)
    if template.kind == TARGETED:
        fields["classname"] = classnames[image.label]
    elif "{classname}" in answer:
        raise ConfigError(f"general template {template.id!r} cannot name the class")
    return answer.format(**fields)


def image_png_bytes(pixels: np.ndarray) -> bytes:
    from PIL import Image

    arr = (np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class RemoteCaptioner:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    endpoint: str
    api_key: str | None = None
    model: str = "llava-next"
    attempts: int = 3
    backoff: float = 0.5
    timeout: float = 60.0

    @classmethod
    def from_env(cls, endpoint: str, **kw) -> "RemoteCaptioner":
        return cls(endpoint, api_key=os.environ.get(API_KEY_ENV), **kw)

    def payload(self, prompt: str, image_bytes: bytes) -> dict:
        data_url = "data:image/png;base64," + base64.b64encode(image_bytes).decode("ascii")
        return {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": data_url}},
                ],
            }],
        }

    def caption(self, template: PromptTemplate, image_bytes: bytes, classname: str | None = None) -> str:
        body = self.payload(template.render(classname), image_bytes)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = "no attempt made"
        for attempt in range(1, self.attempts + 1):
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if 200 <= resp.status_code < 300:
                    text = _first_message(resp.content)
                    log.debug("caption received: %s", text)
                    return text
                last = f"HTTP {resp.status_code}"
            log.warning("caption request failed (attempt %d/%d): %s", attempt, self.attempts, last)
            if attempt < self.attempts and self.backoff > 0:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"caption request failed after {self.attempts} attempts: {last}", attempts=self.attempts)


def _first_message(raw: bytes) -> str:
    try:
        text = json.loads(raw)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"unexpected chat-completions response: {exc!r}") from None
    if isinstance(text, list):  # content given as parts
        text = " ".join(p.get("text", "") for p in text if isinstance(p, dict))
    if not isinstance(text, str) or not text.strip():
        raise MalformedResponseError("empty completion")
    return text.strip()


def remote_caption(endpoint: str, api_key: str | None, template: PromptTemplate, image_bytes: bytes,
                   classname: str | None = None, **kw) -> str:
    return RemoteCaptioner(endpoint, api_key=api_key, **kw).caption(template, image_bytes, classname)


@dataclass
class CaptionSet:
    prompt_id: str
    records: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for id_ in sorted(self.records):
                fh.write(json.dumps({"id": id_, "caption": self.records[id_]}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path, prompt_id: str | None = None) -> "CaptionSet":
        path = Path(path)
        records = _read_jsonl(path)
        if prompt_id is None:
            prompt_id = path.stem.removeprefix("captions_")
        return cls(prompt_id, records)

    def missing(self, ids: Sequence[str]) -> list[str]:
        return [i for i in ids if i not in self.records]


def _read_jsonl(path: Path) -> dict[str, str]:
    records: dict[str, str] = {}
    if not path.exists():
        return records
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except ValueError:
                # torn final line from an interrupted append
                log.warning("skipping unreadable line in %s", path)
                continue
            if rec.get("caption"):
                records[rec["id"]] = rec["caption"]
    return records


def concat_caption_sets(sets: Sequence[CaptionSet]) -> CaptionSet:
    """One caption per image made by joining every prompt's caption."""
    if len(sets) < 2:
        raise ConfigError("concatenation needs at least two caption sets")
    ids = sorted(sets[0].records)
    for s in sets[1:]:
        if sorted(s.records) != ids:
            raise ConfigError("caption sets cover different ids")
    pid = "concat(" + "+".join(s.prompt_id for s in sets) + ")"
    return CaptionSet(pid, {i: " ".join(s.records[i] for s in sets) for i in ids})


def build_caption_set(dataset: SyntheticDataset, template: PromptTemplate, source: str = "toy",
                      out_path: str | Path | None = None, resume: bool = False,
                      captioner: RemoteCaptioner | None = None, workers: int = 4) -> CaptionSet:
    """Caption every training image; optionally persist to JSON-lines.

    With ``resume`` the ids already present in ``out_path`` (and any shard
    files left by an interrupted remote run) are not fetched again.
    """
    out_path = Path(out_path) if out_path is not None else None
    cs = CaptionSet(template.id)
    if resume and out_path is not None:
        cs.records.update(_read_jsonl(out_path))
        for shard in sorted(out_path.parent.glob(out_path.name + ".shard*")):
            cs.records.update(_read_jsonl(shard))
    todo = [im for im in dataset.images if im.id not in cs.records]
    cs.fetched = len(todo)  # type: ignore[attr-defined]

    if source == "toy":
        for im in todo:
            cs.records[im.id] = toy_caption(im, template, dataset.classnames)
    elif source == "remote":
        if captioner is None:
            raise ConfigError("remote captioning needs an endpoint")
        failed = _fetch_remote(dataset, template, todo, cs, captioner, out_path, workers)
        if failed:
            if out_path is not None:
                cs.save(out_path)
                out_path.with_suffix(".missing.json").write_text(json.dumps(sorted(failed), indent=1) + "\n")
                _drop_shards(out_path)
            raise PartialFailure(f"{len(failed)} of {len(dataset.images)} captions missing", sorted(failed))
    else:
        raise ConfigError(f"unknown caption source {source!r}")

    if out_path is not None:
        cs.save(out_path)
        _drop_shards(out_path)
        stale = out_path.with_suffix(".missing.json")
        if stale.exists():
            stale.unlink()
    return cs


def _drop_shards(out_path: Path) -> None:
    for shard in out_path.parent.glob(out_path.name + ".shard*"):
        shard.unlink()


def _fetch_remote(dataset, template, todo, cs, captioner, out_path, workers) -> list[str]:
    lock = threading.Lock()
    local = threading.local()
    counter = iter(range(1 << 30))
    failed: list[str] = []

    def shard():
        if out_path is None:
            return None
        if not hasattr(local, "fh"):
            with lock:
                k = next(counter)
            local.fh = open(f"{out_path}.shard{k}", "a", encoding="utf-8")
            handles.append(local.fh)
        return local.fh

    handles: list = []

    def work(im: SyntheticImage):
        classname = dataset.classnames[im.label] if template.kind == TARGETED else None
        try:
            text = captioner.caption(template, image_png_bytes(im.pixels), classname)
        except (TransportError, MalformedResponseError) as exc:
            log.error("caption for %s failed: %s", im.id, exc)
            with lock:
                failed.append(im.id)
            return
        fh = shard()
        if fh is not None:
            fh.write(json.dumps({"id": im.id, "caption": text}, ensure_ascii=False) + "\n")
            fh.flush()
        with lock:
            cs.records[im.id] = text

    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            list(pool.map(work, todo))
    finally:
        for fh in handles:
            fh.close()
    return failed

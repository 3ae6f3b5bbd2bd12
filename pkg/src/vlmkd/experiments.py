"""In-memory end-to-end pipeline and the experiment grid runner.

A grid spec is JSON::

    {
      "name": "...",
      "seeds": [1, 2, 3],
      "data": {...DataConfig fields...},
      "encoder": {"kind": "hashed_bow", "dim": 64},
      "teacher": {...TeacherConfig fields...},
      "train": {...TrainConfig fields, "loss": {...}},
      "runs": [
        {"name": "baseline", "prompts": [], "loss": {"text_mode": "off"}},
        {"name": "KD-T", "prompts": ["general-short"], "loss": {"text_mode": "shared"}}
      ]
    }

Each run may override ``train`` and ``loss`` fields. In ``concat`` mode the
run's prompts are joined caption-by-caption and encoded into one cache.
"""
from __future__ import annotations

import copy
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .captions import CaptionSet, build_caption_set, concat_caption_sets, get_prompt
from .data import DataConfig, SyntheticDataset, generate
from .embedding import EmbeddingCache, TextEncoderSpec, encode_captions
from .errors import ConfigError
from .models import ModelBundle
from .train import EvalReport, TeacherConfig, TrainConfig, TrainResult, make_teacher, train

log = logging.getLogger(__name__)

METRICS = ("top1_many", "top1_medium", "top1_few", "top1_overall")


class Pipeline:
    """Dataset plus lazily built caption sets, caches and teacher, all in memory."""

    def __init__(self, data: DataConfig | SyntheticDataset = DataConfig(),
                 encoder: TextEncoderSpec = TextEncoderSpec(), teacher: TeacherConfig = TeacherConfig()):
        self.dataset = data if isinstance(data, SyntheticDataset) else generate(data)
        self.encoder = encoder
        self.teacher_config = teacher
        self._captions: dict[str, CaptionSet] = {}
        self._caches: dict[tuple[str, ...], EmbeddingCache] = {}
        self._teacher: tuple[ModelBundle, dict] | None = None

    def captions(self, prompt_id: str) -> CaptionSet:
        if prompt_id not in self._captions:
            self._captions[prompt_id] = build_caption_set(self.dataset, get_prompt(prompt_id), "toy")
        return self._captions[prompt_id]

    def cache(self, *prompt_ids: str) -> EmbeddingCache:
        """Cache for one prompt, or for the concatenation of several."""
        key = tuple(prompt_ids)
        if key not in self._caches:
            if len(key) == 1:
                cs = self.captions(key[0])
            else:
                cs = concat_caption_sets([self.captions(p) for p in key])
            self._caches[key] = encode_captions(cs.records, self.encoder)
        return self._caches[key]

    def caches_for(self, prompts: Sequence[str], mode: str) -> list[EmbeddingCache]:
        if mode == "off" or not prompts:
            return []
        if mode == "concat":
            if len(prompts) < 2:
                raise ConfigError("concat mode needs at least two prompts")
            return [self.cache(*prompts)]
        return [self.cache(p) for p in prompts]

    def teacher(self) -> tuple[ModelBundle, dict]:
        if self._teacher is None:
            self._teacher = make_teacher(self.dataset, self.teacher_config)
        return self._teacher

    def run(self, config: TrainConfig, prompts: Sequence[str] = ()) -> TrainResult:
        caches = self.caches_for(prompts, config.loss.text_mode)
        teacher = self.teacher()[0] if config.loss.kd_image else None
        return train(self.dataset, caches, config, teacher=teacher)


def merge_config(base: dict, *overrides: dict) -> TrainConfig:
    merged = copy.deepcopy(base)
    for ov in overrides:
        ov = copy.deepcopy(ov)
        loss = ov.pop("loss", None)
        merged.update(ov)
        if loss:
            merged.setdefault("loss", {}).update(loss)
    return TrainConfig.from_dict(merged)


@dataclass
class GridRow:
    name: str
    mode: str
    prompts: list[str]
    status: str
    metrics: dict[str, float | None] = field(default_factory=dict)
    per_seed: list[dict] = field(default_factory=list)
    error: str | None = None


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_experiment_grid(spec: dict | str | Path, pipeline: Pipeline | None = None) -> list[GridRow]:
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    seeds = spec.get("seeds", [1, 2, 3])
    if pipeline is None:
        pipeline = Pipeline(DataConfig(**spec.get("data", {})), TextEncoderSpec(**spec.get("encoder", {})),
                            TeacherConfig(**spec.get("teacher", {})))
    base = spec.get("train", {})
    rows = []
    for run in spec["runs"]:
        name = run["name"]
        prompts = list(run.get("prompts", []))
        overrides = {k: v for k, v in run.items() if k in ("train", "loss")}
        row = GridRow(name, "?", prompts, "ok")
        try:
            per_run = dict(overrides.get("train", {}))
            if "loss" in overrides:
                per_run["loss"] = overrides["loss"]
            for seed in seeds:
                cfg = merge_config(base, per_run, {"seed": seed})
                row.mode = cfg.loss.text_mode
                res = pipeline.run(cfg, prompts)
                entry = res.report.to_dict()
                entry["seconds"] = res.seconds
                row.per_seed.append(entry)
            row.metrics = {m: _mean(r[m] for r in row.per_seed) for m in METRICS}
        except Exception as exc:  # a failed row must not stop the grid
            log.error("grid row %s failed: %s", name, exc)
            row.status = "failed"
            row.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        rows.append(row)
    return rows


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def grid_markdown(rows: Sequence[GridRow], title: str = "") -> str:
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines += ["| Method | Mode | Prompts | Many | Med | Few | Avg |", "|---|---|---|---|---|---|---|"]
    for r in rows:
        if r.status != "ok":
            lines.append(f"| {r.name} | {r.mode} | {'+'.join(r.prompts) or '-'} | failed | | | |")
            continue
        m = r.metrics
        lines.append(f"| {r.name} | {r.mode} | {'+'.join(r.prompts) or '-'} | {_pct(m['top1_many'])} | "
                     f"{_pct(m['top1_medium'])} | {_pct(m['top1_few'])} | {_pct(m['top1_overall'])} |")
    return "\n".join(lines) + "\n"


def grid_json(rows: Sequence[GridRow]) -> list[dict]:
    return [asdict(r) for r in rows]

"""Training loop, split-aware evaluation and embedding export."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import FEW, MANY, MEDIUM, SyntheticDataset, batch_iter, generate_pool
from .embedding import EmbeddingCache
from .errors import ConfigError, NumericError, WiringError
from .losses import BatchBundle, LossConfig, loss_total
from .models import ArchConfig, ModelBundle, freeze, save_bundle
from .numerics import DTYPE, LrSchedule, l2_normalize, configure_determinism, forward_backward, lr_at, sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: str = "cosine"
    eval_every: int = 0
    d_img: int = 128
    width: int = 1
    head: str = "cosine"
    head_scale: float = 16.0
    adaptor_depth: int = 1
    flip: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        return cls(loss=loss, **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, num_caches: int) -> None:
        self.loss.validate(num_caches)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        contrastive = self.loss.use_scl or self.loss.uses_text
        if contrastive and self.batch_size < 2:
            raise ConfigError("contrastive terms need batch_size >= 2")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")


@dataclass
class EvalReport:
    top1_overall: float
    top1_many: float | None
    top1_medium: float | None
    top1_few: float | None
    per_class: list[float | None]
    per_class_support: list[int]
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def check_consistency(self, split_of_class: Sequence[str], tol: float = 1e-12) -> None:
        """Recompute the aggregates from the per-class vector."""
        again = _aggregate(self.per_class, self.per_class_support, split_of_class)
        for key, val in again.items():
            mine = getattr(self, key)
            if (mine is None) != (val is None) or (val is not None and abs(mine - val) > tol):
                raise WiringError(f"report field {key} inconsistent with per-class accuracies")


def _aggregate(per_class, support, split_of_class) -> dict:
    total = sum(support)
    correct = sum(a * n for a, n in zip(per_class, support) if a is not None)
    out = {"top1_overall": correct / total if total else None}
    for name, key in ((MANY, "top1_many"), (MEDIUM, "top1_medium"), (FEW, "top1_few")):
        accs = [a for a, s in zip(per_class, split_of_class) if s == name and a is not None]
        out[key] = float(np.mean(accs)) if accs else None
    return out


def report_from_predictions(preds, labels, split_of_class: Sequence[str], config: dict | None = None,
                            seed: int | None = None) -> EvalReport:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    num_classes = len(split_of_class)
    per_class: list[float | None] = []
    support: list[int] = []
    for c in range(num_classes):
        m = labels == c
        n = int(m.sum())
        support.append(n)
        per_class.append(float((preds[m] == c).mean()) if n else None)
    agg = _aggregate(per_class, support, split_of_class)
    return EvalReport(agg["top1_overall"], agg["top1_many"], agg["top1_medium"], agg["top1_few"],
                      per_class, support, dict(config or {}), seed)


def _images(dataset: SyntheticDataset, split: str) -> torch.Tensor:
    return torch.from_numpy(dataset.pixels(split)).to(DTYPE)


@torch.no_grad()
def evaluate(bundle: ModelBundle, dataset: SyntheticDataset, split: str = "val",
             config: dict | None = None, batch_size: int = 256) -> EvalReport:
    images = _images(dataset, split)
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = bundle.predict(images[start:start + batch_size])
        preds.append(logits.argmax(1))
    preds = torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)
    return report_from_predictions(preds, dataset.labels(split), dataset.split_of_class, config,
                                   bundle.arch.seed)


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict]
    report: EvalReport
    seconds: float = 0.0


def _text_tensors(dataset: SyntheticDataset, caches: Sequence[EmbeddingCache]):
    ids = dataset.ids()
    texts, usable = [], []
    for k, cache in enumerate(caches):
        missing = [i for i in ids if i not in cache.entries]
        if missing:
            raise WiringError(f"cache {k} ({cache.encoder_id}) is missing {len(missing)} ids, e.g. {missing[:5]}")
        texts.append(torch.from_numpy(cache.matrix(ids)).to(DTYPE))
        mask = torch.from_numpy(cache.usable(ids))
        if not bool(mask.all()):
            log.info("cache %d: %d zero-caption rows excluded from text loss", k, int((~mask).sum()))
        usable.append(mask)
    return texts, usable


def _merge_singletons(batches: list[list[str]]) -> list[list[str]]:
    # batch-norm needs two rows; fold a trailing singleton into its predecessor
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = batches[-1] + last
    return batches


def build_bundle(dataset: SyntheticDataset, caches: Sequence[EmbeddingCache], config: TrainConfig,
                 teacher: ModelBundle | None = None) -> ModelBundle:
    dims = {c.dim for c in caches}
    if len(dims) > 1:
        raise WiringError(f"caption caches disagree on dimension: {sorted(dims)}")
    lc = config.loss
    arch = ArchConfig(
        num_classes=dataset.num_classes, d_img=config.d_img, width=config.width, head=config.head,
        head_scale=config.head_scale, text_dim=dims.pop() if dims and lc.uses_text else None,
        adaptor_depth=config.adaptor_depth, num_adaptors=lc.num_adaptors(len(caches)),
        kd_dim=teacher.arch.d_img if (lc.kd_image and teacher is not None) else None,
        seed=config.seed,
    )
    bundle = ModelBundle(arch)
    bundle.attach_teacher(teacher)
    return bundle


def train(dataset: SyntheticDataset, caches: Sequence[EmbeddingCache], config: TrainConfig,
          teacher: ModelBundle | None = None, log_path: str | Path | None = None,
          init_state: dict | None = None) -> TrainResult:
    t0 = time.perf_counter()
    configure_determinism()
    caches = list(caches) if config.loss.uses_text else []
    config.validate(len(caches))
    if config.loss.kd_image and teacher is None:
        raise ConfigError("kd_image needs a trained teacher (see `vlmkd teach`)")
    if teacher is not None and teacher.arch.num_classes != dataset.num_classes:
        raise WiringError("teacher and dataset disagree on the number of classes")

    bundle = build_bundle(dataset, caches, config, teacher)
    if init_state is not None:
        bundle.load_state_dict(init_state, strict=False)
    store = bundle.store()
    ids = dataset.ids()
    row_of = {i: k for k, i in enumerate(ids)}
    images = _images(dataset, "train")
    labels = torch.from_numpy(dataset.labels("train"))
    priors = torch.from_numpy(dataset.priors).to(DTYPE)
    texts, usable = _text_tensors(dataset, caches) if caches else ([], [])
    t_logits = t_feats = None
    if config.loss.kd_image and not config.flip:
        t_logits, t_feats = teacher_outputs(teacher, images)

    epoch_batches = [_merge_singletons(list(batch_iter(ids, config.batch_size, config.seed, e)))
                     for e in range(config.epochs)]
    total_steps = sum(len(b) for b in epoch_batches)
    schedule = LrSchedule(config.base_lr, max(total_steps, 1), config.schedule)
    records: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch, batches in enumerate(epoch_batches):
            bundle.train()
            for batch_ids in batches:
                rows = torch.tensor([row_of[i] for i in batch_ids])
                x = images[rows]
                if config.flip:
                    flip_mask = torch.rand(len(rows), generator=_flip_gen(config.seed, step), dtype=DTYPE) < 0.5
                    x = torch.where(flip_mask[:, None, None, None], x.flip(2), x)
                batch = BatchBundle(x, labels[rows], [t[rows] for t in texts], [u[rows] for u in usable])
                if config.loss.kd_image:
                    if config.flip:
                        batch.teacher_logits, batch.teacher_feats = teacher_outputs(teacher, x)
                    else:
                        batch.teacher_logits, batch.teacher_feats = t_logits[rows], t_feats[rows]
                parts: dict = {}

                def graph(_store, batch=batch, parts=parts):
                    total, p = loss_total(batch, bundle, config.loss, priors)
                    parts.update(p)
                    return total

                try:
                    forward_backward(graph, store)
                except NumericError as exc:
                    bad = [k for k, v in parts.items() if not math.isfinite(v)]
                    raise NumericError(f"step {step} (epoch {epoch}): {exc}; non-finite terms: {bad or 'none'}") from None
                lr = lr_at(schedule, step)
                sgd_step(store, lr, config.momentum, config.weight_decay)
                rec = {"step": step, "lr": lr, "loss_total": parts["loss_total"], "loss_cls": parts["loss_cls"],
                       "loss_scl": parts["loss_scl"], "loss_text": parts["loss_text"],
                       "loss_kd": parts["loss_kd"], "tau": parts["tau"]}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                rep = evaluate(bundle, dataset, "val")
                log.info("epoch %d: val top1 %.4f", epoch + 1, rep.top1_overall)
    finally:
        if log_fh:
            log_fh.close()
    bundle.eval()
    report = evaluate(bundle, dataset, "val", config.to_dict())
    return TrainResult(bundle, records, report, time.perf_counter() - t0)


def _flip_gen(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed * 1_000_003 + step)
    return g


@torch.no_grad()
def teacher_outputs(teacher: ModelBundle, images: torch.Tensor, batch_size: int = 256):
    """Frozen teacher logits and the embedding its classifier consumes.

    A cosine head only sees the direction of the backbone output, so for
    cosine teachers the exported features are l2-normalised.
    """
    logits, feats = [], []
    for start in range(0, images.shape[0], batch_size):
        q, f = teacher.predict(images[start:start + batch_size])
        logits.append(q)
        feats.append(l2_normalize(f) if teacher.arch.head == "cosine" else f)
    return torch.cat(logits), torch.cat(feats)


@dataclass
class TeacherConfig:
    """Wider classifier-only network.

    With ``pretrain_per_class > 0`` it is first trained on a balanced pool
    disjoint from the training set, then fine-tuned on the long-tail split.
    """

    epochs: int = 5
    batch_size: int = 16
    base_lr: float = 0.01
    width: int = 2
    d_img: int = 256
    seed: int = 0
    weight_decay: float = 0.0
    pretrain_per_class: int = 100
    pretrain_epochs: int = 20
    head_scale: float = 8.0


def make_teacher(dataset: SyntheticDataset, config: TeacherConfig = TeacherConfig(),
                 out_dir: str | Path | None = None) -> tuple[ModelBundle, dict]:
    """Train a wider classifier-only network, freeze it and optionally persist it."""
    tc = TrainConfig(epochs=config.epochs, batch_size=config.batch_size, base_lr=config.base_lr,
                     seed=config.seed, width=config.width, d_img=config.d_img,
                     weight_decay=config.weight_decay, head_scale=config.head_scale, loss=LossConfig())
    init = None
    if config.pretrain_per_class > 0:
        pool = generate_pool(dataset.config, config.pretrain_per_class)
        pool.val_images = dataset.val_images
        pre = train(pool, [], replace(tc, epochs=config.pretrain_epochs))
        init = pre.bundle.state_dict()
    result = train(dataset, [], tc, init_state=init)
    teacher = freeze(result.bundle)
    majority = 1.0 / dataset.num_classes
    manifest = {
        "teacher_feature_dim": teacher.arch.d_img,
        "top1_overall": result.report.top1_overall,
        "report": result.report.to_dict(),
        "config": asdict(config),
        "warnings": [],
    }
    if result.report.top1_overall <= majority:
        msg = f"teacher top-1 {result.report.top1_overall:.3f} does not beat majority baseline {majority:.3f}"
        log.warning(msg)
        manifest["warnings"].append(msg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_bundle(out_dir / "teacher.bin", teacher, extra={"role": "teacher"})
        (out_dir / "teacher_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return teacher, manifest


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@torch.no_grad()
def export_embeddings(bundle: ModelBundle, dataset: SyntheticDataset, caches: Sequence[EmbeddingCache],
                      out_dir: str | Path, split: str = "train") -> list[Path]:
    """Write ``image_embeddings.csv`` and one ``text_embeddings_{k}.csv`` per cache."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ims = dataset.images if split == "train" else dataset.val_images
    _, emb = bundle.predict(torch.from_numpy(dataset.pixels(split)).to(DTYPE))
    written = []
    path = out_dir / "image_embeddings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
        for im, row in zip(ims, emb.numpy()):
            w.writerow([im.id, im.label] + [_fmt(v) for v in row])
    written.append(path)
    for k, cache in enumerate(caches):
        path = out_dir / f"text_embeddings_{k}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"t{j}" for j in range(cache.dim)])
            for im in ims:
                if im.id in cache.entries:
                    w.writerow([im.id, im.label] + [_fmt(v) for v in cache.entries[im.id]])
        written.append(path)
    return written


def moving_average(xs: Sequence[float], window: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) < window:
        return xs
    return np.convolve(xs, np.ones(window) / window, mode="valid")

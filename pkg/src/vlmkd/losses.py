"""Training objectives.

* ``loss_cls``       logit-adjusted cross-entropy (class priors enter as log offsets)
* ``loss_scl``       supervised contrastive loss over a batch
* ``loss_text``      image-to-caption contrastive distillation with learnable temperature
* ``loss_kd_image``  logit KL plus squared feature distance to a frozen teacher
* ``loss_total``     the weighted sum used by the trainer
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, DomainError
from .numerics import l2_normalize

log = logging.getLogger(__name__)

TEXT_MODES = ("off", "single", "shared", "separate", "concat")


@dataclass
class LossConfig:
    use_cls: bool = True
    use_scl: bool = False
    text_mode: str = "off"
    alpha: float = 1.0
    scl_temperature: float = 0.07
    text_reduction: str = "mean"
    kd_image: bool = False
    symmetric_text_loss: bool = False

    def validate(self, num_caches: int) -> None:
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"unknown text mode {self.text_mode!r}; choose from {TEXT_MODES}")
        if self.text_reduction not in ("mean", "sum"):
            raise ConfigError("text_reduction must be 'mean' or 'sum'")
        if self.text_mode in ("shared", "separate") and num_caches < 1:
            raise ConfigError(f"text mode {self.text_mode!r} needs at least one caption cache")
        if self.text_mode in ("single", "concat") and num_caches != 1:
            raise ConfigError(f"text mode {self.text_mode!r} takes exactly one cache, got {num_caches}")

    @property
    def uses_text(self) -> bool:
        return self.text_mode != "off"

    def num_adaptors(self, num_caches: int) -> int:
        if self.text_mode == "off":
            return 0
        return num_caches if self.text_mode == "separate" else 1


def _zero_like(x: torch.Tensor) -> torch.Tensor:
    # keeps the result attached to the graph so backward still works
    return (x * 0).sum()


def loss_cls(logits: torch.Tensor, labels: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
    priors = torch.as_tensor(priors, dtype=logits.dtype)
    if (priors <= 0).any():
        raise DomainError("class priors must be strictly positive")
    adjusted = logits + priors.log()
    lse = torch.logsumexp(adjusted, dim=1)
    picked = adjusted.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return (lse - picked).mean()


def loss_scl(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss; anchors without a same-label partner are skipped."""
    z = l2_normalize(embeddings)
    b = z.shape[0]
    sim = z @ z.T / temperature
    eye = torch.eye(b, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    labels = labels.view(-1)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    has = n_pos > 0
    if not has.any():
        return _zero_like(embeddings)
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(1))[has] / n_pos[has]
    return per_anchor.mean()


def loss_text(adapted: torch.Tensor, text: torch.Tensor, tau: torch.Tensor | float,
              reduction: str = "mean", symmetric: bool = False,
              usable: torch.Tensor | None = None, min_rows: int = 2) -> torch.Tensor:
    """Contrastive alignment of projected image features with their cached caption vectors.

    Other captions in the batch act as negatives, same-class ones included.
    Rows flagged unusable (empty captions) are dropped first; with fewer than
    ``min_rows`` rows left the batch contributes zero. ``reduction="none"``
    returns the per-row losses of the usable rows.
    """
    if usable is not None and not bool(usable.all()):
        adapted, text = adapted[usable], text[usable]
    if adapted.shape[0] < min_rows:
        log.warning("text loss skipped: %d usable rows in batch", adapted.shape[0])
        return _zero_like(adapted) + (_zero_like(tau) if isinstance(tau, torch.Tensor) else 0.0)
    f = l2_normalize(adapted)
    g = l2_normalize(text.to(adapted.dtype)).detach()
    logits = (f @ g.T) / tau
    targets = torch.arange(f.shape[0])
    rows = torch.logsumexp(logits, dim=1) - logits[targets, targets]
    if symmetric:
        cols = torch.logsumexp(logits, dim=0) - logits[targets, targets]
        rows = 0.5 * (rows + cols)
    if reduction == "none":
        return rows
    return rows.mean() if reduction == "mean" else rows.sum()


def loss_text_aggregate(embeddings: torch.Tensor, texts: Sequence[torch.Tensor], adaptors, mode: str,
                        tau: torch.Tensor | float, reduction: str = "mean", symmetric: bool = False,
                        usable: Sequence[torch.Tensor | None] | None = None) -> torch.Tensor:
    """Sum of per-prompt text losses under one of the aggregation modes.

    shared: one adaptor for every prompt; separate: adaptor k for prompt k;
    single/concat: exactly one cache (concat caches are built offline from
    joined captions).
    """
    if mode == "off":
        return _zero_like(embeddings)
    usable = list(usable) if usable is not None else [None] * len(texts)
    if mode in ("single", "concat"):
        if len(texts) != 1:
            raise ConfigError(f"mode {mode!r} takes exactly one cache")
        return loss_text(adaptors[0](embeddings), texts[0], tau, reduction, symmetric, usable[0])
    if mode == "shared":
        projected = adaptors[0](embeddings)
        terms = [loss_text(projected, g, tau, reduction, symmetric, u) for g, u in zip(texts, usable)]
    elif mode == "separate":
        if len(adaptors) != len(texts):
            raise ConfigError(f"separate mode needs {len(texts)} adaptors, got {len(adaptors)}")
        terms = [loss_text(a(embeddings), g, tau, reduction, symmetric, u)
                 for a, g, u in zip(adaptors, texts, usable)]
    else:
        raise ConfigError(f"unknown text mode {mode!r}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def loss_kd_image(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                  student_feats: torch.Tensor, teacher_feats: torch.Tensor) -> torch.Tensor:
    """mean_i KL(softmax(q_s) || softmax(q_t)) + mean_i ||f_s - f_t||^2; teacher side is constant."""
    teacher_logits = teacher_logits.detach()
    teacher_feats = teacher_feats.detach()
    log_ps = torch.log_softmax(student_logits, dim=1)
    log_pt = torch.log_softmax(teacher_logits, dim=1)
    kl = (log_ps.exp() * (log_ps - log_pt)).sum(1).mean()
    feat = ((student_feats - teacher_feats) ** 2).sum(1).mean()
    return kl + feat


@dataclass
class BatchBundle:
    images: torch.Tensor
    labels: torch.Tensor
    texts: list[torch.Tensor] = field(default_factory=list)
    text_usable: list[torch.Tensor | None] = field(default_factory=list)
    teacher_logits: torch.Tensor | None = None
    teacher_feats: torch.Tensor | None = None


def loss_total(batch: BatchBundle, bundle, config: LossConfig, priors: torch.Tensor):
    """Return (total, breakdown) where breakdown holds the unweighted per-term floats."""
    emb = bundle.backbone(batch.images)
    logits = bundle.head(emb)
    total = _zero_like(logits)
    parts = {"loss_cls": 0.0, "loss_scl": 0.0, "loss_text": 0.0, "loss_kd": 0.0}
    if config.use_cls:
        term = loss_cls(logits, batch.labels, priors)
        total = total + term
        parts["loss_cls"] = float(term.detach())
    if config.use_scl:
        term = loss_scl(emb, batch.labels, config.scl_temperature)
        total = total + term
        parts["loss_scl"] = float(term.detach())
    if config.uses_text:
        term = loss_text_aggregate(emb, batch.texts, bundle.adaptors, config.text_mode,
                                   bundle.temperature.tau(), config.text_reduction,
                                   config.symmetric_text_loss, batch.text_usable)
        total = total + config.alpha * term
        parts["loss_text"] = float(term.detach())
    if config.kd_image:
        if batch.teacher_logits is None or bundle.kd_proj is None:
            raise ConfigError("image distillation needs teacher outputs and a feature projection")
        term = loss_kd_image(logits, batch.teacher_logits, bundle.kd_proj(emb), batch.teacher_feats)
        total = total + term
        parts["loss_kd"] = float(term.detach())
    parts["loss_total"] = float(total.detach())
    parts["tau"] = float(bundle.temperature.tau().detach())
    return total, parts

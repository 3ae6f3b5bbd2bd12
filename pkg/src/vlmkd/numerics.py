"""Tensors, parameter storage, gradients, SGD and learning-rate schedules.

Tensors are ``torch.float64`` tensors; reverse-mode differentiation comes from
``torch.autograd``. The optimizer and schedule are written out here so their
update rules are exactly the ones documented below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import torch
from torch import nn

from .errors import ConfigError, ContractError, NumericError, RangeError

DTYPE = torch.float64
NORM_EPS = 1e-12

Tensor = torch.Tensor


def tensor(data, shape: Iterable[int] | None = None) -> Tensor:
    """Build a float64 tensor; ``shape`` reshapes row-major data."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(shape)
        if math.prod(shape) != t.numel():
            raise ContractError(f"cannot view {t.numel()} values as {shape}")
        t = t.reshape(shape)
    return t


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def seeded_generator(*keys: int | str) -> torch.Generator:
    """A torch generator whose seed is a stable function of ``keys``.

    Each component draws from its own stream, so adding or removing one
    module never shifts another module's initialisation.
    """
    h = 0xCBF29CE484222325
    for key in keys:
        for byte in str(key).encode() + b"\x00":
            h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    g = torch.Generator()
    g.manual_seed(h & 0x7FFFFFFFFFFFFFFF)
    return g


class ParamStore:
    """Named trainable tensors with gradient slots and momentum buffers.

    Parameters are shared by reference with the modules they come from, so an
    in-place update here is seen by the module's forward pass.
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        for name, p in (params or {}).items():
            self.add(name, p)

    @classmethod
    def from_modules(cls, modules: Mapping[str, nn.Module | None]) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            if module is None:
                continue
            for name, p in module.named_parameters():
                if p.requires_grad:
                    store.add(f"{prefix}.{name}", p)
        return store

    def add(self, name: str, param: Tensor) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not param.requires_grad:
            param.requires_grad_(True)
        self.params[name] = param
        self.grads[name] = torch.zeros_like(param, requires_grad=False)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def subtree(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for k, g in self.grads.items():
            if k.startswith(prefix):
                total += float((g * g).sum())
        return math.sqrt(total)


def forward_backward(graph_fn: Callable[[ParamStore], Tensor], store: ParamStore) -> float:
    """Evaluate ``graph_fn(store)`` and overwrite every gradient slot.

    Parameters the loss does not depend on receive exact zeros.
    """
    for name, p in store.params.items():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite values in parameter {name!r}")
    loss = graph_fn(store)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1 or loss.dim() > 1:
        raise ContractError("graph_fn must return a scalar tensor")
    loss = loss.reshape(())
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()!r}")
    names = list(store.params)
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, [store.params[n] for n in names], allow_unused=True)
    else:
        grads = [None] * len(names)
    for name, g in zip(names, grads):
        slot = store.grads[name]
        if g is None:
            slot.zero_()
            continue
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        slot.copy_(g)
    return float(loss.detach())


@torch.no_grad()
def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """buffer <- momentum*buffer + grad + wd*param;  param <- param - lr*buffer."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, p in store.params.items():
        d = store.grads[name]
        if weight_decay:
            d = d + weight_decay * p
        buf = store.buffers.get(name)
        if buf is None:
            # first step: momentum*0 + d
            buf = d.clone()
            store.buffers[name] = buf
        else:
            buf.mul_(momentum).add_(d)
        p.sub_(lr * buf)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be a positive integer")
        if self.kind not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise RangeError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    if step == schedule.total_steps:
        return 0.0
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))


def l2_normalize(v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    norm = torch.linalg.vector_norm(v, dim=axis, keepdim=True)
    return v / norm.clamp_min(eps)

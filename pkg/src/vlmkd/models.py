"""Student/teacher backbones, classifier heads, text adaptors and temperature."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ContractError
from .numerics import DTYPE, ParamStore, l2_normalize

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 1e-3, 10.0
BN_MOMENTUM = 0.1


def _seeded(seed: int, name: str, ctor):
    """Construct a module with its own RNG stream so components initialise independently."""
    from .numerics import seeded_generator

    g = seeded_generator(seed, name)
    previous = torch.get_default_dtype()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=g)))
        # draw initial weights in float64 whatever the caller's global default is
        torch.set_default_dtype(DTYPE)
        try:
            module = ctor()
        finally:
            torch.set_default_dtype(previous)
    return module.to(DTYPE)


class Backbone(nn.Module):
    """Four stride-2 conv blocks, global average pooling and a final affine map."""

    def __init__(self, d_img: int = 128, width: int = 1, channels=(16, 32, 64, 128)):
        super().__init__()
        chans = [3] + [c * width for c in channels]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(cout, momentum=BN_MOMENTUM), nn.ReLU()]
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(chans[-1], d_img)
        self.d_img = d_img

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``images`` is (B, H, W, 3) with values in [0, 1]."""
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ContractError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
        x = images.to(DTYPE).permute(0, 3, 1, 2)
        x = self.features(x)
        return self.fc(x.mean(dim=(2, 3)))


class ClassifierHead(nn.Module):
    def __init__(self, d_img: int, num_classes: int, kind: str = "cosine", scale: float = 16.0):
        super().__init__()
        if kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.weight = nn.Parameter(torch.empty(num_classes, d_img, dtype=DTYPE))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if kind == "linear":
            self.bias = nn.Parameter(torch.zeros(num_classes, dtype=DTYPE))
        else:
            self.log_scale = nn.Parameter(torch.tensor(math.log(scale), dtype=DTYPE))

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-1] != self.weight.shape[1]:
            raise ContractError(f"embedding dim {emb.shape[-1]} != head dim {self.weight.shape[1]}")
        if self.kind == "linear":
            return emb @ self.weight.T + self.bias
        return self.scale * (l2_normalize(emb) @ l2_normalize(self.weight).T)


def classify(head: ClassifierHead, embeddings: torch.Tensor) -> torch.Tensor:
    return head(embeddings)


class TextAdaptor(nn.Module):
    """``depth`` x (affine, batch-norm, ReLU) blocks followed by an affine map to ``out_dim``."""

    def __init__(self, d_img: int, out_dim: int, depth: int = 1, hidden: int | None = None):
        super().__init__()
        if depth not in (0, 1, 2):
            raise ConfigError("adaptor depth must be 0, 1 or 2")
        hidden = hidden or d_img
        layers: list[nn.Module] = []
        width = d_img
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.BatchNorm1d(hidden, momentum=BN_MOMENTUM), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, out_dim))
        self.net = nn.Sequential(*layers)
        self.depth = depth
        self.out_dim = out_dim

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if self.training and self.depth > 0 and emb.shape[0] < 2:
            raise ContractError("batch normalisation in train mode needs a batch of at least 2; use a larger batch")
        return self.net(emb)


def adapt(adaptor: TextAdaptor, embeddings: torch.Tensor, mode: str = "train") -> torch.Tensor:
    adaptor.train(mode == "train")
    return adaptor(embeddings)


class Temperature(nn.Module):
    """Learnable tau stored as log(1/tau), clamped to [1e-3, 10]."""

    def __init__(self, init: float = TAU_INIT):
        super().__init__()
        self.log_inv_tau = nn.Parameter(torch.tensor(math.log(1.0 / init), dtype=DTYPE))

    def inv_tau(self) -> torch.Tensor:
        return self.log_inv_tau.clamp(math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN)).exp()

    def tau(self) -> torch.Tensor:
        return 1.0 / self.inv_tau()


@dataclass
class ArchConfig:
    num_classes: int
    d_img: int = 128
    width: int = 1
    head: str = "cosine"
    head_scale: float = 16.0
    text_dim: int | None = None
    adaptor_depth: int = 1
    num_adaptors: int = 0
    kd_dim: int | None = None
    tau_init: float = TAU_INIT
    seed: int = 0


class ModelBundle(nn.Module):
    """Everything trainable for one run, plus an optional frozen teacher (never saved here)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        s = arch.seed
        self.backbone = _seeded(s, "backbone", lambda: Backbone(arch.d_img, arch.width))
        self.head = _seeded(s, "head", lambda: ClassifierHead(arch.d_img, arch.num_classes, arch.head, arch.head_scale))
        self.adaptors = nn.ModuleList()
        if arch.num_adaptors:
            if not arch.text_dim:
                raise ConfigError("text adaptors need text_dim")
            for k in range(arch.num_adaptors):
                self.adaptors.append(_seeded(s, f"adaptor{k}",
                                             lambda: TextAdaptor(arch.d_img, arch.text_dim, arch.adaptor_depth)))
        self.temperature = Temperature(arch.tau_init).to(DTYPE)
        self.kd_proj = _seeded(s, "kd_proj", lambda: nn.Linear(arch.d_img, arch.kd_dim)) if arch.kd_dim else None
        object.__setattr__(self, "teacher", None)

    def attach_teacher(self, teacher: "ModelBundle | None") -> None:
        # kept out of the module tree so it is never trained or saved with the student
        object.__setattr__(self, "teacher", freeze(teacher) if teacher is not None else None)

    def store(self) -> ParamStore:
        return ParamStore.from_modules({
            "backbone": self.backbone, "head": self.head, "adaptors": self.adaptors,
            "temperature": self.temperature, "kd_proj": self.kd_proj,
        })

    def train(self, mode: bool = True):
        super().train(mode)
        if self.teacher is not None:
            self.teacher.eval()
        return self

    def state_tensors(self, include_adaptors: bool = True) -> dict[str, torch.Tensor]:
        out = {}
        for k, v in self.state_dict().items():
            if not include_adaptors and k.startswith("adaptors."):
                continue
            out[k] = v
        return out

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Eval-mode (logits, embeddings); leaves the train/eval flag as it was."""
        was = self.training
        self.eval()
        try:
            emb = self.backbone(images)
            return self.head(emb), emb
        finally:
            self.train(was)


def freeze(bundle: ModelBundle) -> ModelBundle:
    bundle.eval()
    for p in bundle.parameters():
        p.requires_grad_(False)
    return bundle


# weight files: "VKDBND01", u32 version, u64 count, then per tensor
# u16 name_len, name, u8 dtype (0 f64, 1 i64), u8 ndim, ndim x u32, raw LE data
BUNDLE_MAGIC = b"VKDBND01"
BUNDLE_VERSION = 1
_DT = {0: ("<f8", torch.float64), 1: ("<i8", torch.int64)}


def save_bundle(path: str | Path, bundle: ModelBundle, include_adaptors: bool = False,
                extra: dict | None = None) -> None:
    path = Path(path)
    tensors = bundle.state_tensors(include_adaptors)
    parts = [BUNDLE_MAGIC, struct.pack("<IQ", BUNDLE_VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        code = 1 if t.dtype == torch.int64 else 0
        arr = t.numpy().astype(_DT[code][0])
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), code, arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    arch = asdict(bundle.arch)
    if not include_adaptors:
        arch["num_adaptors"] = 0
    sidecar = {"format": "vlmkd-bundle/1", "arch": arch, "tau_init": bundle.arch.tau_init,
               "tau": float(bundle.temperature.tau()), "includes_adaptors": include_adaptors}
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _read_tensors(path: Path) -> dict[str, torch.Tensor]:
    buf = path.read_bytes()
    if buf[:8] != BUNDLE_MAGIC:
        raise ConfigError(f"{path} is not a model bundle")
    version, count = struct.unpack_from("<IQ", buf, 8)
    if version != BUNDLE_VERSION:
        raise ConfigError(f"{path}: unsupported bundle version {version}")
    pos = 20
    out = {}
    for _ in range(count):
        n, code, ndim = struct.unpack_from("<HBB", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode()
        pos += n
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        np_dt, torch_dt = _DT[code]
        count_el = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=np_dt, count=count_el, offset=pos).reshape(shape)
        pos += arr.nbytes
        out[name] = torch.from_numpy(arr.copy()).to(torch_dt)
    return out


def load_bundle(path: str | Path, num_classes: int | None = None, **expect) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; train a model first (`vlmkd train` or `vlmkd teach`)")
    sidecar = json.loads(path.with_suffix(".json").read_text())
    arch = ArchConfig(**sidecar["arch"])
    if num_classes is not None and arch.num_classes != num_classes:
        raise ConfigError(f"bundle has {arch.num_classes} classes, dataset has {num_classes}")
    for key, want in expect.items():
        if want is not None and getattr(arch, key) != want:
            raise ConfigError(f"bundle {key}={getattr(arch, key)!r}, expected {want!r}")
    bundle = ModelBundle(arch)
    tensors = _read_tensors(path)
    own = bundle.state_tensors()
    if set(tensors) != set(own):
        raise ConfigError(f"architecture mismatch: {sorted(set(tensors) ^ set(own))[:5]}")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise ConfigError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(own[name].shape)}")
    bundle.load_state_dict(tensors, strict=False)
    return bundle

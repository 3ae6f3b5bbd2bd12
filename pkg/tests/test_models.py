import math

import pytest
import torch

from vlmkd.errors import ConfigError, ContractError
from vlmkd.models import (ArchConfig, Backbone, ClassifierHead, ModelBundle, Temperature, TextAdaptor,
                          adapt, load_bundle, save_bundle)
from vlmkd.numerics import DTYPE

from .oracles import grad_check

TINY_CH = (2, 3, 4, 4)


def test_backbone_shapes_and_contract():
    bb = Backbone(d_img=6, channels=TINY_CH).to(DTYPE)
    out = bb(torch.rand(3, 16, 16, 3))
    assert out.shape == (3, 6) and out.dtype == torch.float64
    with pytest.raises(ContractError):
        bb(torch.rand(3, 3, 16, 16))


@pytest.mark.parametrize("train_mode", [True, False])
def test_backbone_gradients(train_mode):
    torch.manual_seed(0)
    bb = Backbone(d_img=5, channels=TINY_CH).to(DTYPE).train(train_mode)
    # zero-initialised norm biases can sit exactly on a ReLU kink; move to a generic point
    with torch.no_grad():
        for m in bb.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.uniform_(0.5, 1.5)
                m.bias.uniform_(-0.5, 0.5)
    x = torch.rand(4, 8, 8, 3, requires_grad=True)
    w = torch.randn(4, 5)
    params = list(bb.parameters()) + [x]
    assert grad_check(lambda: (bb(x) * w).sum(), params, max_entries=6) < 1e-4


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_head_gradients(kind):
    torch.manual_seed(1)
    head = ClassifierHead(6, 4, kind).to(DTYPE)
    e = torch.randn(5, 6, requires_grad=True)
    w = torch.randn(5, 4)
    assert grad_check(lambda: (head(e) * w).sum(), list(head.parameters()) + [e]) < 1e-6


def test_cosine_head_is_scale_invariant_and_bounded():
    head = ClassifierHead(6, 4, "cosine", scale=16).to(DTYPE)
    e = torch.randn(5, 6)
    z = head(e)
    assert torch.allclose(z, head(7.5 * e), atol=1e-12)
    assert float(z.abs().max()) <= 16 + 1e-9
    assert math.isclose(float(head.scale), 16.0, rel_tol=1e-12)
    with pytest.raises(ConfigError):
        ClassifierHead(6, 4, "mlp")


@pytest.mark.parametrize("depth", [0, 1, 2])
def test_adaptor_gradients(depth):
    torch.manual_seed(2)
    a = TextAdaptor(6, 5, depth).to(DTYPE)
    e = torch.randn(7, 6, requires_grad=True)
    w = torch.randn(7, 5)
    assert grad_check(lambda: (a(e) * w).sum(), list(a.parameters()) + [e]) < 1e-5


def test_adaptor_depth_layout_and_singleton_guard():
    assert len(TextAdaptor(6, 5, 0).net) == 1
    assert len(TextAdaptor(6, 5, 2).net) == 7
    a = TextAdaptor(6, 5, 1).to(DTYPE)
    with pytest.raises(ContractError):
        a(torch.randn(1, 6))
    assert adapt(a, torch.randn(1, 6), mode="eval").shape == (1, 5)
    with pytest.raises(ConfigError):
        TextAdaptor(6, 5, 3)


def test_temperature_init_clamp_and_gradient():
    t = Temperature(0.07)
    assert math.isclose(float(t.tau()), 0.07, rel_tol=1e-12)
    with torch.no_grad():
        t.log_inv_tau.fill_(100.0)
    assert math.isclose(float(t.tau()), 1e-3, rel_tol=1e-12)
    t2 = Temperature(0.3)
    assert grad_check(lambda: 2.0 / t2.tau() + t2.tau() ** 2, [t2.log_inv_tau]) < 1e-6


def test_kd_projection_gradients():
    b = ModelBundle(ArchConfig(num_classes=3, d_img=6, kd_dim=4, seed=0))
    e = torch.randn(3, 6, requires_grad=True)
    w = torch.randn(3, 4)
    assert grad_check(lambda: (b.kd_proj(e) * w).sum(), list(b.kd_proj.parameters()) + [e]) < 1e-6


def test_components_initialise_independently():
    a = ModelBundle(ArchConfig(num_classes=3, d_img=8, seed=4))
    b = ModelBundle(ArchConfig(num_classes=3, d_img=8, seed=4, text_dim=5, num_adaptors=2, kd_dim=3))
    assert torch.equal(a.backbone.fc.weight, b.backbone.fc.weight)
    assert torch.equal(a.head.weight, b.head.weight)
    assert not torch.equal(b.adaptors[0].net[0].weight, b.adaptors[1].net[0].weight)
    c = ModelBundle(ArchConfig(num_classes=3, d_img=8, seed=5))
    assert not torch.equal(a.head.weight, c.head.weight)


def test_teacher_is_frozen_and_unregistered():
    teacher = ModelBundle(ArchConfig(num_classes=3, d_img=8, seed=1))
    student = ModelBundle(ArchConfig(num_classes=3, d_img=8, seed=2))
    student.attach_teacher(teacher)
    assert not any(k.startswith("teacher") for k in student.state_dict())
    assert all(not p.requires_grad for p in teacher.parameters())
    student.train()
    assert not teacher.training and student.training
    assert not any(k.startswith("teacher") for k in student.store())


def test_predict_restores_mode():
    b = ModelBundle(ArchConfig(num_classes=3, d_img=8))
    b.train()
    logits, emb = b.predict(torch.rand(2, 16, 16, 3))
    assert b.training and logits.shape == (2, 3) and emb.shape == (2, 8)


def test_bundle_round_trip(tmp_path):
    b = ModelBundle(ArchConfig(num_classes=3, d_img=8, text_dim=5, num_adaptors=1, kd_dim=4, seed=9))
    b.train()
    b.backbone(torch.rand(4, 16, 16, 3))  # move BN running stats
    save_bundle(tmp_path / "m.bin", b)
    back = load_bundle(tmp_path / "m.bin", num_classes=3)
    assert len(back.adaptors) == 0
    own = b.state_tensors(include_adaptors=False)
    for k, v in back.state_tensors().items():
        assert torch.equal(v, own[k]), k
    x = torch.rand(2, 16, 16, 3)
    assert torch.equal(b.predict(x)[0], back.predict(x)[0])
    save_bundle(tmp_path / "m2.bin", back)
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    with pytest.raises(ConfigError):
        load_bundle(tmp_path / "m.bin", num_classes=5)
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "none.bin")


def test_initialisation_ignores_global_default_dtype():
    arch = ArchConfig(num_classes=3, d_img=8, text_dim=5, num_adaptors=1, kd_dim=4, seed=2)
    previous = torch.get_default_dtype()
    try:
        torch.set_default_dtype(torch.float32)
        a = ModelBundle(arch).state_dict()
        torch.set_default_dtype(torch.float64)
        b = ModelBundle(arch).state_dict()
    finally:
        torch.set_default_dtype(previous)
    assert all(torch.equal(v, b[k]) for k, v in a.items())

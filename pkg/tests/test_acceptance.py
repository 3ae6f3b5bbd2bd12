"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting. The training-direction criteria (4-7) share one session fixture
that runs the shipped ablation grid on the default benchmark.
"""
import math
import time

import numpy as np
import pytest
import torch

from vlmkd.cli import load_grid_spec, main
from vlmkd.data import DataConfig
from vlmkd.embedding import EmbeddingCache, cache_bytes, cache_read, cache_write
from vlmkd.errors import CacheCorruptionError, CacheFormatError, CacheIntegrityError
from vlmkd.experiments import Pipeline, merge_config
from vlmkd.embedding import TextEncoderSpec
from vlmkd.losses import loss_cls, loss_kd_image, loss_scl, loss_text
from vlmkd.models import ArchConfig, Backbone, ClassifierHead, ModelBundle, Temperature, TextAdaptor
from vlmkd.numerics import DTYPE
from vlmkd.train import TeacherConfig

from .conftest import record
from .oracles import ce_oracle, grad_check, kd_oracle, scl_oracle, text_loss_oracle

FD_TOL = 1e-4
ORACLE_TOL = 1e-10
IDENTITY_TOL = 1e-12
INVARIANCE_TOL = 1e-10


def _g(seed):
    return torch.Generator().manual_seed(seed)


# 1 -------------------------------------------------------------------------

def _fd_cases():
    """name -> factory(seed) returning (fn, params)."""

    def cls(seed):
        g = _g(seed)
        z = torch.randn(6, 5, generator=g, requires_grad=True)
        y = torch.randint(0, 5, (6,), generator=g)
        pi = torch.rand(5, generator=g) + 0.05
        return (lambda: loss_cls(z, y, pi / pi.sum())), [z]

    def scl(seed):
        g = _g(seed)
        e = torch.randn(8, 6, generator=g, requires_grad=True)
        y = torch.randint(0, 3, (8,), generator=g)
        return (lambda: loss_scl(e, y, 0.2)), [e]

    def text(seed):
        g = _g(seed)
        f = torch.randn(6, 5, generator=g, requires_grad=True)
        t = torch.randn(6, 5, generator=g)
        temp = Temperature(0.05 + float(torch.rand(1, generator=g)))
        return (lambda: loss_text(f, t, temp.tau())), [f, temp.log_inv_tau]

    def kd(seed):
        g = _g(seed)
        qs = torch.randn(5, 4, generator=g, requires_grad=True)
        fs = torch.randn(5, 3, generator=g, requires_grad=True)
        qt, ft = torch.randn(5, 4, generator=g), torch.randn(5, 3, generator=g)
        return (lambda: loss_kd_image(qs, qt, fs, ft)), [qs, fs]

    def backbone(seed):
        torch.manual_seed(seed)
        bb = Backbone(d_img=4, channels=(2, 3, 3, 4)).to(DTYPE)
        with torch.no_grad():
            for m in bb.modules():
                if isinstance(m, torch.nn.BatchNorm2d):
                    m.weight.uniform_(0.5, 1.5)
                    m.bias.uniform_(-0.5, 0.5)
        x = torch.rand(3, 8, 8, 3, generator=_g(seed))
        w = torch.randn(3, 4, generator=_g(seed + 1))
        return (lambda: (bb(x) * w).sum()), list(bb.parameters())

    def head(kind):
        def make(seed):
            torch.manual_seed(seed)
            h = ClassifierHead(5, 4, kind).to(DTYPE)
            e = torch.randn(4, 5, generator=_g(seed), requires_grad=True)
            w = torch.randn(4, 4, generator=_g(seed + 1))
            return (lambda: (h(e) * w).sum()), list(h.parameters()) + [e]
        return make

    def adaptor(depth):
        def make(seed):
            torch.manual_seed(seed)
            a = TextAdaptor(5, 4, depth).to(DTYPE)
            e = torch.randn(6, 5, generator=_g(seed), requires_grad=True)
            w = torch.randn(6, 4, generator=_g(seed + 1))
            return (lambda: (a(e) * w).sum()), list(a.parameters()) + [e]
        return make

    def kd_proj(seed):
        b = ModelBundle(ArchConfig(num_classes=2, d_img=5, kd_dim=3, seed=seed))
        e = torch.randn(4, 5, generator=_g(seed), requires_grad=True)
        w = torch.randn(4, 3, generator=_g(seed + 1))
        return (lambda: (b.kd_proj(e) * w).sum()), list(b.kd_proj.parameters()) + [e]

    return {"loss_cls": cls, "loss_scl": scl, "loss_text(+tau)": text, "loss_kd_image": kd,
            "backbone": backbone, "head[cosine]": head("cosine"), "head[linear]": head("linear"),
            "adaptor[0]": adaptor(0), "adaptor[1]": adaptor(1), "adaptor[2]": adaptor(2),
            "kd_proj": kd_proj}


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, make in _fd_cases().items():
        errs = []
        for seed in range(20):
            fn, params = make(seed)
            errs.append(grad_check(fn, params, max_entries=8, seed=seed))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v <= FD_TOL for v in worst.values()) and elapsed < 60
    top = max(worst, key=worst.get)
    record(1, "finite-difference gradients", ok,
           f"{len(worst)} components x 20 seeds, worst {top}={worst[top]:.2e} (tol {FD_TOL:g}), {elapsed:.1f}s (< 60s)")
    assert ok, worst


# 2 -------------------------------------------------------------------------

def test_criterion_02_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst = {"loss_text": 0.0, "loss_scl": 0.0, "loss_kd_image": 0.0}
    for _ in range(200):
        b, d, c = int(rng.integers(2, 9)), int(rng.integers(1, 17)), int(rng.integers(2, 17))
        f, t = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        tau = float(rng.uniform(0.02, 2.0))
        red = "mean" if rng.random() < 0.5 else "sum"
        got = float(loss_text(torch.tensor(f), torch.tensor(t), tau, red))
        worst["loss_text"] = max(worst["loss_text"], abs(got - text_loss_oracle(f.tolist(), t.tolist(), tau, red)))

        e, y = rng.normal(size=(b, d)), rng.integers(0, 3, size=b)
        temp = float(rng.uniform(0.05, 1.0))
        got = float(loss_scl(torch.tensor(e), torch.tensor(y), temp))
        worst["loss_scl"] = max(worst["loss_scl"], abs(got - scl_oracle(e.tolist(), y.tolist(), temp)))

        b1 = int(rng.integers(1, 9))
        qs, qt = rng.normal(size=(b1, c)) * 3, rng.normal(size=(b1, c)) * 3
        fs, ft = rng.normal(size=(b1, d)), rng.normal(size=(b1, d))
        got = float(loss_kd_image(*(torch.tensor(a) for a in (qs, qt, fs, ft))))
        ref = kd_oracle(qs.tolist(), qt.tolist(), fs.tolist(), ft.tolist())
        worst["loss_kd_image"] = max(worst["loss_kd_image"], abs(got - ref))
    ok = all(v <= ORACLE_TOL for v in worst.values())
    record(2, "brute-force oracle equivalence", ok,
           "200 instances each, max |diff| " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f" (tol {ORACLE_TOL:g})")
    assert ok, worst


# 3 -------------------------------------------------------------------------

def test_criterion_03_logit_adjustment_identity():
    rng = np.random.default_rng(3)
    worst_adj = worst_uniform = 0.0
    for _ in range(100):
        b, c = int(rng.integers(1, 9)), int(rng.integers(2, 17))
        z = rng.normal(size=(b, c)) * 4
        y = rng.integers(0, c, size=b)
        pi = rng.dirichlet(np.ones(c)) + 1e-6
        pi = pi / pi.sum()
        got = float(loss_cls(torch.tensor(z), torch.tensor(y), torch.tensor(pi)))
        worst_adj = max(worst_adj, abs(got - ce_oracle((z + np.log(pi)).tolist(), y.tolist())))
        uni = float(loss_cls(torch.tensor(z), torch.tensor(y), torch.full((c,), 1.0 / c)))
        ce = float(torch.nn.functional.cross_entropy(torch.tensor(z), torch.tensor(y)))
        worst_uniform = max(worst_uniform, abs(uni - ce))
    ok = worst_adj <= IDENTITY_TOL and worst_uniform <= IDENTITY_TOL
    record(3, "logit-adjustment identity", ok,
           f"100 instances, |L_cls - CE(Z+log pi)| max {worst_adj:.1e}, uniform-pi vs plain CE max "
           f"{worst_uniform:.1e} (tol {IDENTITY_TOL:g})")
    assert ok


# 4-7 -----------------------------------------------------------------------

SEEDS = (1, 2, 3)
NEEDED = ("baseline", "KD-T", "KD-I", "KD-I-T", "G+T1 shared", "G+T1 concat", "adaptor linear")


@pytest.fixture(scope="session")
def benchmark():
    """Mean val metrics over seeds 1-3 for every run the directional criteria compare."""
    spec = load_grid_spec("ablations")
    pipe = Pipeline(DataConfig(**spec["data"]), TextEncoderSpec(**spec["encoder"]),
                    TeacherConfig(**spec["teacher"]))
    runs = {r["name"]: r for r in spec["runs"]}
    out, timing = {}, {}
    for name in NEEDED:
        run = runs[name]
        per_run = dict(run.get("train", {}), loss=run["loss"])
        reports, secs = [], []
        for seed in SEEDS:
            res = pipe.run(merge_config(spec["train"], per_run, {"seed": seed}), run["prompts"])
            reports.append(res.report)
            secs.append(res.seconds)
        out[name] = {m: float(np.mean([getattr(r, m) for r in reports]))
                     for m in ("top1_overall", "top1_few", "top1_many", "top1_medium")}
        timing[name] = max(secs)
    out["teacher"] = {"top1_overall": pipe.teacher()[1]["top1_overall"]}
    return out, timing


def _pct(x):
    return f"{100 * x:.1f}"


@pytest.mark.slow
def test_criterion_04_text_distillation_gain(benchmark):
    res, timing = benchmark
    base, kdt = res["baseline"], res["KD-T"]
    few_gain = 100 * (kdt["top1_few"] - base["top1_few"])
    all_gain = 100 * (kdt["top1_overall"] - base["top1_overall"])
    slowest = max(timing.values())
    ok = few_gain >= 5.0 and all_gain >= 2.0 and slowest <= 600
    record(4, "text distillation gain over L_cls", ok,
           f"Few {_pct(base['top1_few'])} -> {_pct(kdt['top1_few'])} (+{few_gain:.1f} >= 5), overall "
           f"{_pct(base['top1_overall'])} -> {_pct(kdt['top1_overall'])} (+{all_gain:.1f} >= 2), "
           f"slowest run {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_05_complementarity(benchmark):
    res, _ = benchmark
    both, img, txt = (res[k]["top1_overall"] for k in ("KD-I-T", "KD-I", "KD-T"))
    ok = both >= img and both >= txt
    record(5, "image + text distillation complementarity", ok,
           f"KD-I-T {_pct(both)} vs KD-I {_pct(img)}, KD-T {_pct(txt)} "
           f"(teacher alone {_pct(res['teacher']['top1_overall'])})")
    assert ok


@pytest.mark.slow
def test_criterion_06_aggregation_ordering(benchmark):
    res, _ = benchmark
    shared, single, concat = (res[k]["top1_overall"] for k in ("G+T1 shared", "KD-T", "G+T1 concat"))
    ok = shared >= single and shared >= concat
    record(6, "shared aggregation at Q=2", ok,
           f"shared {_pct(shared)} vs single-prompt {_pct(single)}, concat {_pct(concat)}")
    assert ok


@pytest.mark.slow
def test_criterion_07_adaptor_depth(benchmark):
    res, _ = benchmark
    mlp, linear = res["KD-T"]["top1_overall"], res["adaptor linear"]["top1_overall"]
    ok = mlp >= linear
    record(7, "one-block adaptor vs linear adaptor", ok, f"depth-1 {_pct(mlp)} vs depth-0 {_pct(linear)}")
    assert ok


# 8 -------------------------------------------------------------------------

def test_criterion_08_cache_format_fidelity(tmp_path):
    rng = np.random.default_rng(8)
    entries = {}
    for k in range(50):
        v = rng.normal(size=32)
        entries[f"train-{k:06d}"] = v / np.linalg.norm(v)
    entries["train-000050"] = np.zeros(32)
    cache = EmbeddingCache(32, "hashed_bow-fnv1a64-d32", entries)
    p = tmp_path / "c.emb"
    cache_write(p, cache)
    back = cache_read(p)
    exact = all(np.array_equal(back.entries[k], v.astype(np.float32).astype(np.float64)) for k, v in entries.items())
    cache_write(tmp_path / "c2.emb", back)
    deterministic = p.read_bytes() == (tmp_path / "c2.emb").read_bytes() == cache_bytes(cache)
    raw = p.read_bytes()

    def rejects(blob, err):
        q = tmp_path / "bad.emb"
        q.write_bytes(blob)
        try:
            cache_read(q)
        except err:
            return True
        except Exception:
            return False
        return False

    bad = dict(entries)
    bad["train-000007"] = entries["train-000007"] * 1.5
    magic = rejects(b"XXXXXXXX" + raw[8:], CacheFormatError)
    trunc = all(rejects(raw[:n], CacheCorruptionError) for n in (16, 30, len(raw) // 2, len(raw) - 1))
    norm = rejects(cache_bytes(EmbeddingCache(32, "x", bad)), CacheIntegrityError)
    ok = exact and deterministic and magic and trunc and norm
    record(8, "embedding cache format fidelity", ok,
           f"float32-exact={exact} byte-deterministic={deterministic} bad-magic={magic} "
           f"truncation={trunc} bad-norm={norm}")
    assert ok


# 9 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_cli_determinism(tmp_path):
    data, cap, emb = tmp_path / "data", tmp_path / "cap", tmp_path / "emb"
    assert main(["gen-data", "--out", str(data)]) == 0
    assert main(["caption", "--data", str(data), "--prompt", "general-short", "--out", str(cap)]) == 0
    assert main(["encode", "--captions", str(cap / "captions_general-short.jsonl"), "--out", str(emb)]) == 0
    flags = ["train", "--data", str(data), "--mode", "shared", "--caches", str(emb / "general-short.emb"),
             "--seed", "1", "--epochs", "10"]
    assert main(flags + ["--out", str(tmp_path / "a")]) == 0
    assert main(flags + ["--out", str(tmp_path / "b")]) == 0
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
            for n in ("model.bin", "model.json", "checkpoint.bin", "report.json", "train_log.jsonl")}
    ok = all(same.values())
    record(9, "bitwise-reproducible training", ok, " ".join(f"{k}={'same' if v else 'DIFF'}" for k, v in same.items()))
    assert ok


# 10 ------------------------------------------------------------------------

def test_criterion_10_invariances():
    rng = np.random.default_rng(10)
    shift = scale = perm = 0.0
    kl_min = math.inf
    for _ in range(500):
        b, c, d = int(rng.integers(2, 9)), int(rng.integers(2, 12)), int(rng.integers(1, 12))
        z = torch.tensor(rng.normal(size=(b, c)) * 3)
        y = torch.tensor(rng.integers(0, c, size=b))
        pi = torch.tensor(rng.dirichlet(np.ones(c)) + 1e-3)
        pi = pi / pi.sum()
        delta = torch.tensor(rng.uniform(-20, 20, size=(b, 1)))
        shift = max(shift, abs(float(loss_cls(z + delta, y, pi)) - float(loss_cls(z, y, pi))))

        f, t = torch.tensor(rng.normal(size=(b, d))), torch.tensor(rng.normal(size=(b, d)))
        tau = float(rng.uniform(0.02, 1.0))
        a = torch.tensor(rng.uniform(0.01, 100, size=(b, 1)))
        s = torch.tensor(rng.uniform(0.01, 100, size=(b, 1)))
        scale = max(scale, abs(float(loss_text(a * f, s * t, tau)) - float(loss_text(f, t, tau))))
        order = torch.tensor(rng.permutation(b))
        rows = loss_text(f, t, tau, reduction="none")
        perm = max(perm, float((loss_text(f[order], t[order], tau, reduction="none") - rows[order]).abs().max()))

        qs, qt = torch.tensor(rng.normal(size=(b, c)) * 5), torch.tensor(rng.normal(size=(b, c)) * 5)
        same = torch.zeros(b, d)
        kl_min = min(kl_min, float(loss_kd_image(qs, qt, same, same)))
    ok = shift <= INVARIANCE_TOL and scale <= INVARIANCE_TOL and perm <= INVARIANCE_TOL and kl_min >= -INVARIANCE_TOL
    record(10, "invariance suite", ok,
           f"500 trials: logit shift {shift:.1e}, text scale {scale:.1e}, text permutation {perm:.1e}, "
           f"min KL {kl_min:.2e} (tol {INVARIANCE_TOL:g})")
    assert ok

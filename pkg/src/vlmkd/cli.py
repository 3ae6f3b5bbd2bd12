"""``vlmkd`` command line: gen-data, caption, encode, teach, train, eval, export, grid."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from . import __version__
from .captions import API_KEY_ENV, CaptionSet, RemoteCaptioner, build_caption_set, concat_caption_sets, get_prompt
from .data import DataConfig, generate, load_dataset, save_dataset
from .embedding import TextEncoderSpec, cache_read, cache_write, encode_captions
from .errors import ConfigError, PartialFailure, VlmKdError
from .experiments import grid_json, grid_markdown, run_experiment_grid
from .losses import LossConfig
from .models import load_bundle, save_bundle
from .train import TeacherConfig, TrainConfig, evaluate, export_embeddings, make_teacher, train

log = logging.getLogger("vlmkd")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out: str, force: bool = True) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, config: dict, artifacts: list, started: str,
                    seeds: list | None = None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds or [],
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _bundle_path(p: str, default_name: str) -> Path:
    path = Path(p)
    return path / default_name if path.is_dir() else path


def cmd_gen_data(args) -> int:
    started = _now()
    cfg = DataConfig(num_classes=args.classes, n_max=args.n_max, n_min=args.n_min, gamma=args.gamma,
                     image_size=args.size, seed=args.seed)
    cfg.validate()
    out = _prepare_out(args.out, args.force)
    ds = generate(cfg)
    save_dataset(ds, out)
    splits = ds.split_of_class
    for name in ("Many", "Medium", "Few"):
        cls = [c for c, s in enumerate(splits) if s == name]
        print(f"{name:<6} {len(cls):>3} classes  {sum(ds.class_counts[c] for c in cls):>6} images")
    print(f"train {len(ds.images)}  val {len(ds.val_images)}  -> {out}")
    _write_manifest(out, "gen-data", asdict(cfg), ["meta.json", "index.json", "pixels.bin"], started, [cfg.seed])
    return 0


def cmd_caption(args) -> int:
    started = _now()
    template = get_prompt(args.prompt)
    if args.source == "remote" and not args.endpoint:
        raise ConfigError("--source remote needs --endpoint")
    ds = load_dataset(args.data)
    out = _prepare_out(args.out)
    path = out / f"captions_{template.id}.jsonl"
    captioner = None
    if args.source == "remote":
        captioner = RemoteCaptioner.from_env(args.endpoint, model=args.model)
    config = {"data": args.data, "prompt": template.id, "source": args.source, "endpoint": args.endpoint,
              "model": args.model if args.source == "remote" else None, "resume": args.resume}
    try:
        cs = build_caption_set(ds, template, args.source, path, args.resume, captioner, args.workers)
    except PartialFailure as exc:
        config["missing"] = len(exc.missing)
        _write_manifest(out, "caption", config, [path.name, path.with_suffix(".missing.json").name], started)
        raise
    print(f"{len(cs.records)} captions ({getattr(cs, 'fetched', 0)} new) -> {path}")
    _write_manifest(out, "caption", config, [path.name], started)
    return 0


def cmd_encode(args) -> int:
    started = _now()
    if args.encoder == "remote" and not args.endpoint:
        raise ConfigError("--encoder remote needs --endpoint")
    spec = TextEncoderSpec("hashed_bow" if args.encoder == "hashed" else "remote", args.dim, args.endpoint)
    sets = []
    for p in args.captions:
        cs = CaptionSet.load(p)
        if not cs.records:
            raise ConfigError(f"caption file {p} is empty or missing")
        sets.append(cs)
    if args.concat:
        sets = [concat_caption_sets(sets)]
    out = _prepare_out(args.out)
    written, dims = [], set()
    key = os.environ.get(API_KEY_ENV)
    for cs in sets:
        cache = encode_captions(cs.records, spec, api_key=key)
        dims.add(cache.dim)
        if len(dims) > 1:
            raise ConfigError(f"caches in one run disagree on dimension: {sorted(dims)}")
        path = out / f"{_safe(cs.prompt_id)}.emb"
        cache_write(path, cache)
        written += [path.name, path.name + ".meta.json"]
        print(f"{len(cache)} vectors, dim {cache.dim}, {len(cache.flagged)} flagged -> {path}")
    _write_manifest(out, "encode", {"captions": args.captions, "encoder": spec.encoder_id,
                                    "dim": args.dim, "concat": args.concat}, written, started)
    return 0


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_+" else "_" for ch in name).strip("_")


def _load_teacher(path: str | None, num_classes: int):
    if not path:
        return None
    return load_bundle(_bundle_path(path, "teacher.bin"), num_classes=num_classes)


def cmd_train(args) -> int:
    started = _now()
    loss = LossConfig(use_cls=True, use_scl=args.scl, text_mode=args.mode, alpha=args.alpha,
                      text_reduction=args.text_reduction, kd_image=args.kd_image,
                      symmetric_text_loss=args.symmetric)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, momentum=args.momentum,
                         weight_decay=args.weight_decay, seed=args.seed, loss=loss, schedule=args.schedule,
                         adaptor_depth=args.adaptor_depth, head=args.head, flip=args.flip)
    caches_paths = args.caches or []
    if loss.uses_text and not caches_paths:
        raise ConfigError(f"--mode {args.mode} needs at least one --caches file")
    config.validate(len(caches_paths) if loss.uses_text else 0)
    if args.kd_image and not args.teacher:
        raise ConfigError("--kd-image needs --teacher pointing at weights written by `vlmkd teach`")
    ds = load_dataset(args.data)
    caches = [cache_read(p) for p in caches_paths] if loss.uses_text else []
    teacher = _load_teacher(args.teacher, ds.num_classes)
    out = _prepare_out(args.out)
    result = train(ds, caches, config, teacher=teacher, log_path=out / "train_log.jsonl")
    save_bundle(out / "model.bin", result.bundle, include_adaptors=False)
    save_bundle(out / "checkpoint.bin", result.bundle, include_adaptors=True)
    (out / "report.json").write_text(json.dumps(result.report.to_dict(), indent=2, sort_keys=True) + "\n")
    rep = result.report
    print(f"top1 {rep.top1_overall:.4f}  many {_f(rep.top1_many)}  medium {_f(rep.top1_medium)}  "
          f"few {_f(rep.top1_few)}  ({result.seconds:.1f}s) -> {out}")
    cfg = config.to_dict()
    cfg.update({"data": args.data, "caches": caches_paths, "teacher": args.teacher})
    _write_manifest(out, "train", cfg, ["model.bin", "model.json", "checkpoint.bin", "checkpoint.json",
                                        "train_log.jsonl", "report.json"], started, [args.seed])
    return 0


def _f(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    bundle = load_bundle(_bundle_path(args.bundle, "model.bin"), num_classes=ds.num_classes)
    config = {}
    report_path = _bundle_path(args.bundle, "model.bin").parent / "report.json"
    if report_path.exists():
        config = json.loads(report_path.read_text()).get("config", {})
    rep = evaluate(bundle, ds, args.split, config)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = _prepare_out(args.out)
        (out / "report.json").write_text(text)
        _write_manifest(out, "eval", {"bundle": args.bundle, "data": args.data, "split": args.split},
                        ["report.json"], _now())
    print(text, end="")
    return 0


def cmd_export(args) -> int:
    started = _now()
    ds = load_dataset(args.data)
    bundle = load_bundle(_bundle_path(args.bundle, "model.bin"), num_classes=ds.num_classes)
    caches = [cache_read(p) for p in (args.caches or [])]
    out = _prepare_out(args.out)
    paths = export_embeddings(bundle, ds, caches, out, args.split)
    for p in paths:
        print(p)
    _write_manifest(out, "export", {"bundle": args.bundle, "data": args.data, "caches": args.caches,
                                    "split": args.split}, paths, started)
    return 0


def cmd_teach(args) -> int:
    started = _now()
    ds = load_dataset(args.data)
    cfg = TeacherConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, seed=args.seed,
                        pretrain_per_class=args.pretrain_per_class, pretrain_epochs=args.pretrain_epochs)
    out = _prepare_out(args.out)
    _, manifest = make_teacher(ds, cfg, out)
    print(f"teacher top1 {manifest['top1_overall']:.4f}, feature dim {manifest['teacher_feature_dim']} -> {out}")
    for w in manifest["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    _write_manifest(out, "teach", asdict(cfg), ["teacher.bin", "teacher.json", "teacher_manifest.json"],
                    started, [args.seed])
    return 0


def load_grid_spec(spec: str) -> dict:
    path = Path(spec)
    if path.exists():
        return json.loads(path.read_text())
    name = spec if spec.endswith(".json") else spec + ".json"
    try:
        return json.loads(resources.files("vlmkd.configs").joinpath(name).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"grid spec {spec} not found (builtin: ablations)") from None


def cmd_grid(args) -> int:
    started = _now()
    spec = load_grid_spec(args.spec)
    if args.seeds:
        spec["seeds"] = args.seeds
    if args.epochs is not None:
        spec.setdefault("train", {})["epochs"] = args.epochs
    out = _prepare_out(args.out)
    rows = run_experiment_grid(spec)
    md = grid_markdown(rows, spec.get("name", ""))
    (out / "grid.md").write_text(md)
    (out / "grid.json").write_text(json.dumps(grid_json(rows), indent=2) + "\n")
    print(md, end="")
    _write_manifest(out, "grid", spec, ["grid.md", "grid.json"], started, spec.get("seeds"))
    return 0 if all(r.status == "ok" for r in rows) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlmkd", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic long-tail dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--n-max", type=int, default=200)
    g.add_argument("--n-min", type=int, default=5)
    g.add_argument("--gamma", type=float, default=1.5)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("caption", help="caption every training image with one prompt")
    c.add_argument("--data", required=True)
    c.add_argument("--prompt", required=True)
    c.add_argument("--source", choices=("toy", "remote"), default="toy")
    c.add_argument("--endpoint")
    c.add_argument("--model", default="llava-next")
    c.add_argument("--workers", type=int, default=4)
    c.add_argument("--resume", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("encode", help="encode caption files into embedding caches")
    e.add_argument("--captions", nargs="+", required=True)
    e.add_argument("--encoder", choices=("hashed", "remote"), default="hashed")
    e.add_argument("--dim", type=int, default=64)
    e.add_argument("--endpoint")
    e.add_argument("--concat", action="store_true", help="join the captions of all files into one cache")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train", help="train a student")
    t.add_argument("--data", required=True)
    t.add_argument("--caches", nargs="*")
    t.add_argument("--mode", choices=("off", "single", "shared", "separate", "concat"), default="off")
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.base_lr)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--teacher")
    t.add_argument("--kd-image", action="store_true")
    t.add_argument("--scl", action="store_true", help="add the supervised contrastive term")
    t.add_argument("--text-reduction", choices=("mean", "sum"), default="mean")
    t.add_argument("--symmetric", action="store_true")
    t.add_argument("--adaptor-depth", type=int, choices=(0, 1, 2), default=1)
    t.add_argument("--head", choices=("cosine", "linear"), default="cosine")
    t.add_argument("--flip", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a saved bundle")
    v.add_argument("--bundle", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", choices=("train", "val"), default="val")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export image and text embeddings as CSV")
    x.add_argument("--bundle", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--caches", nargs="*")
    x.add_argument("--split", choices=("train", "val"), default="train")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("grid", help="run an experiment grid")
    r.add_argument("--spec", default="ablations")
    r.add_argument("--seeds", type=int, nargs="*")
    r.add_argument("--epochs", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_grid)

    k = sub.add_parser("teach", help="train and freeze the image teacher")
    k.add_argument("--data", required=True)
    k.add_argument("--epochs", type=int, default=TeacherConfig.epochs)
    k.add_argument("--batch", type=int, default=TeacherConfig.batch_size)
    k.add_argument("--lr", type=float, default=TeacherConfig.base_lr)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--pretrain-per-class", type=int, default=TeacherConfig.pretrain_per_class,
                   help="balanced auxiliary images per class (0 disables pretraining)")
    k.add_argument("--pretrain-epochs", type=int, default=TeacherConfig.pretrain_epochs)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_teach)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VlmKdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

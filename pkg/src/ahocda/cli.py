"""Command-line entry point: ``ahocda {gen,rank,train,eval,ablate,selfcheck}``.

Settings resolve in three layers: built-in defaults, then a flat YAML
key-value file given with ``--config``, then command-line flags. The resolved
mapping is written to ``resolved_config.yaml`` in every output directory.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import blob
from .blob import atomic_write
from .curriculum import Curriculum, build_curriculum
from .errors import InvalidInputError, NumericError, ParameterError, StateError
from .model import SegModel, confusion_matrix, iou_from_confusion
from .synthdata import (CLASS_NAMES, SceneSpec, eval_domains, gen_benchmark, load_benchmark,
                        split_images)
from .trainer import TrainConfig, Trainer, ablation_suite, rank_images
from . import selfcheck

log = logging.getLogger("ahocda")

PATH_KEYS = {"data": None, "out": None, "curriculum": None, "checkpoint": None}
EXTRA_KEYS = {"n_source": 40, "save_every": 100}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def defaults() -> dict:
    return {**TrainConfig().to_dict(), **PATH_KEYS, **EXTRA_KEYS}


def _parse_value(text: str):
    return yaml.safe_load(text)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = defaults()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InvalidInputError(f"config file {path} does not exist")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ParameterError("config file must be a flat key: value mapping")
        cfg.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v)
    flag_map = {"seed": "seed", "beta": "beta", "k": "K", "lambda_adv": "lambda_adv", "tau": "tau",
                "memory_size": "memory_size", "out": "out", "data": "data",
                "curriculum": "curriculum", "checkpoint": "checkpoint"}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_hopfield", False):
        cfg["use_hopfield"] = False
    if getattr(args, "no_curriculum", False):
        cfg["use_curriculum"] = False
    if getattr(args, "no_freeze", False):
        cfg["freeze"] = False
    unknown = set(cfg) - set(defaults())
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    train_config(cfg)  # validates
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_KEYS})


def _require(cfg: dict, key: str) -> Path:
    if cfg.get(key) is None:
        raise ParameterError(f"--{key} is required for this command")
    return Path(cfg[key])


def _out_dir(cfg: dict) -> Path:
    out = _require(cfg, "out")
    if out.exists() and not out.is_dir():
        raise InvalidInputError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "resolved_config.yaml", yaml.safe_dump(cfg, sort_keys=True))
    return out


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest, _, _ = gen_benchmark(SceneSpec(seed=cfg["seed"]), cfg["n_source"], out_dir=out)
    print(f"wrote {sum(manifest['counts'].values())} images to {out} "
          f"({manifest['counts']['source']} source / {manifest['counts']['compound']} compound / "
          f"{manifest['counts']['open']} open)")
    return 0


def _load_train_split(cfg: dict):
    manifest, _, images = load_benchmark(_require(cfg, "data"))
    source = list(split_images(manifest, images, "source").values())
    compound = split_images(manifest, images, "compound")
    return manifest, source, compound


def cmd_rank(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest, source, compound = _load_train_split(cfg)
    ranked = sorted(rank_images(source, compound, cfg["beta"]), key=lambda t: (t[1], t[0]))
    paths = {e["id"]: e["image"] for e in manifest["entries"]}
    atomic_write(out / "distances.csv",
                 _csv_text(["path", "delta"], [(paths[i], repr(d)) for i, d in ranked]))
    cur = build_curriculum(ranked, cfg["K"])
    atomic_write(out / "curriculum.json", json.dumps(cur.to_json(cfg["beta"]), indent=1))
    print(f"ranked {len(ranked)} compound images into {cur.K} stages")
    return 0


def cmd_train(cfg: dict, resume: Optional[str] = None) -> int:
    out = _out_dir(cfg)
    tc = train_config(cfg)
    _, source, compound = _load_train_split(cfg)
    curriculum = None
    if cfg["curriculum"] is not None:
        curriculum = Curriculum.from_json(json.loads(Path(cfg["curriculum"]).read_text()))
        if curriculum.K != tc.K and tc.use_curriculum:
            raise ParameterError(f"curriculum has {curriculum.K} stages but K={tc.K}")
    metrics_path = out / "metrics.jsonl"
    tr = Trainer(tc, source, compound, curriculum)
    if resume is not None:
        data = Path(resume).read_bytes()
        tr.load_state(data)
        keep = blob.unpack_header(data)[0]["n_metrics"]
        lines = metrics_path.read_text().splitlines(keepends=True) if metrics_path.exists() else []
        if len(lines) < keep:
            raise StateError("metrics log is shorter than the checkpoint says")
        metrics_path.write_text("".join(lines[:keep]))
    else:
        metrics_path.write_text("")
    if tr.curriculum is not None:
        atomic_write(out / "curriculum.json", json.dumps(tr.curriculum.to_json(tc.beta), indent=1))
    n_done = len(tr.stage_checkpoints)
    with metrics_path.open("a") as fh:
        tr.metrics_sink = lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")
        steps = 0
        while not tr.done:
            phase = tr.state.phase
            tr.step()
            steps += 1
            if phase in ("warmup", "pretrain") and tr.state.phase in ("adapt", "done"):
                atomic_write(out / "pretrain.ckpt", tr.pretrained_bytes)
            # stage blobs are kept only since this process started; tags cover the whole run
            first = len(tr.state.checkpoints) - len(tr.stage_checkpoints)
            for k in range(n_done, len(tr.stage_checkpoints)):
                atomic_write(out / f"{tr.state.checkpoints[first + k]}.ckpt", tr.stage_checkpoints[k])
            n_done = len(tr.stage_checkpoints)
            if steps % cfg["save_every"] == 0 or tr.done:
                fh.flush()
                atomic_write(out / "state.ckpt", tr.state_bytes())
    atomic_write(out / "final.ckpt", tr.seg.to_bytes(tc.seed, "final"))
    print(f"training finished; checkpoints in {out}")
    return 0


def evaluate_rows(model, domains: dict) -> list[tuple]:
    """``(domain, class, iou)`` rows then one ``mIoU`` summary row per domain."""
    n_cls = model.config.n_classes
    names = list(CLASS_NAMES) + [f"class{i}" for i in range(len(CLASS_NAMES), n_cls)]
    rows, summary = [], []
    for dom, images in domains.items():
        conf = np.zeros((n_cls, n_cls), dtype=np.int64)
        for im in images:
            conf += confusion_matrix(model.predict(im), im.labels, n_cls)
        iou, mean = iou_from_confusion(conf)
        rows += [(dom, names[c], repr(float(iou[c]))) for c in range(n_cls) if not np.isnan(iou[c])]
        summary.append((dom, "mIoU", repr(float(mean))))
    return rows + summary


def cmd_eval(cfg: dict, model=None) -> int:
    out = _out_dir(cfg)
    if model is None:
        model = SegModel.from_bytes(_require(cfg, "checkpoint").read_bytes())
    manifest, sidecar, images = load_benchmark(_require(cfg, "data"), with_hidden=True)
    rows = evaluate_rows(model, eval_domains(manifest, sidecar, images))
    atomic_write(out / "eval.csv", _csv_text(["domain", "class", "iou"], rows))
    for dom, cls, v in rows:
        if cls == "mIoU":
            print(f"{dom:<14} mIoU {float(v):.4f}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest, sidecar, images = load_benchmark(_require(cfg, "data"), with_hidden=True)
    source = list(split_images(manifest, images, "source").values())
    compound = {i: im.without_labels() for i, im in split_images(manifest, images, "compound").items()}
    rows = ablation_suite(train_config(cfg), source, compound, eval_domains(manifest, sidecar, images))
    atomic_write(out / "ablation.csv", _csv_text(
        ["configuration", "domain", "miou"],
        [(r["configuration"], r["domain"], repr(float(r["miou"]))) for r in rows]))
    for r in rows:
        print(f"{r['configuration']:<12} {r['domain']:<14} {r['miou']:.4f}")
    return 0


def cmd_selfcheck(inject_bug: bool = False) -> int:
    results = selfcheck.run_all(inject_bug=inject_bug)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selfcheck:", "all checks passed" if ok else "FAILED")
    return 0 if ok else 2


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML key: value file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--k", type=int)
    common.add_argument("--lambda-adv", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--memory-size", type=int)
    common.add_argument("--no-hopfield", action="store_true")
    common.add_argument("--no-curriculum", action="store_true")
    common.add_argument("--no-freeze", action="store_true")
    common.add_argument("--out")
    common.add_argument("--data", help="benchmark directory (manifest.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ahocda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic benchmark")
    sub.add_parser("rank", parents=[common], help="rank compound images by amplitude distance")
    t = sub.add_parser("train", parents=[common], help="pretrain and adapt")
    t.add_argument("--curriculum", help="curriculum.json from `rank`")
    t.add_argument("--resume", help="state.ckpt to continue from")
    e = sub.add_parser("eval", parents=[common], help="per-class IoU on target splits")
    e.add_argument("--checkpoint", required=True)
    sub.add_parser("ablate", parents=[common], help="component and freeze ablations")
    s = sub.add_parser("selfcheck", parents=[common], help="numerical self-tests")
    s.add_argument("--inject-grad-bug", action="store_true",
                   help="perturb one analytic gradient (negative control)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(args.inject_grad_bug)
        cfg = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "rank":
            return cmd_rank(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_ablate(cfg)
    except (ParameterError, InvalidInputError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, StateError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

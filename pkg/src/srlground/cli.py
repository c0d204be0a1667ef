"""Command line entry point.

Subcommands: synth, index, sample, assemble, train, eval, gradcheck, report.
Configuration precedence: built-in defaults < config file (--config,
key=value lines) < VOG_* environment variables < explicit flags.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 contract
violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .corpus import load_corpus, make_splits, save_corpus
from .errors import ConfigError, ContractError, DataError, GroundingError
from .evaluate import render_csv, render_markdown
from .featurestore import FeatureStore
from .model import VARIANTS, GroundingModel, ModelConfig, build_vocab
from .pipeline import (TrainSettings, eval_samples, evaluate_model,
                       model_config_for, train_model)
from .sampler import build_index, sample_contrastive
from .synthworld import WorldConfig, generate, write_world

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4

ARTIFACT_VERSION = "1"


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "out"
    seed: int = 0
    strategy: str = "spat"
    model: str = "vognet"
    rpe: str = "on"
    theta: float = 0.2
    jobs: int = 1
    profile: str = "desk"
    epochs: int = 10
    lr: float = 1e-3
    videos: int = 32
    sigma: float = 0.05
    draws: int = 1
    split: str = "val"
    gt5: int = 0  # 0 disables GT5 proposal pruning
    val_fraction: float = 0.5
    holdout_fraction: float = 0.25

    def validate(self):
        from .assembly import STRATEGIES

        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.model not in VARIANTS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.rpe not in ("on", "off"):
            raise ConfigError(f"--rpe must be on or off, got {self.rpe!r}")
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not (0.0 <= self.theta <= 1.0):
            raise ConfigError(f"theta {self.theta} outside [0, 1]")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


_FIELD_TYPES = {f: t for f, t in RunConfig.__annotations__.items()}


def _coerce(key, value):
    ty = _FIELD_TYPES[key]
    try:
        if ty == "int":
            return int(value)
        if ty == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r} as {ty}")


def read_config_file(path):
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}")
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = _coerce(key, value)
    return values


def resolve_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            setattr(cfg, k, v)
    for key in _FIELD_TYPES:
        env = os.environ.get(f"VOG_{key.upper()}")
        if env is not None:
            setattr(cfg, key, _coerce(key, env))
    for key in _FIELD_TYPES:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_manifest(path, cfg, extra=None):
    manifest = {"version": ARTIFACT_VERSION, "seed": cfg.seed,
                "config": asdict(cfg), "config_hash": config_hash(cfg)}
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return manifest


def _settings(cfg):
    return TrainSettings(
        strategy=cfg.strategy,
        variant=cfg.model,
        rpe=cfg.rpe == "on",
        seed=cfg.seed,
        epochs=cfg.epochs,
        lr=cfg.lr,
        theta=cfg.theta,
        eval_draws=cfg.draws,
        gt5_n=cfg.gt5 or None,
    )


def _load_data(cfg):
    corpus_path = os.path.join(cfg.data, "corpus.jsonl")
    corpus = load_corpus(corpus_path)
    store = FeatureStore(os.path.join(cfg.data, "features"), corpus.videos)
    return corpus, store


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, args):
    wc = WorldConfig(n_videos=cfg.videos, noise_sigma=cfg.sigma)
    world = generate(wc, seed=cfg.seed)
    world.corpus = make_splits(world.corpus, val_fraction=cfg.val_fraction,
                               holdout_fraction=cfg.holdout_fraction, seed=cfg.seed)
    corpus_path, feat_dir = write_world(world, cfg.data)
    write_manifest(os.path.join(cfg.data, "manifest.json"), cfg,
                   {"n_videos": cfg.videos, "corpus": corpus_path})
    print(f"synth: wrote {cfg.videos} videos to {cfg.data}")
    return EXIT_OK


def cmd_index(cfg, args):
    corpus, _ = _load_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    index = build_index(corpus, split="all")
    path = os.path.join(cfg.out, "index.json")
    index.to_json(path)
    write_manifest(os.path.join(cfg.out, "index.manifest.json"), cfg)
    n_post = sum(len(ids) for m in index.dicts.values() for ids in m.values())
    print(f"index: {len(index.dicts)} roles, {n_post} postings -> {path}")
    return EXIT_OK


def cmd_sample(cfg, args):
    corpus, _ = _load_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    index = build_index(corpus, split="all")
    rng = np.random.default_rng((cfg.seed, 3))
    path = os.path.join(cfg.out, "sets.jsonl")
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for anchor in corpus.by_split(cfg.split):
            cset = sample_contrastive(index, corpus, anchor, rng)
            fh.write(json.dumps(
                {"anchor": cset.anchor,
                 "companions": [[qid, slot] for qid, slot in cset.companions]},
                sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            n += 1
    write_manifest(os.path.join(cfg.out, "sets.manifest.json"), cfg)
    print(f"sample: {n} contrastive sets -> {path}")
    return EXIT_OK


def cmd_assemble(cfg, args):
    corpus, store = _load_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    settings = _settings(cfg)
    samples = eval_samples(corpus, store, settings, split=cfg.split)
    rows = []
    for s in samples:
        rows.append({
            "query": s.query.id,
            "strategy": s.strategy,
            "canvas": [float(s.canvas[0]), float(s.canvas[1]), int(s.canvas[2])],
            "k": len(s.placements),
            "anchor_pos": s.anchor_pos,
            "gt_positives": int(s.gt.sum()) if s.gt is not None else
                            int(sum(b.gt.sum() for b in s.blocks)),
        })
    path = os.path.join(cfg.out, f"assembled_{cfg.strategy}.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rows, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    write_manifest(os.path.join(cfg.out, "assemble.manifest.json"), cfg)
    print(f"assemble: {len(rows)} samples ({cfg.strategy}) -> {path}")
    return EXIT_OK


def cmd_train(cfg, args):
    corpus, store = _load_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    settings = _settings(cfg)
    config = model_config_for(store, settings, profile=cfg.profile)
    loss_path = os.path.join(cfg.out, "losses.csv")
    loss_rows = ["epoch,loss"]

    def log(epoch, loss):
        loss_rows.append(f"{epoch},{loss:.6f}")
        print(f"epoch {epoch}: loss {loss:.4f}")

    result = train_model(corpus, store, settings, config=config, log=log)
    manifest = {"version": ARTIFACT_VERSION, "seed": cfg.seed,
                "config_hash": config_hash(cfg), "model": asdict(config)}
    ckpt = os.path.join(cfg.out, "model.vogc")
    ad.save_checkpoint(ckpt, result.model.parameters(), manifest)
    with open(loss_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(loss_rows) + "\n")
    write_manifest(os.path.join(cfg.out, "train.manifest.json"), cfg,
                   {"checkpoint": ckpt, "final_loss": result.losses[-1],
                    "skipped": result.n_skipped})
    print(f"train: checkpoint -> {ckpt}")
    return EXIT_OK


def _load_model(cfg, corpus, store, ckpt_path):
    state, manifest = ad.load_checkpoint(ckpt_path)
    model_cfg = ModelConfig(**manifest["model"]) if "model" in manifest else \
        model_config_for(store, _settings(cfg), profile=cfg.profile)
    model = GroundingModel(model_cfg, build_vocab(corpus), seed=cfg.seed)
    model.load_state(state)
    return model


def cmd_eval(cfg, args):
    corpus, store = _load_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    ckpt = args.ckpt or os.path.join(cfg.out, "model.vogc")
    model = _load_model(cfg, corpus, store, ckpt)
    settings = _settings(cfg)
    report = evaluate_model(model, corpus, store, settings, split=cfg.split)
    csv_path = os.path.join(cfg.out, f"metrics_{cfg.strategy}_{cfg.model}.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_csv([report]))
    write_manifest(os.path.join(cfg.out, "eval.manifest.json"), cfg,
                   {"checkpoint": ckpt, "metrics": csv_path})
    sys.stdout.write(render_markdown([report]))
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    rng = np.random.default_rng(cfg.seed)
    w = ad.Parameter("w", rng.standard_normal((6, 4)) * 0.3)
    b = ad.Parameter("b", np.zeros(4))
    x = rng.standard_normal((5, 6))
    t = (rng.random((4, 5)) > 0.5).astype(float)

    def f(wp, bp):
        h = ad.tanh(ad.add(ad.matmul(ad.Tensor(x), wp), bp))
        z = ad.softmax(h, axis=-1)
        return ad.bce_with_logits(ad.transpose(z), t)

    report = ad.grad_check(f, [w, b])
    print(f"gradcheck: max_rel_error={report.max_rel_error:.3e} "
          f"checked={report.n_checked} excluded={report.n_excluded} "
          f"{'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        raise ContractError("gradient check failed")
    return EXIT_OK


def cmd_report(cfg, args):
    from .evaluate import CSV_HEADER, MetricsReport

    reports = []
    for name in sorted(os.listdir(cfg.out)):
        if not (name.startswith("metrics_") and name.endswith(".csv")):
            continue
        with open(os.path.join(cfg.out, name), "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise DataError(f"{name}: unexpected metrics header")
        for row in lines[1:]:
            parts = row.split(",")
            reports.append(MetricsReport(
                strategy=parts[0], acc=float(parts[1]),
                video_acc=float(parts[2]) if parts[2] else None,
                consistency=float(parts[3]) if parts[3] else None,
                strict_acc=float(parts[4]), n_queries=int(parts[5]),
                n_roles=0))
    if not reports:
        raise DataError(f"report: no metrics_*.csv files under {cfg.out}")
    md = render_markdown(reports)
    path = os.path.join(cfg.out, "report.md")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(md)
    sys.stdout.write(md)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--data", help="data directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--strategy", choices=("svsq", "sep", "temp", "spat"))
    common.add_argument("--model", choices=VARIANTS)
    common.add_argument("--rpe", choices=("on", "off"))
    common.add_argument("--theta", type=float)
    common.add_argument("--jobs", type=int)
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--videos", type=int)
    common.add_argument("--sigma", type=float)
    common.add_argument("--draws", type=int)
    common.add_argument("--split", choices=("train", "val", "test", "all"))
    common.add_argument("--gt5", type=int)

    parser = argparse.ArgumentParser(prog="vog",
                                     description="video object grounding lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--ckpt", help="checkpoint path (default: OUT/model.vogc)")
        p.set_defaults(fn=fn)
    return parser


COMMANDS = {}


def _register():
    COMMANDS.update({
        "synth": cmd_synth, "index": cmd_index, "sample": cmd_sample,
        "assemble": cmd_assemble, "train": cmd_train, "eval": cmd_eval,
        "gradcheck": cmd_gradcheck, "report": cmd_report,
    })


_register()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.fn(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except GroundingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

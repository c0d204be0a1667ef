"""Training and evaluation pipelines shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assembly import Assembler
from .errors import ConfigError, DataError
from .evaluate import aggregate, evaluate_sample
from .model import GroundingModel, ModelConfig, SkipSample, build_vocab
from .sampler import ContrastiveSet, build_index, sample_contrastive, sample_random


@dataclass
class TrainSettings:
    strategy: str = "spat"
    variant: str = "vognet"
    rpe: bool = True
    seed: int = 0
    epochs: int = 10
    lr: float = 1e-3
    theta: float = 0.2
    eval_draws: int = 1
    gt5_n: int | None = None
    random_baseline: bool = False  # random companion sampling instead of contrastive
    pos_weight: float = 4.0  # desk-profile positive-class loss weight
    augment: float = 0.1  # train-time feature jitter; stops per-video noise
    #                       fingerprints from being memorized
    shift_aug: float = 0.04  # rigid per-member position translation range;
    #                          keeps relative offsets, breaks layout recall
    weight_decay: float = 0.01  # decoupled Adam weight decay
    pos_jitter: float = 0.02  # independent per-proposal translation range;
    #                           breaks exact scene constellations that would
    #                           otherwise identify training exemplars


def model_config_for(store, settings, profile="desk", **overrides):
    """Build a ModelConfig whose visual dims match the feature store."""
    any_video = sorted(store.videos)[0]
    props = store.get(any_video)
    base = dict(
        d_v=props.features.shape[2],
        d_s=props.segment_features.shape[1],
        variant=settings.variant,
        rpe_enabled=settings.rpe and settings.variant == "vognet",
        verb_head_enabled=settings.strategy == "sep",
        loss_pos_weight=settings.pos_weight,
    )
    base.update(overrides)
    if profile == "desk":
        cfg = ModelConfig(**base)
    elif profile == "paper":
        from .model import paper_config

        return paper_config(**base)
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg.validate()
    return cfg


def _draw_set(index, corpus, anchor, rng, settings):
    if settings.strategy == "svsq":
        return ContrastiveSet(anchor=anchor.id, companions=())
    if settings.random_baseline:
        return sample_random(corpus, anchor, 4, rng)
    return sample_contrastive(index, corpus, anchor, rng)


def _augment(sample, rng, sigma, shift, pos_jitter):
    """Train-time augmentation against exemplar memorization.

    Feature jitter hides per-video noise fingerprints; a rigid random
    translation of each member's proposals preserves every within-video
    relative offset while scrambling absolute layouts; an independent small
    per-proposal jitter blurs the exact relative constellation so individual
    training scenes cannot be recognized by their geometry.
    """
    blocks = sample.blocks if sample.strategy == "sep" else [sample]
    for b in blocks:
        b.features = b.features + rng.normal(0.0, sigma, b.features.shape)
        b.segment = b.segment + rng.normal(0.0, sigma, b.segment.shape)
        if shift > 0 or pos_jitter > 0:
            pos = np.array(b.positions, copy=True)
            flat = pos.reshape(-1, 5)
            member = np.asarray(b.membership).reshape(-1)
            for m in np.unique(member):
                dx, dy = rng.uniform(-shift, shift, size=2) if shift > 0 else (0.0, 0.0)
                mask = member == m
                flat[mask, 0] += dx
                flat[mask, 2] += dx
                flat[mask, 1] += dy
                flat[mask, 3] += dy
            if pos_jitter > 0:
                dxy = rng.uniform(-pos_jitter, pos_jitter, size=(flat.shape[0], 2))
                flat[:, 0] += dxy[:, 0]
                flat[:, 2] += dxy[:, 0]
                flat[:, 1] += dxy[:, 1]
                flat[:, 3] += dxy[:, 1]
            b.positions = flat.reshape(pos.shape)
    return sample


@dataclass
class TrainResult:
    model: GroundingModel
    losses: list = field(default_factory=list)  # per-epoch mean loss
    n_skipped: int = 0


def train_model(corpus, store, settings, config=None, log=None):
    """Train one model under the given settings; deterministic per seed."""
    if config is None:
        config = model_config_for(store, settings)
    vocab = build_vocab(corpus)
    model = GroundingModel(config, vocab, seed=settings.seed)
    index = build_index(corpus, split="train")
    anchors = corpus.by_split("train")
    if not anchors:
        raise DataError("train split is empty")
    adam = ad.AdamState(model.parameters(), lr=settings.lr,
                        weight_decay=settings.weight_decay)
    assembler = Assembler(corpus, store, seed=settings.seed, gt5_n=settings.gt5_n)
    result = TrainResult(model=model)
    for epoch in range(settings.epochs):
        rng = np.random.default_rng((settings.seed, 1, epoch))
        order = rng.permutation(len(anchors))
        epoch_losses = []
        for pos in order:
            anchor = anchors[int(pos)]
            cset = _draw_set(index, corpus, anchor, rng, settings)
            sample = assembler.assemble(cset, settings.strategy, rng)
            if settings.augment > 0 or settings.shift_aug > 0 or settings.pos_jitter > 0:
                sample = _augment(sample, rng, settings.augment,
                                  settings.shift_aug, settings.pos_jitter)
            model.zero_grad()
            try:
                volume, _ = model.forward(sample)
                loss = model.loss(volume, sample)
            except SkipSample:
                result.n_skipped += 1
                continue
            ad.backward(loss)
            ad.adam_step(adam)
            epoch_losses.append(loss.item())
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        result.losses.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    return result


def evaluate_model(model, corpus, store, settings, split="val"):
    """Run the eval protocol over a split; companions may come from any split."""
    index = build_index(corpus, split="all")
    anchors = corpus.by_split(split)
    if not anchors:
        raise DataError(f"{split} split is empty")
    assembler = Assembler(corpus, store, seed=settings.seed + 7919,
                          gt5_n=settings.gt5_n)
    results = []
    for draw in range(settings.eval_draws):
        rng = np.random.default_rng((settings.seed, 2, draw))
        for anchor in anchors:
            cset = _draw_set(index, corpus, anchor, rng, settings)
            sample = assembler.assemble(cset, settings.strategy)
            volume, _ = model.forward(sample)
            results.append(evaluate_sample(volume, sample, theta=settings.theta))
    return aggregate(results)


def evaluate_scored(score_fn, corpus, store, settings, split="val"):
    """Same protocol but with an external scorer (e.g. the synth oracle).

    score_fn(sample) must return (k, F', P') logits (or a list per block
    for SEP-style samples).
    """
    from .model import ScoreVolume

    index = build_index(corpus, split="all")
    anchors = corpus.by_split(split)
    if not anchors:
        raise DataError(f"{split} split is empty")
    assembler = Assembler(corpus, store, seed=settings.seed + 7919,
                          gt5_n=settings.gt5_n)
    results = []
    for draw in range(settings.eval_draws):
        rng = np.random.default_rng((settings.seed, 2, draw))
        for anchor in anchors:
            cset = _draw_set(index, corpus, anchor, rng, settings)
            sample = assembler.assemble(cset, settings.strategy)
            volume = ScoreVolume(logits=score_fn(sample))
            results.append(evaluate_sample(volume, sample, theta=settings.theta))
    return aggregate(results)


def eval_samples(corpus, store, settings, split="val"):
    """Yield the assembled eval samples the protocol would score."""
    index = build_index(corpus, split="all")
    assembler = Assembler(corpus, store, seed=settings.seed + 7919,
                          gt5_n=settings.gt5_n)
    out = []
    for draw in range(settings.eval_draws):
        rng = np.random.default_rng((settings.seed, 2, draw))
        for anchor in corpus.by_split(split):
            cset = _draw_set(index, corpus, anchor, rng, settings)
            out.append(assembler.assemble(cset, settings.strategy))
    return out

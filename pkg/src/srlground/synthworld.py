"""Synthetic relational-reasoning corpus generator.

Each video is a static scene of attributed objects on a cell grid. A verb
denotes a fixed geometric offset between subject and object; every scene
contains "clone" distractors that match the subject and object in category
and attribute but sit isolated, so any scorer blind to pairwise geometry
cannot break the tie. Proposal features are class/attribute one-hots with
i.i.d. per-(proposal, frame) noise; segment features are verb one-hots.

The generator is deterministic under (config, seed) and also provides the
relation-blind chance bound and an oracle relational scorer used by tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box
from .corpus import Corpus, QueryAnnotation, SrlPhrase, VideoMeta, save_corpus
from .errors import ConfigError, DataError
from .featurestore import FeatureStore, ProposalSet

CATEGORY_WORDS = ("cat", "dog", "car", "ball", "cup", "lamp", "fish", "bird")
ATTRIBUTE_WORDS = ("red", "blue", "green", "gray")
VERB_WORDS = ("pushes", "pulls", "lifts", "drops")
# verb id -> (dx, dy) in grid cells, object relative to subject
VERB_OFFSETS = ((1, 0), (-1, 0), (0, -1), (0, 1))


@dataclass
class WorldConfig:
    n_videos: int = 32
    n_frames: int = 4
    n_proposals: int = 8
    n_categories: int = 3
    n_attributes: int = 1
    n_verbs: int = 4
    grid: int = 4  # grid x grid cells
    cell: int = 64  # pixels per cell
    box_size: int = 48
    jitter: int = 4  # box-centre jitter within the cell, pixels
    noise_sigma: float = 0.05
    mutate_prob: float = 0.8  # chance a query mutates an earlier one in one slot

    def validate(self):
        if not (2 <= self.n_categories <= len(CATEGORY_WORDS)):
            raise ConfigError(f"n_categories={self.n_categories} out of range")
        if not (1 <= self.n_attributes <= len(ATTRIBUTE_WORDS)):
            raise ConfigError(f"n_attributes={self.n_attributes} out of range")
        if not (1 <= self.n_verbs <= len(VERB_WORDS)):
            raise ConfigError(f"n_verbs={self.n_verbs} out of range")
        if self.n_proposals < 4:
            raise ConfigError("need at least 4 proposals (pair + clones)")
        if self.n_proposals > self.grid * self.grid - 2:
            raise ConfigError("too many proposals for the cell grid")
        if self.box_size + 2 * self.jitter > self.cell:
            raise ConfigError("box_size + jitter exceeds the cell size")

    @property
    def width(self):
        return self.grid * self.cell

    @property
    def height(self):
        return self.grid * self.cell

    @property
    def d_v(self):
        return self.n_categories + self.n_attributes

    @property
    def d_s(self):
        return self.n_verbs


@dataclass
class SceneObject:
    category: int
    attribute: int
    cell: tuple  # (col, row)
    box: tuple  # (x1, y1, x2, y2) pixels
    score: float  # detector confidence


@dataclass
class VideoScene:
    video_id: str
    triple: tuple  # (c0, a0, verb, c1, a1)
    subject_idx: int
    object_idx: int
    objects: list = field(default_factory=list)


@dataclass
class SynthWorld:
    config: WorldConfig
    seed: int
    corpus: Corpus
    scenes: dict  # video_id -> VideoScene

    def scene_of(self, video_id):
        if video_id not in self.scenes:
            raise DataError(f"unknown synth video {video_id}")
        return self.scenes[video_id]


# ---------------------------------------------------------------------------
# scene construction


def _box_at(cell, cfg, rng):
    cx = cell[0] * cfg.cell + cfg.cell // 2 + int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    cy = cell[1] * cfg.cell + cfg.cell // 2 + int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    h = cfg.box_size // 2
    return (float(cx - h), float(cy - h), float(cx + h), float(cy + h))


def _in_grid(cell, cfg):
    return 0 <= cell[0] < cfg.grid and 0 <= cell[1] < cfg.grid


class _Deadend(Exception):
    """Internal: a placement attempt ran out of candidate cells."""


def _build_scene(video_id, triple, cfg, rng):
    """Retry greedy placement until the isolation constraints are satisfied."""
    for _ in range(64):
        try:
            return _try_scene(video_id, triple, cfg, rng)
        except _Deadend:
            continue
    raise DataError(f"{video_id}: grid too crowded to place scene")


def _try_scene(video_id, triple, cfg, rng):
    """Place subject/object at the verb offset, isolated clones, backgrounds."""
    c0, a0, verb, c1, a1 = triple
    dv = VERB_OFFSETS[verb]
    free = [(x, y) for y in range(cfg.grid) for x in range(cfg.grid)]

    def take(cell):
        free.remove(cell)

    def pick(pred):
        cands = [c for c in free if pred(c)]
        if not cands:
            raise _Deadend
        return cands[int(rng.integers(len(cands)))]

    objects = []

    # subject + object at the verb offset
    subj_cell = pick(lambda c: (c[0] + dv[0], c[1] + dv[1]) in free)
    take(subj_cell)
    obj_cell = (subj_cell[0] + dv[0], subj_cell[1] + dv[1])
    take(obj_cell)
    objects.append(SceneObject(c0, a0, subj_cell, _box_at(subj_cell, cfg, rng), 0.0))
    objects.append(SceneObject(c1, a1, obj_cell, _box_at(obj_cell, cfg, rng), 0.0))
    subject_idx, object_idx = 0, 1

    def neighbours(cell):
        return [(cell[0] + dx, cell[1] + dy) for dx, dy in VERB_OFFSETS]

    def isolated(cell, cls):
        """No differently-classed object in any cardinal neighbour cell.
        Placing every object (beyond the designated pair) under this predicate
        keeps the subject->object pair the scene's only cross-class adjacency,
        so no (class, offset, class) pattern exists besides the scene's own."""
        return not any(o.cell in neighbours(cell) and
                       (o.category, o.attribute) != cls for o in objects)

    # Clones draw from the same positional marginal as their originals:
    # the subject can only sit where its verb-offset neighbour is in-grid,
    # so the clone must obey the identical support or a position prior
    # ("real subjects avoid the far edge") leaks to relation-blind scorers.
    clone_s = pick(lambda c: _in_grid((c[0] + dv[0], c[1] + dv[1]), cfg)
                   and isolated(c, (c0, a0)))
    take(clone_s)
    objects.append(SceneObject(c0, a0, clone_s, _box_at(clone_s, cfg, rng), 0.0))

    clone_o = pick(lambda c: _in_grid((c[0] - dv[0], c[1] - dv[1]), cfg)
                   and isolated(c, (c1, a1)))
    take(clone_o)
    objects.append(SceneObject(c1, a1, clone_o, _box_at(clone_o, cfg, rng), 0.0))

    # backgrounds: any class except the two query classes
    classes = [(c, a) for c in range(cfg.n_categories) for a in range(cfg.n_attributes)
               if (c, a) not in ((c0, a0), (c1, a1))]
    for _ in range(cfg.n_proposals - 4):
        c, a = classes[int(rng.integers(len(classes)))]
        cell = pick(lambda cc: isolated(cc, (c, a)))
        take(cell)
        objects.append(SceneObject(c, a, cell, _box_at(cell, cfg, rng), 0.0))

    for obj in objects:
        obj.score = float(rng.uniform(0.3, 1.0))
    return VideoScene(video_id=video_id, triple=triple, subject_idx=subject_idx,
                      object_idx=object_idx, objects=objects)


def _occupied(cell, objects):
    return any(o.cell == cell for o in objects)


# ---------------------------------------------------------------------------
# query construction


def _triple_random(cfg, rng):
    c0 = int(rng.integers(cfg.n_categories))
    c1 = int((c0 + 1 + rng.integers(cfg.n_categories - 1)) % cfg.n_categories)
    return (c0, int(rng.integers(cfg.n_attributes)), int(rng.integers(cfg.n_verbs)),
            c1, int(rng.integers(cfg.n_attributes)))


def _triple_mutate(base, cfg, rng):
    """Change exactly one of the three lemma-bearing slots (c0, verb, c1)."""
    c0, a0, verb, c1, a1 = base
    slot = int(rng.integers(3))
    for _ in range(32):
        if slot == 0:
            cand = int(rng.integers(cfg.n_categories))
            if cand not in (c0, c1):
                return (cand, a0, verb, c1, a1)
        elif slot == 1:
            cand = int(rng.integers(cfg.n_verbs))
            if cand != verb:
                return (c0, a0, cand, c1, a1)
        else:
            cand = int(rng.integers(cfg.n_categories))
            if cand not in (c0, c1):
                return (c0, a0, verb, cand, a1)
    return _triple_random(cfg, rng)


def _query_for(qid, scene, cfg):
    c0, a0, verb, c1, a1 = scene.triple
    words = ("the", ATTRIBUTE_WORDS[a0], CATEGORY_WORDS[c0], VERB_WORDS[verb],
             "the", ATTRIBUTE_WORDS[a1], CATEGORY_WORDS[c1])
    subj = scene.objects[scene.subject_idx]
    obj = scene.objects[scene.object_idx]
    subj_boxes = tuple(Box(*subj.box, frame_idx=f) for f in range(cfg.n_frames))
    obj_boxes = tuple(Box(*obj.box, frame_idx=f) for f in range(cfg.n_frames))
    phrases = (
        SrlPhrase(role="Arg0", span=(0, 3), text=words[0:3],
                  lemma=CATEGORY_WORDS[c0], gt_boxes=subj_boxes),
        SrlPhrase(role="V", span=(3, 4), text=words[3:4], lemma=VERB_WORDS[verb]),
        SrlPhrase(role="Arg1", span=(4, 7), text=words[4:7],
                  lemma=CATEGORY_WORDS[c1], gt_boxes=obj_boxes),
    )
    return QueryAnnotation(id=qid, video_id=scene.video_id,
                           segment_frames=tuple(range(cfg.n_frames)),
                           words=words, phrases=phrases)


# ---------------------------------------------------------------------------
# generation entry points


def generate(cfg, seed=0):
    """Build a deterministic synthetic world: corpus plus scene metadata."""
    cfg.validate()
    rng = np.random.default_rng((int(seed), 0x5717))
    scenes = {}
    queries = []
    videos = {}
    triples = []
    for i in range(cfg.n_videos):
        if triples and rng.random() < cfg.mutate_prob:
            base = triples[int(rng.integers(len(triples)))]
            triple = _triple_mutate(base, cfg, rng)
        else:
            triple = _triple_random(cfg, rng)
        triples.append(triple)
        video_id = f"synth{i:04d}"
        scene = _build_scene(video_id, triple, cfg, rng)
        scenes[video_id] = scene
        queries.append(_query_for(i, scene, cfg))
        videos[video_id] = VideoMeta(video_id, cfg.width, cfg.height, cfg.n_frames)
    corpus = Corpus(queries=queries, videos=videos)
    corpus.validate()
    return SynthWorld(config=cfg, seed=int(seed), corpus=corpus, scenes=scenes)


def proposals_for(world, video_id):
    """Noisy proposal features and boxes for one scene."""
    cfg = world.config
    scene = world.scene_of(video_id)
    # independent noise stream per video so corpora are stable under reordering
    rng = np.random.default_rng((world.seed, 0xF, int(video_id[-4:])))
    P, F = cfg.n_proposals, cfg.n_frames
    features = np.zeros((P, F, cfg.d_v))
    boxes = np.zeros((P, F, 5))
    for j, obj in enumerate(scene.objects):
        onehot = np.zeros(cfg.d_v)
        onehot[obj.category] = 1.0
        onehot[cfg.n_categories + obj.attribute] = 1.0
        features[j] = onehot[None, :]
        boxes[j, :, :4] = np.asarray(obj.box)[None, :]
        boxes[j, :, 4] = obj.score
    features += rng.normal(0.0, cfg.noise_sigma, size=features.shape)
    segment = np.zeros((F, cfg.d_s))
    segment[:, scene.triple[2]] = 1.0
    segment += rng.normal(0.0, cfg.noise_sigma, size=segment.shape)
    return ProposalSet(video_id, cfg.width, cfg.height, features, segment, boxes)


def write_world(world, out_dir):
    """Write corpus JSONL, VOGF feature files and a metadata sidecar."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    corpus_path = os.path.join(out_dir, "corpus.jsonl")
    save_corpus(world.corpus, corpus_path)
    store = FeatureStore(feat_dir, world.corpus.videos)
    for video_id in sorted(world.corpus.videos):
        store.put(proposals_for(world, video_id))
    meta = {
        "seed": world.seed,
        "config": {k: getattr(world.config, k) for k in (
            "n_videos", "n_frames", "n_proposals", "n_categories", "n_attributes",
            "n_verbs", "grid", "cell", "box_size", "jitter", "noise_sigma",
            "mutate_prob")},
        "scenes": {
            vid: {
                "triple": list(s.triple),
                "subject_idx": s.subject_idx,
                "object_idx": s.object_idx,
                "objects": [
                    {"category": o.category, "attribute": o.attribute,
                     "cell": list(o.cell), "box": list(o.box), "score": o.score}
                    for o in s.objects
                ],
            }
            for vid, s in sorted(world.scenes.items())
        },
    }
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return corpus_path, feat_dir


def load_world(out_dir):
    """Rebuild a SynthWorld from the sidecar written by write_world."""
    import os

    from .corpus import load_corpus

    with open(os.path.join(out_dir, "world.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = WorldConfig(**meta["config"])
    cfg.validate()
    scenes = {}
    for vid, s in meta["scenes"].items():
        scenes[vid] = VideoScene(
            video_id=vid, triple=tuple(s["triple"]),
            subject_idx=s["subject_idx"], object_idx=s["object_idx"],
            objects=[SceneObject(o["category"], o["attribute"], tuple(o["cell"]),
                                 tuple(o["box"]), o["score"]) for o in s["objects"]],
        )
    corpus = load_corpus(os.path.join(out_dir, "corpus.jsonl"))
    return SynthWorld(config=cfg, seed=meta["seed"], corpus=corpus, scenes=scenes)


# ---------------------------------------------------------------------------
# chance bound and oracle scorer


def _proposal_classes(world, sample):
    """(F', P') arrays of category and attribute ids for an assembled sample."""
    F, P_total = sample.membership.shape
    cats = np.full((F, P_total), -1, dtype=np.int64)
    attrs = np.full((F, P_total), -1, dtype=np.int64)
    P = world.config.n_proposals
    for i in range(P_total):
        for f in range(F):
            m = int(sample.membership[f, i])
            placement = sample.placements[m]
            scene = world.scene_of(placement.video_id)
            j = i - m * P if sample.strategy == "spat" else i
            obj = scene.objects[j]
            cats[f, i] = obj.category
            attrs[f, i] = obj.attribute
    return cats, attrs


def relation_blind_bound(world, samples):
    """Expected strict accuracy of a scorer that sees classes but no geometry.

    For each sample, the bound is the product over groundable roles of
    1 / (number of same-class proposals in the annotated canvas frame).
    """
    if not samples:
        raise DataError("relation_blind_bound over zero samples")
    bounds = []
    for sample in samples:
        cats, attrs = _proposal_classes(world, sample)
        scene = world.scene_of(sample.query.video_id)
        c0, a0, _, c1, a1 = scene.triple
        frame = sample.gt_boxes_canvas[0][0].frame_idx if sample.gt_boxes_canvas[0] else 0
        prob = 1.0
        for c, a in ((c0, a0), (c1, a1)):
            n_same = int(np.sum((cats[frame] == c) & (attrs[frame] == a)))
            prob *= 1.0 / max(1, n_same)
        bounds.append(prob)
    return float(np.mean(bounds))


def oracle_logits(world, sample, hi=10.0, lo=-10.0):
    """Relational oracle: a proposal scores high for a role iff the full
    (subject class, verb offset, object class) pattern holds around it.

    Operates on scene metadata and canvas geometry only; it has no access to
    which strip or block is the anchor, so it demonstrates that the task is
    solvable by relational reasoning alone.
    """
    cfg = world.config
    scene = world.scene_of(sample.query.video_id)
    c0, a0, verb, c1, a1 = scene.triple
    dv = VERB_OFFSETS[verb]
    k = len(sample.query.phrases)
    F, P_total = sample.membership.shape
    cats, attrs = _proposal_classes(world, sample)
    logits = np.full((k, F, P_total), lo)
    centers = np.stack([(sample.boxes[..., 0] + sample.boxes[..., 2]) / 2.0,
                        (sample.boxes[..., 1] + sample.boxes[..., 3]) / 2.0], axis=-1)
    for f in range(F):
        for i in range(P_total):
            if cats[f, i] != c0 or attrs[f, i] != a0:
                continue
            m = int(sample.membership[f, i])
            scale = sample.placements[m].scale_x
            target = centers[f, i] + np.asarray(dv) * cfg.cell * scale
            tol = (cfg.cell / 2.0) * scale
            for j in range(P_total):
                if sample.membership[f, j] != m:
                    continue
                if cats[f, j] != c1 or attrs[f, j] != a1:
                    continue
                if np.all(np.abs(centers[f, j] - target) <= tol):
                    logits[0, f, i] = hi  # Arg0 row
                    logits[2, f, j] = hi  # Arg1 row
    return logits

"""Dynamic contrastive sampling.

Per-role lemma dictionaries, one-hot role-replacement candidate pools via
posting-list intersection, and the k <= 4 pad/drop policy, plus the
random-sampling baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import SAMPLEABLE_ROLES
from .errors import DataError

K_MAX = 4
_REDRAW_LIMIT = 16


@dataclass
class RoleIndex:
    """role -> lemma -> sorted list of query ids."""

    dicts: dict
    split: str = "all"

    def postings(self, role, lemma):
        return self.dicts.get(role, {}).get(lemma, [])

    def to_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.dicts, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            dicts = json.load(fh)
        return cls(dicts={r: {l: list(ids) for l, ids in m.items()} for r, m in dicts.items()})


@dataclass(frozen=True)
class ContrastiveSet:
    anchor: int
    companions: tuple  # (query id, replaced slot index or None)

    @property
    def k_total(self):
        return 1 + len(self.companions)


def build_index(corpus, split="all"):
    """Index split-selected queries by (sampleable role, lemma)."""
    dicts = {}
    for q in corpus.by_split(split):
        for role, lemma in q.role_lemmas():
            dicts.setdefault(role, {}).setdefault(lemma, []).append(q.id)
    for role_map in dicts.values():
        for lemma in role_map:
            role_map[lemma] = sorted(set(role_map[lemma]))
    return RoleIndex(dicts=dicts, split=split)


def _slots(anchor):
    """Replaceable slots of a query: sampleable-role phrases, V always included,
    argument roles only when groundable."""
    slots = []
    for idx, p in enumerate(anchor.phrases):
        if p.role not in SAMPLEABLE_ROLES:
            continue
        if p.role != "V" and not p.groundable:
            continue
        slots.append((idx, p.role, p.lemma))
    return slots


def candidate_pool(index, corpus, anchor, slot_idx):
    """Query ids matching the anchor on every slot except slot_idx, where the
    lemma must differ, and coming from a different video."""
    slots = _slots(anchor)
    by_phrase = {i: (r, l) for i, r, l in slots}
    if slot_idx not in by_phrase:
        raise DataError(f"candidate_pool: phrase {slot_idx} is not a replaceable slot")
    pool = None
    for i, role, lemma in slots:
        if i == slot_idx:
            continue
        ids = set(index.postings(role, lemma))
        pool = ids if pool is None else pool & ids
        if not pool:
            return set()
    if pool is None:
        # single-slot anchor: every indexed query with that role is a candidate
        role, _ = by_phrase[slot_idx]
        pool = set()
        for ids in index.dicts.get(role, {}).values():
            pool.update(ids)
    role_i, lemma_i = by_phrase[slot_idx]
    out = set()
    for qid in pool:
        q = corpus.queries[qid]
        if q.video_id == anchor.video_id:
            continue
        lemmas_i = [l for r, l in q.role_lemmas() if r == role_i]
        if not lemmas_i or lemma_i in lemmas_i:
            continue
        out.add(qid)
    return out


def _pad_random(corpus, pool_queries, used_videos, n, rng):
    """Draw n queries from pool_queries subject only to distinct videos."""
    picks = []
    candidates = [q for q in pool_queries if q.video_id not in used_videos]
    by_video = {}
    for q in candidates:
        by_video.setdefault(q.video_id, []).append(q)
    videos = sorted(by_video)
    if len(videos) < n:
        raise DataError(
            f"sampling: need {n} distinct companion videos, only {len(videos)} available")
    for vid in rng.choice(len(videos), size=n, replace=False):
        qs = by_video[videos[vid]]
        picks.append(qs[rng.integers(len(qs))].id)
    return picks


def sample_contrastive(index, corpus, anchor, rng, k_max=K_MAX, pool_queries=None):
    """One-hot contrastive companions for an anchor, padded/dropped to k_max.

    pool_queries restricts the random-padding fallback (e.g. to a split).
    """
    if pool_queries is None:
        pool_queries = corpus.by_split(index.split)
    slots = _slots(anchor)
    slot_ids = [i for i, _, _ in slots]
    n_comp = k_max - 1
    if len(slot_ids) > n_comp:
        keep = rng.choice(len(slot_ids), size=n_comp, replace=False)
        slot_ids = [slot_ids[i] for i in sorted(keep)]

    companions = []
    used_videos = {anchor.video_id}
    for slot_idx in slot_ids:
        pool = sorted(candidate_pool(index, corpus, anchor, slot_idx))
        pick = None
        for _ in range(_REDRAW_LIMIT):
            if not pool:
                break
            cand = pool[rng.integers(len(pool))]
            if corpus.queries[cand].video_id not in used_videos:
                pick = cand
                break
        if pick is not None:
            companions.append((pick, slot_idx))
            used_videos.add(corpus.queries[pick].video_id)

    missing = n_comp - len(companions)
    if missing > 0:
        for qid in _pad_random(corpus, pool_queries, used_videos, missing, rng):
            companions.append((qid, None))
            used_videos.add(corpus.queries[qid].video_id)
    return ContrastiveSet(anchor=anchor.id, companions=tuple(companions))


def sample_random(corpus, anchor, k_total, rng, pool_queries=None):
    """Random-sampling baseline: companions constrained only to distinct videos."""
    if pool_queries is None:
        pool_queries = corpus.queries
    used = {anchor.video_id}
    companions = []
    if k_total > 1:
        for qid in _pad_random(corpus, pool_queries, used, k_total - 1, rng):
            companions.append((qid, None))
    return ContrastiveSet(anchor=anchor.id, companions=tuple(companions))

"""Data model and ingestion for SRL-annotated grounding corpora.

A corpus is stored as JSONL, one query per line:

    {"id": int, "video_id": str, "width": int, "height": int,
     "frames": [int, ...], "words": [str, ...],
     "phrases": [{"role": str, "span": [start, end], "lemma": str,
                  "boxes": [[x1, y1, x2, y2, frame_idx], ...]}, ...],
     "split": "train" | "val" | "test"}   # split optional
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Box
from .errors import DataError, ValidationError

# Canonical role tags. Anything else is kept verbatim as an "other" tag.
ROLE_V = "V"
ROLE_ARG0 = "Arg0"
ROLE_ARG1 = "Arg1"
ROLE_ARG2 = "Arg2"
ROLE_LOC = "ArgM-LOC"
ROLE_TMP = "ArgM-TMP"
ROLE_DIR = "ArgM-DIR"
NAMED_ROLES = (ROLE_V, ROLE_ARG0, ROLE_ARG1, ROLE_ARG2, ROLE_LOC, ROLE_TMP, ROLE_DIR)

# Roles participating in contrastive sampling (groundable argument roles + V).
SAMPLEABLE_ROLES = (ROLE_ARG0, ROLE_ARG1, ROLE_ARG2, ROLE_LOC, ROLE_V)

# Auxiliary / light verbs whose parses carry no independent content.
AUX_VERBS = frozenset(
    {"is", "are", "was", "were", "be", "been", "seen",
     "begin", "begins", "start", "starts"}
)

_CANON = {r.lower(): r for r in NAMED_ROLES}


def canonical_role(tag):
    """Map a raw role tag onto its canonical spelling; unknown tags pass through."""
    return _CANON.get(tag.strip().lower(), tag.strip())


@dataclass(frozen=True)
class SrlPhrase:
    role: str
    span: tuple  # [start, end) word indices
    text: tuple
    lemma: str
    gt_boxes: tuple = ()

    @property
    def groundable(self):
        return len(self.gt_boxes) > 0

    def validate(self, n_words, owner=""):
        start, end = self.span
        if not (0 <= start < end <= n_words):
            raise ValidationError(f"{owner}: phrase span {self.span} outside 0..{n_words}")
        if self.role == ROLE_V and self.gt_boxes:
            raise ValidationError(f"{owner}: verb phrase must not carry boxes")
        for b in self.gt_boxes:
            b.validate()


@dataclass(frozen=True)
class QueryAnnotation:
    id: int
    video_id: str
    segment_frames: tuple
    words: tuple
    phrases: tuple
    split: str = "train"

    def validate(self):
        owner = f"query {self.id}"
        verbs = [p for p in self.phrases if p.role == ROLE_V]
        if len(verbs) != 1:
            raise ValidationError(f"{owner}: expected exactly 1 verb phrase, found {len(verbs)}")
        if len(self.phrases) < 2:
            raise ValidationError(f"{owner}: needs a verb plus at least one argument")
        spans = sorted(p.span for p in self.phrases)
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValidationError(f"{owner}: overlapping phrase spans {((s1, e1), (s2, e2))}")
        for p in self.phrases:
            p.validate(len(self.words), owner)

    @property
    def verb(self):
        for p in self.phrases:
            if p.role == ROLE_V:
                return p
        raise ValidationError(f"query {self.id}: no verb phrase")

    def groundable_phrases(self):
        return [p for p in self.phrases if p.groundable]

    def role_lemmas(self):
        """(role, lemma) pairs for the sampleable slots of this query."""
        return [(p.role, p.lemma) for p in self.phrases if p.role in SAMPLEABLE_ROLES]


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    width: int
    height: int
    n_frames: int


@dataclass
class Corpus:
    queries: list
    videos: dict
    features_ref: str = ""
    cross_split_eval_sampling: bool = True

    def validate(self):
        ids = [q.id for q in self.queries]
        if ids != list(range(len(ids))):
            raise ValidationError("query ids must be dense 0..N-1 in file order")
        for q in self.queries:
            q.validate()
            if q.video_id not in self.videos:
                raise ValidationError(f"query {q.id}: unknown video {q.video_id}")

    def by_split(self, split):
        if split is None or split == "all":
            return list(self.queries)
        return [q for q in self.queries if q.split == split]

    def video_ids_by_split(self, split):
        return {q.video_id for q in self.by_split(split)}


# ---------------------------------------------------------------------------
# load / save


def _parse_phrase(obj, line_no):
    try:
        boxes = tuple(
            Box(float(b[0]), float(b[1]), float(b[2]), float(b[3]), int(b[4]))
            for b in obj.get("boxes", [])
        )
        return SrlPhrase(
            role=canonical_role(obj["role"]),
            span=(int(obj["span"][0]), int(obj["span"][1])),
            text=tuple(obj.get("text", [])),
            lemma=str(obj["lemma"]),
            gt_boxes=boxes,
        )
    except (KeyError, IndexError, TypeError) as e:
        raise DataError(f"line {line_no}: malformed phrase record ({e})")


def load_corpus(path):
    """Parse and validate a JSONL corpus file."""
    queries = []
    videos = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e.strerror}")
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {line_no}: invalid JSON ({e.msg})")
            try:
                words = tuple(str(w) for w in obj["words"])
                phrases = []
                for p in obj["phrases"]:
                    ph = _parse_phrase(p, line_no)
                    if not ph.text:
                        ph = replace(ph, text=tuple(words[ph.span[0]:ph.span[1]]))
                    phrases.append(ph)
                q = QueryAnnotation(
                    id=int(obj["id"]),
                    video_id=str(obj["video_id"]),
                    segment_frames=tuple(int(f) for f in obj["frames"]),
                    words=words,
                    phrases=tuple(phrases),
                    split=str(obj.get("split", "train")),
                )
                meta = VideoMeta(q.video_id, int(obj["width"]), int(obj["height"]),
                                 len(q.segment_frames))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}: line {line_no}: malformed record ({e})")
            prev = videos.get(q.video_id)
            if prev is not None and prev != meta:
                raise ValidationError(f"query {q.id}: video meta disagrees with earlier record")
            videos[q.video_id] = meta
            queries.append(q)
    corpus = Corpus(queries=queries, videos=videos, features_ref=str(path))
    corpus.validate()
    return corpus


def serialize_query(q, meta):
    phrases = [
        {
            "role": p.role,
            "span": [p.span[0], p.span[1]],
            "text": list(p.text),
            "lemma": p.lemma,
            "boxes": [[float(b.x_tl), float(b.y_tl), float(b.x_br), float(b.y_br),
                       int(b.frame_idx)] for b in p.gt_boxes],
        }
        for p in q.phrases
    ]
    return {
        "id": q.id,
        "video_id": q.video_id,
        "width": meta.width,
        "height": meta.height,
        "frames": list(q.segment_frames),
        "words": list(q.words),
        "phrases": phrases,
        "split": q.split,
    }


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in corpus.queries:
            fh.write(json.dumps(serialize_query(q, corpus.videos[q.video_id]),
                                sort_keys=True, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# filtering


def filter_srl(raw, aux_verbs=AUX_VERBS):
    """Drop auxiliary-verb parses and parses with no argument roles.

    Total and idempotent; surviving queries are re-numbered densely.
    """
    kept = []
    for q in raw:
        non_verb = [p for p in q.phrases if p.role != ROLE_V]
        if not non_verb:
            continue
        verb_lemma = q.verb.lemma.lower()
        if verb_lemma in aux_verbs:
            continue
        kept.append(q)
    return [replace(q, id=i) for i, q in enumerate(kept)]


# ---------------------------------------------------------------------------
# token alignment


def _char_ranges(tokens):
    """Character ranges of each token over the whitespace-free concatenation."""
    ranges = []
    pos = 0
    for t in tokens:
        stripped = "".join(t.split())
        ranges.append((pos, pos + len(stripped)))
        pos += len(stripped)
    return ranges


def align_spans(src_tokens, dst_tokens):
    """Map each src token index to the set of dst indices overlapping it."""
    src_text = "".join("".join(t.split()) for t in src_tokens)
    dst_text = "".join("".join(t.split()) for t in dst_tokens)
    if src_text != dst_text:
        raise DataError("align_spans: texts differ after whitespace normalisation")
    src_ranges = _char_ranges(src_tokens)
    dst_ranges = _char_ranges(dst_tokens)
    mapping = {}
    for i, (s0, s1) in enumerate(src_ranges):
        hits = {j for j, (d0, d1) in enumerate(dst_ranges) if max(s0, d0) < min(s1, d1)}
        if hits:
            mapping[i] = hits
    return mapping


def mark_groundable(query, box_annotations, alignment, object_names=None):
    """Attach gt boxes (and object-name lemmas) to phrases via token alignment.

    box_annotations: dst-token index -> list of Box.
    object_names: optional dst-token index -> lemma string.
    """
    new_phrases = []
    for p in query.phrases:
        if p.role == ROLE_V:
            new_phrases.append(p)
            continue
        boxes = []
        lemma = p.lemma
        for src_idx in range(p.span[0], p.span[1]):
            for dst_idx in sorted(alignment.get(src_idx, ())):
                if dst_idx in box_annotations:
                    boxes.extend(box_annotations[dst_idx])
                    if object_names and dst_idx in object_names:
                        lemma = object_names[dst_idx]
        new_phrases.append(replace(p, gt_boxes=tuple(boxes), lemma=lemma))
    return replace(query, phrases=tuple(new_phrases))


# ---------------------------------------------------------------------------
# splits


def make_splits(corpus, val_fraction=0.5, holdout_fraction=0.2, seed=0):
    """Assign train/val/test at video granularity, deterministically under seed.

    A holdout pool of videos is carved off the corpus and divided into val and
    test by val_fraction. Queries of one video always share a split.
    """
    video_ids = sorted(corpus.videos)
    if len(video_ids) < 3:
        raise DataError(f"make_splits: need at least 3 videos, got {len(video_ids)}")
    rng = np.random.default_rng(seed)
    order = [video_ids[i] for i in rng.permutation(len(video_ids))]
    n_holdout = max(2, int(round(len(order) * holdout_fraction)))
    holdout = order[:n_holdout]
    n_val = int(round(len(holdout) * val_fraction))
    val_set = set(holdout[:n_val])
    test_set = set(holdout[n_val:])

    def split_of(video_id):
        if video_id in val_set:
            return "val"
        if video_id in test_set:
            return "test"
        return "train"

    queries = [replace(q, split=split_of(q.video_id)) for q in corpus.queries]
    return Corpus(queries=queries, videos=dict(corpus.videos),
                  features_ref=corpus.features_ref, cross_split_eval_sampling=True)

"""Turn a contrastive set plus proposal features into one assembled sample.

Supports the four strategies (single video, separate, temporal concat,
spatial concat) with box remapping, frame subsampling, normalised 5-d
positions, GT5 proposal selection and ground-truth label construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, iou_xyxy
from .errors import DataError
from .featurestore import ProposalSet

IOU_POSITIVE = 0.5

STRATEGIES = ("svsq", "sep", "temp", "spat")


@dataclass(frozen=True)
class Placement:
    """Affine remap of one source video into the assembled canvas."""

    query_id: int
    video_id: str
    order_pos: int
    scale_x: float
    scale_y: float
    x_offset: float
    frame_offset: int  # TEMP: m * F, otherwise 0
    frame_map: tuple  # canvas frame t -> source frame index

    def box_to_canvas(self, x1, y1, x2, y2):
        return (x1 * self.scale_x + self.x_offset, y1 * self.scale_y,
                x2 * self.scale_x + self.x_offset, y2 * self.scale_y)

    def box_from_canvas(self, x1, y1, x2, y2):
        return ((x1 - self.x_offset) / self.scale_x, y1 / self.scale_y,
                (x2 - self.x_offset) / self.scale_x, y2 / self.scale_y)


@dataclass
class AssembledSample:
    strategy: str
    query: object  # anchor QueryAnnotation
    canvas: tuple  # (W', H', F')
    features: np.ndarray | None = None  # (F', P', d_v)
    segment: np.ndarray | None = None  # (F', d_s)
    boxes: np.ndarray | None = None  # (F', P', 4) canvas coords
    scores: np.ndarray | None = None  # (F', P') detector scores
    positions: np.ndarray | None = None  # (F', P', 5) normalised
    membership: np.ndarray | None = None  # (F', P') order position ints
    placements: list = field(default_factory=list)
    anchor_pos: int = 0
    gt: np.ndarray | None = None  # (L, P', F') binary labels
    gt_roles: list = field(default_factory=list)  # phrase indices, parallel to gt rows
    gt_boxes_canvas: list = field(default_factory=list)  # per role: list of Box
    strips: list = field(default_factory=list)  # SPAT: per order pos (x_lo, x_hi)
    blocks: list = field(default_factory=list)  # SEP: per-video sub-samples

    @property
    def n_frames(self):
        return self.canvas[2]


def select_proposals_gt5(props, gt_boxes, n=5):
    """Reduce to n proposals per frame: max-IoU proposals for annotated frames'
    gt boxes first, then highest detector scores."""
    P, F, _ = props.boxes.shape
    if P < n:
        raise DataError(f"{props.video_id}: only {P} proposals, need {n}")
    if P == n:
        return props
    by_frame = {}
    for b in gt_boxes:
        by_frame.setdefault(b.frame_idx, []).append(b)
    keep = np.zeros((n, F), dtype=np.int64)
    for f in range(F):
        chosen = []
        for b in by_frame.get(f, []):
            ious = [iou_xyxy(props.boxes[i, f, :4], b.coords()) for i in range(P)]
            best = int(np.argmax(ious))
            if best not in chosen:
                chosen.append(best)
        order = np.argsort(-props.boxes[:, f, 4], kind="stable")
        for i in order:
            if len(chosen) >= n:
                break
            if int(i) not in chosen:
                chosen.append(int(i))
        keep[:, f] = chosen[:n]
    features = np.stack([props.features[keep[:, f], f] for f in range(F)], axis=1)
    boxes = np.stack([props.boxes[keep[:, f], f] for f in range(F)], axis=1)
    return ProposalSet(props.video_id, props.width, props.height,
                       features, props.segment_features.copy(), boxes)


def _subsample_frames(n_src, n_dst):
    if n_dst == 1 or n_src == 1:
        return tuple([0] * n_dst)
    return tuple(int(round(t * (n_src - 1) / (n_dst - 1))) for t in range(n_dst))


class Assembler:
    """Builds assembled samples; rng stream per item derives from (seed, anchor id)."""

    def __init__(self, corpus, store, seed=0, gt5_n=None):
        self.corpus = corpus
        self.store = store
        self.seed = seed
        self.gt5_n = gt5_n

    def _props(self, query):
        props = self.store.get(query.video_id)
        if self.gt5_n is not None:
            gt_boxes = [b for p in query.phrases for b in p.gt_boxes]
            props = select_proposals_gt5(props, gt_boxes, self.gt5_n)
        return props

    def _ordered(self, cset, rng):
        """Queries of the set in seeded-random canvas order; returns
        (ordered queries, anchor position)."""
        anchor = self.corpus.queries[cset.anchor]
        members = [anchor] + [self.corpus.queries[qid] for qid, _ in cset.companions]
        order = rng.permutation(len(members))
        ordered = [members[i] for i in order]
        anchor_pos = int(np.where(order == 0)[0][0])
        return ordered, anchor_pos

    def assemble(self, cset, strategy, rng=None):
        """rng orders member strips/blocks; None derives one from
        (assembler seed, anchor id) so evals are reproducible per anchor.
        Training passes its epoch rng so canvas order varies across draws."""
        if strategy not in STRATEGIES:
            raise DataError(f"unknown strategy {strategy!r}")
        if rng is None:
            rng = np.random.default_rng((self.seed, cset.anchor))
        if strategy == "svsq":
            anchor = self.corpus.queries[cset.anchor]
            return self._assemble_single(anchor)
        if strategy == "sep":
            return self.assemble_sep(cset, rng)
        if strategy == "temp":
            return self.assemble_temp(cset, rng)
        return self.assemble_spat(cset, rng)

    # -- single video -------------------------------------------------------

    def _assemble_single(self, query, order_pos=0, n_pos=1):
        props = self._props(query)
        meta = self.corpus.videos[query.video_id]
        P, F, _ = props.features.shape
        placement = Placement(query.id, query.video_id, order_pos, 1.0, 1.0, 0.0, 0,
                              tuple(range(F)))
        features = np.transpose(props.features, (1, 0, 2)).copy()  # (F, P, d_v)
        boxes = np.transpose(props.boxes[..., :4], (1, 0, 2)).copy()
        scores = np.transpose(props.boxes[..., 4], (1, 0)).copy()
        sample = AssembledSample(
            strategy="svsq",
            query=query,
            canvas=(meta.width, meta.height, F),
            features=features,
            segment=props.segment_features.copy(),
            boxes=boxes,
            scores=scores,
            membership=np.full((F, P), order_pos, dtype=np.int64),
            placements=[placement],
            anchor_pos=order_pos,
        )
        sample.positions = _normalized_positions(sample)
        _attach_gt(sample, query, placement)
        return sample

    # -- separate -----------------------------------------------------------

    def assemble_sep(self, cset, rng):
        ordered, anchor_pos = self._ordered(cset, rng)
        anchor = self.corpus.queries[cset.anchor]
        blocks = [self._assemble_single(q, order_pos=m) for m, q in enumerate(ordered)]
        # companion blocks carry the anchor's roles with all-zero labels
        roles = _groundable_roles(anchor)
        for m, block in enumerate(blocks):
            if m == anchor_pos:
                continue
            F, P = block.membership.shape
            block.gt = np.zeros((len(roles), P, F), dtype=np.int64)
            block.gt_roles = list(roles)
            block.gt_boxes_canvas = [[] for _ in roles]
        meta = self.corpus.videos[anchor.video_id]
        sample = AssembledSample(
            strategy="sep",
            query=anchor,
            canvas=(meta.width, meta.height, blocks[anchor_pos].canvas[2]),
            anchor_pos=anchor_pos,
            blocks=blocks,
            placements=[b.placements[0] for b in blocks],
        )
        sample.gt_roles = list(roles)
        sample.gt_boxes_canvas = blocks[anchor_pos].gt_boxes_canvas
        return sample

    # -- temporal concatenation --------------------------------------------

    def assemble_temp(self, cset, rng):
        ordered, anchor_pos = self._ordered(cset, rng)
        anchor = self.corpus.queries[cset.anchor]
        a_meta = self.corpus.videos[anchor.video_id]
        W, H = a_meta.width, a_meta.height
        props = [self._props(q) for q in ordered]
        F = props[0].n_frames
        if any(p.n_frames != F for p in props):
            raise DataError("temp assembly: videos disagree on frame count")
        P = props[0].n_proposals
        if any(p.n_proposals != P for p in props):
            raise DataError("temp assembly: videos disagree on proposal count")
        k = len(ordered)
        d_v = props[0].features.shape[2]
        d_s = props[0].segment_features.shape[1]

        features = np.zeros((k * F, P, d_v))
        segment = np.zeros((k * F, d_s))
        boxes = np.zeros((k * F, P, 4))
        scores = np.zeros((k * F, P))
        membership = np.zeros((k * F, P), dtype=np.int64)
        placements = []
        for m, (q, pr) in enumerate(zip(ordered, props)):
            sx = W / pr.width
            sy = H / pr.height
            placement = Placement(q.id, q.video_id, m, sx, sy, 0.0, m * F,
                                  tuple(range(F)))
            placements.append(placement)
            sl = slice(m * F, (m + 1) * F)
            features[sl] = np.transpose(pr.features, (1, 0, 2))
            segment[sl] = pr.segment_features
            b = np.transpose(pr.boxes[..., :4], (1, 0, 2)).copy()
            b[..., 0::2] *= sx
            b[..., 1::2] *= sy
            boxes[sl] = b
            scores[sl] = np.transpose(pr.boxes[..., 4], (1, 0))
            membership[sl] = m

        sample = AssembledSample(
            strategy="temp",
            query=anchor,
            canvas=(W, H, k * F),
            features=features,
            segment=segment,
            boxes=boxes,
            scores=scores,
            membership=membership,
            placements=placements,
            anchor_pos=anchor_pos,
        )
        sample.positions = _normalized_positions(sample)
        _attach_gt(sample, anchor, placements[anchor_pos])
        return sample

    # -- spatial concatenation ---------------------------------------------

    def assemble_spat(self, cset, rng):
        ordered, anchor_pos = self._ordered(cset, rng)
        anchor = self.corpus.queries[cset.anchor]
        a_meta = self.corpus.videos[anchor.video_id]
        H = a_meta.height
        props = [self._props(q) for q in ordered]
        F = props[anchor_pos].n_frames
        P = props[0].n_proposals
        if any(p.n_proposals != P for p in props):
            raise DataError("spat assembly: videos disagree on proposal count")
        k = len(ordered)
        d_v = props[0].features.shape[2]
        d_s = props[0].segment_features.shape[1]

        # widths after rescaling each video to common height H
        scaled_w = [pr.width * (H / pr.height) for pr in props]
        offsets = np.concatenate([[0.0], np.cumsum(scaled_w)[:-1]])
        W_total = float(sum(scaled_w))

        features = np.zeros((F, k * P, d_v))
        segment = np.zeros((F, d_s))
        boxes = np.zeros((F, k * P, 4))
        scores = np.zeros((F, k * P))
        membership = np.zeros((F, k * P), dtype=np.int64)
        placements = []
        strips = []
        for m, (q, pr) in enumerate(zip(ordered, props)):
            sy = H / pr.height
            sx = sy  # aspect-preserving height rescale
            fmap = _subsample_frames(pr.n_frames, F)
            placement = Placement(q.id, q.video_id, m, sx, sy, float(offsets[m]), 0, fmap)
            placements.append(placement)
            strips.append((float(offsets[m]), float(offsets[m] + scaled_w[m])))
            cols = slice(m * P, (m + 1) * P)
            src = np.asarray(fmap)
            features[:, cols] = np.transpose(pr.features[:, src], (1, 0, 2))
            b = np.transpose(pr.boxes[:, src, :4], (1, 0, 2)).copy()
            b[..., 0::2] *= sx
            b[..., 1::2] *= sy
            b[..., 0::2] += offsets[m]
            boxes[:, cols] = b
            scores[:, cols] = np.transpose(pr.boxes[:, src, 4], (1, 0))
            membership[:, cols] = m
            segment += pr.segment_features[src]
        segment /= k

        sample = AssembledSample(
            strategy="spat",
            query=anchor,
            canvas=(W_total, H, F),
            features=features,
            segment=segment,
            boxes=boxes,
            scores=scores,
            membership=membership,
            placements=placements,
            anchor_pos=anchor_pos,
            strips=strips,
        )
        sample.positions = _normalized_positions(sample)
        _attach_gt(sample, anchor, placements[anchor_pos])
        return sample


# ---------------------------------------------------------------------------
# positions and labels


def _normalized_positions(sample):
    W, H, F = sample.canvas
    pos = np.zeros(sample.boxes.shape[:2] + (5,))
    pos[..., 0] = sample.boxes[..., 0] / W
    pos[..., 1] = sample.boxes[..., 1] / H
    pos[..., 2] = sample.boxes[..., 2] / W
    pos[..., 3] = sample.boxes[..., 3] / H
    pos[..., 4] = (np.arange(sample.boxes.shape[0]) / F)[:, None]
    return pos


def _groundable_roles(query):
    return [i for i, p in enumerate(query.phrases) if p.groundable]


def _attach_gt(sample, query, placement):
    """Remap the anchor's gt boxes into canvas coordinates and build labels."""
    roles = _groundable_roles(query)
    F, P = sample.membership.shape
    gt = np.zeros((len(roles), P, F), dtype=np.int64)
    gt_boxes_canvas = []
    src_to_canvas = {src: t for t, src in enumerate(placement.frame_map)}
    for li, phrase_idx in enumerate(roles):
        phrase = query.phrases[phrase_idx]
        remapped = []
        for b in phrase.gt_boxes:
            if b.frame_idx not in src_to_canvas:
                continue
            cf = src_to_canvas[b.frame_idx] + placement.frame_offset
            x1, y1, x2, y2 = placement.box_to_canvas(b.x_tl, b.y_tl, b.x_br, b.y_br)
            remapped.append(Box(x1, y1, x2, y2, cf))
            for i in range(P):
                if sample.membership[cf, i] != placement.order_pos:
                    continue
                if iou_xyxy(sample.boxes[cf, i], (x1, y1, x2, y2)) >= IOU_POSITIVE:
                    gt[li, i, cf] = 1
        gt_boxes_canvas.append(remapped)
    sample.gt = gt
    sample.gt_roles = roles
    sample.gt_boxes_canvas = gt_boxes_canvas


def build_gt_labels(sample, query):
    """Standalone label construction (same rule the assembler applies)."""
    placement = sample.placements[sample.anchor_pos]
    _attach_gt(sample, query, placement)
    return sample.gt

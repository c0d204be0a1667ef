"""Evaluation protocol: per-role per-frame argmax box extraction, the
threshold rule for cross-video false positives, and the four metrics
(accuracy, strict accuracy, consistency, video accuracy) per strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import iou_xyxy
from .errors import ContractError, DataError

IOU_CORRECT = 0.5
DEFAULT_THETA_GT5 = 0.2
DEFAULT_THETA_DENSE = 0.1


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class RolePrediction:
    """Per-frame argmax box of one role: indices, boxes and sigmoid scores."""

    proposal_idx: np.ndarray  # (F',)
    boxes: np.ndarray  # (F', 4)
    scores: np.ndarray  # (F',)

    @property
    def global_best_frame(self):
        return int(np.argmax(self.scores))


@dataclass
class PredictionSet:
    roles: list  # phrase indices (groundable roles, parallel to sample.gt_roles)
    per_role: list  # list of RolePrediction
    block_scores: np.ndarray | None = None  # SEP: per-block video scores
    block_preds: list | None = None  # SEP: per-block list of per-role RolePrediction


def extract_predictions(volume, sample, verb_logits=None):
    """Reduce a score volume to one box per (role, frame)."""
    if sample.strategy == "sep":
        block_preds = []
        role_max = np.zeros((len(sample.blocks), len(sample.gt_roles)))
        for bi, (block, logits) in enumerate(zip(sample.blocks, volume.logits)):
            scores = _sigmoid(np.asarray(logits.data if hasattr(logits, "data") else logits))
            preds = _argmax_boxes(scores, block, sample.gt_roles)
            block_preds.append(preds)
            for li in range(len(sample.gt_roles)):
                role_max[bi, li] = preds[li].scores.max()
        block_scores = role_max.mean(axis=1)
        if verb_logits is not None:
            block_scores = block_scores + np.asarray(
                verb_logits.data if hasattr(verb_logits, "data") else verb_logits)
        return PredictionSet(roles=list(sample.gt_roles),
                             per_role=block_preds[int(np.argmax(block_scores))],
                             block_scores=block_scores, block_preds=block_preds)
    logits = volume.logits
    scores = _sigmoid(np.asarray(logits.data if hasattr(logits, "data") else logits))
    per_role = _argmax_boxes(scores, sample, sample.gt_roles)
    return PredictionSet(roles=list(sample.gt_roles), per_role=per_role)


def _argmax_boxes(scores, sample, roles):
    """scores: (k, F', P') sigmoid scores over all phrases; select groundable roles."""
    out = []
    for li in roles:
        s = scores[li]  # (F', P')
        idx = np.argmax(s, axis=1)
        F = s.shape[0]
        out.append(RolePrediction(
            proposal_idx=idx,
            boxes=sample.boxes[np.arange(F), idx],
            scores=s[np.arange(F), idx],
        ))
    return out


@dataclass
class QueryResult:
    strategy: str
    role_correct: list
    consistent: bool | None = None
    video_correct: bool | None = None


@dataclass
class MetricsReport:
    strategy: str
    acc: float
    strict_acc: float
    consistency: float | None
    video_acc: float | None
    n_queries: int
    n_roles: int

    def as_row(self):
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        return [self.strategy, f"{self.acc:.4f}", fmt(self.video_acc),
                fmt(self.consistency), f"{self.strict_acc:.4f}", str(self.n_queries)]


# ---------------------------------------------------------------------------
# per-strategy scoring


def _role_hits_annotated(pred, gt_boxes, restrict_frames=None):
    """Correct iff in every annotated frame the predicted box matches a gt box."""
    by_frame = {}
    for b in gt_boxes:
        by_frame.setdefault(b.frame_idx, []).append(b)
    if not by_frame:
        raise DataError("groundable role with no annotated frame")
    for f, boxes in by_frame.items():
        if restrict_frames is not None and f not in restrict_frames:
            return False
        if not any(iou_xyxy(pred.boxes[f], b.coords()) >= IOU_CORRECT for b in boxes):
            return False
    return True


def eval_svsq(preds, sample):
    if sample.strategy != "svsq":
        raise ContractError(f"eval_svsq on {sample.strategy} sample")
    role_correct = [
        _role_hits_annotated(pred, sample.gt_boxes_canvas[li])
        for li, pred in enumerate(preds.per_role)
    ]
    return QueryResult("svsq", role_correct)


def eval_sep(preds, sample):
    if sample.strategy != "sep":
        raise ContractError(f"eval_sep on {sample.strategy} sample")
    pred_block = int(np.argmax(preds.block_scores))
    video_correct = pred_block == sample.anchor_pos
    if not video_correct:
        role_correct = [False] * len(preds.roles)
    else:
        anchor_block = sample.blocks[sample.anchor_pos]
        role_correct = [
            _role_hits_annotated(pred, anchor_block.gt_boxes_canvas[li])
            for li, pred in enumerate(preds.block_preds[pred_block])
        ]
    return QueryResult("sep", role_correct, consistent=None, video_correct=video_correct)


def _predicted_video_temp(pred, sample):
    f = pred.global_best_frame
    i = pred.proposal_idx[f]
    return int(sample.membership[f, i])


def _predicted_video_spat(pred, sample):
    f = pred.global_best_frame
    cx = (pred.boxes[f, 0] + pred.boxes[f, 2]) / 2.0
    for m, (lo, hi) in enumerate(sample.strips):
        if lo <= cx < hi or (m == len(sample.strips) - 1 and cx == hi):
            return m
    return -1


def eval_temp(preds, sample, theta):
    if sample.strategy != "temp":
        raise ContractError(f"eval_temp on {sample.strategy} sample")
    anchor_frames = set(np.where(sample.membership[:, 0] == sample.anchor_pos)[0].tolist())
    role_correct = []
    predicted_videos = []
    for li, pred in enumerate(preds.per_role):
        predicted_videos.append(_predicted_video_temp(pred, sample))
        outside_fp = any(
            pred.scores[f] > theta
            for f in range(sample.n_frames) if f not in anchor_frames
        )
        if outside_fp:
            role_correct.append(False)
        else:
            role_correct.append(
                _role_hits_annotated(pred, sample.gt_boxes_canvas[li]))
    consistent = len(set(predicted_videos)) == 1
    video_correct = consistent and predicted_videos[0] == sample.anchor_pos
    return QueryResult("temp", role_correct, consistent=consistent,
                       video_correct=video_correct)


def eval_spat(preds, sample, theta):
    if sample.strategy != "spat":
        raise ContractError(f"eval_spat on {sample.strategy} sample")
    lo, hi = sample.strips[sample.anchor_pos]
    role_correct = []
    predicted_videos = []
    for li, pred in enumerate(preds.per_role):
        predicted_videos.append(_predicted_video_spat(pred, sample))
        outside_fp = False
        for f in range(sample.n_frames):
            cx = (pred.boxes[f, 0] + pred.boxes[f, 2]) / 2.0
            if not (lo <= cx < hi) and pred.scores[f] > theta:
                outside_fp = True
                break
        if outside_fp:
            role_correct.append(False)
        else:
            role_correct.append(
                _role_hits_annotated(pred, sample.gt_boxes_canvas[li]))
    consistent = len(set(predicted_videos)) == 1
    video_correct = consistent and predicted_videos[0] == sample.anchor_pos
    return QueryResult("spat", role_correct, consistent=consistent,
                       video_correct=video_correct)


def evaluate_sample(volume, sample, theta=DEFAULT_THETA_GT5):
    preds = extract_predictions(volume, sample, verb_logits=volume.verb_logits)
    if sample.strategy == "svsq":
        return eval_svsq(preds, sample)
    if sample.strategy == "sep":
        return eval_sep(preds, sample)
    if sample.strategy == "temp":
        return eval_temp(preds, sample, theta)
    return eval_spat(preds, sample, theta)


# ---------------------------------------------------------------------------
# aggregation and rendering


def aggregate(results):
    if not results:
        raise ContractError("aggregate over zero queries")
    strategy = results[0].strategy
    if any(r.strategy != strategy for r in results):
        raise ContractError("aggregate over mixed strategies")
    n_roles = sum(len(r.role_correct) for r in results)
    n_correct = sum(sum(r.role_correct) for r in results)
    acc = n_correct / n_roles if n_roles else 0.0
    strict = sum(all(r.role_correct) for r in results) / len(results)
    consistency = None
    video_acc = None
    if strategy in ("temp", "spat"):
        consistency = sum(bool(r.consistent) for r in results) / len(results)
        video_acc = sum(bool(r.video_correct) for r in results) / len(results)
    elif strategy == "sep":
        video_acc = sum(bool(r.video_correct) for r in results) / len(results)
    return MetricsReport(strategy=strategy, acc=acc, strict_acc=strict,
                         consistency=consistency, video_acc=video_acc,
                         n_queries=len(results), n_roles=n_roles)


CSV_HEADER = "strategy,acc,vacc,cons,sacc,n"


def render_csv(reports):
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(",".join(r.as_row()))
    return "\n".join(lines) + "\n"


def render_markdown(reports):
    lines = ["| strategy | acc | vacc | cons | sacc | n |",
             "|---|---|---|---|---|---|"]
    for r in reports:
        lines.append("| " + " | ".join(v or "-" for v in r.as_row()) + " |")
    return "\n".join(lines) + "\n"

"""Binary per-video feature files (magic "VOGF").

Layout, all little-endian, row-major:
    magic "VOGF", u32 P, u32 F, u32 d_v, u32 d_s
    f32 proposal features  (P * F * d_v)
    f32 segment features   (F * d_s)
    f32 boxes              (P * F * 5: x1, y1, x2, y2, score)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_MAGIC = b"VOGF"


@dataclass
class ProposalSet:
    """Proposals and features of one video."""

    video_id: str
    width: int
    height: int
    features: np.ndarray  # (P, F, d_v)
    segment_features: np.ndarray  # (F, d_s)
    boxes: np.ndarray  # (P, F, 5) x1,y1,x2,y2,score

    @property
    def n_proposals(self):
        return self.features.shape[0]

    @property
    def n_frames(self):
        return self.features.shape[1]

    def validate(self):
        P, F, _ = self.features.shape
        if self.segment_features.shape[0] != F or self.boxes.shape[:2] != (P, F):
            raise DataError(f"{self.video_id}: inconsistent proposal array shapes")
        xy = self.boxes[..., :4]
        if xy[..., 0].min() < 0 or xy[..., 1].min() < 0:
            raise DataError(f"{self.video_id}: negative box coordinates")
        if xy[..., 2].max() > self.width or xy[..., 3].max() > self.height:
            raise DataError(f"{self.video_id}: boxes exceed frame bounds")


def write_features(path, props):
    P, F, d_v = props.features.shape
    d_s = props.segment_features.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", P, F, d_v, d_s))
        fh.write(np.ascontiguousarray(props.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(props.segment_features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(props.boxes, dtype="<f4").tobytes())


def read_features(path, video_id, width, height):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: bad magic, not a VOGF file")
        P, F, d_v, d_s = struct.unpack("<4I", fh.read(16))
        blob = fh.read()
    need = (P * F * d_v + F * d_s + P * F * 5) * 4
    if len(blob) != need:
        raise DataError(f"{path}: truncated feature file ({len(blob)} != {need} bytes)")
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += n * 4
        return arr.reshape(shape)

    props = ProposalSet(
        video_id=video_id,
        width=width,
        height=height,
        features=take((P, F, d_v)),
        segment_features=take((F, d_s)),
        boxes=take((P, F, 5)),
    )
    props.validate()
    return props


class FeatureStore:
    """Directory of {video_id}.vogf files, lazily read and cached."""

    def __init__(self, root, videos):
        self.root = root
        self.videos = videos  # video_id -> VideoMeta
        self._cache = {}

    def path_of(self, video_id):
        return os.path.join(self.root, f"{video_id}.vogf")

    def get(self, video_id):
        if video_id not in self._cache:
            meta = self.videos.get(video_id)
            if meta is None:
                raise DataError(f"feature store: unknown video {video_id}")
            path = self.path_of(video_id)
            if not os.path.exists(path):
                raise DataError(f"feature store: missing file {path}")
            self._cache[video_id] = read_features(path, video_id, meta.width, meta.height)
        return self._cache[video_id]

    def put(self, props):
        os.makedirs(self.root, exist_ok=True)
        write_features(self.path_of(props.video_id), props)
        self._cache[props.video_id] = props

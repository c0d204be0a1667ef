"""Axis-aligned boxes and IoU."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class Box:
    """Pixel-coordinate box with its frame index, corner convention (tl, br)."""

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float
    frame_idx: int

    def validate(self):
        if not (self.x_tl < self.x_br and self.y_tl < self.y_br):
            raise ValidationError(f"degenerate box {self}")
        if min(self.x_tl, self.y_tl) < 0:
            raise ValidationError(f"negative coordinates in {self}")
        if self.frame_idx < 0:
            raise ValidationError(f"negative frame index in {self}")

    @property
    def area(self):
        return (self.x_br - self.x_tl) * (self.y_br - self.y_tl)

    @property
    def center(self):
        return ((self.x_tl + self.x_br) / 2.0, (self.y_tl + self.y_br) / 2.0)

    def coords(self):
        return (self.x_tl, self.y_tl, self.x_br, self.y_br)


def iou(a, b):
    """Intersection over union of two boxes, ignoring frame indices."""
    ix = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    iy = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_xyxy(a, b):
    """IoU of two (x1, y1, x2, y2) coordinate 4-tuples/arrays."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)

"""Axis-aligned pixel boxes.

Convention used everywhere in this package: integer pixel boxes
``(x, y, w, h)`` with origin at the top-left of the image, ``x`` in
``[0, width - w]``, covering the ``w * h`` pixels whose column index is in
``[x, x + w)`` and row index in ``[y, y + h)``.
"""

from __future__ import annotations

from typing import NamedTuple


class Box(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def within(self, width: int, height: int) -> bool:
        """True if the box lies fully inside a width x height image."""
        return (
            self.x >= 0
            and self.y >= 0
            and self.w >= 1
            and self.h >= 1
            and self.x + self.w <= width
            and self.y + self.h <= height
        )


def box_from_dict(d: dict) -> Box:
    return Box(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]))


def box_to_dict(b: Box) -> dict:
    return {"x": int(b.x), "y": int(b.y), "w": int(b.w), "h": int(b.h)}

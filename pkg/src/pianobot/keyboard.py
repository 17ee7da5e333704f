"""Key layout of an 88-key keyboard in piano-plane coordinates.

Axes: x runs from the front edge of the keys (x = 0) towards the fallboard,
y runs along the keyboard (low notes at negative y), z points up. Heights are
measured from the press plane: a fingertip at z = 0 pushes a key
``surface_z`` below its rest surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .score import LOWEST_MIDI_NOTE, N_KEYS

_BLACK_PITCH_CLASSES = {1, 3, 6, 8, 10}


def is_black_key(key_index: int) -> bool:
    return (key_index + LOWEST_MIDI_NOTE) % 12 in _BLACK_PITCH_CLASSES


@dataclass
class KeyGeometry:
    white_pitch: float = 0.0235
    black_width: float = 0.0137
    white_length: float = 0.15
    black_front: float = 0.05
    h_key: float = 0.01
    surface_z: float = 0.0055
    n_keys: int = N_KEYS

    center_y: np.ndarray = field(init=False, repr=False)
    y_extent: np.ndarray = field(init=False, repr=False)
    x_front: np.ndarray = field(init=False, repr=False)
    x_back: np.ndarray = field(init=False, repr=False)
    is_black: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_keys != N_KEYS:
            raise ValueError("only the standard 88-key layout is supported")
        black = np.array([is_black_key(k) for k in range(N_KEYS)])
        n_white = int((~black).sum())
        offset = n_white * self.white_pitch / 2
        cy = np.empty(N_KEYS)
        w = 0
        for k in range(N_KEYS):
            if black[k]:
                # black keys straddle the boundary of their white neighbours
                cy[k] = w * self.white_pitch - offset
            else:
                cy[k] = (w + 0.5) * self.white_pitch - offset
                w += 1
        self.is_black = black
        self.center_y = cy
        self.y_extent = np.where(black, self.black_width, self.white_pitch)
        self.x_front = np.where(black, self.black_front, 0.0)
        self.x_back = np.full(N_KEYS, self.white_length)
        self._white_idx = np.flatnonzero(~black)
        self._black_idx = np.flatnonzero(black)
        self._white_lo = cy[self._white_idx] - self.white_pitch / 2
        self._black_lo = cy[self._black_idx] - self.black_width / 2

    @property
    def y_lo(self) -> np.ndarray:
        return self.center_y - self.y_extent / 2

    @property
    def y_hi(self) -> np.ndarray:
        return self.center_y + self.y_extent / 2

    @property
    def key_centers(self) -> np.ndarray:
        """(88, 3) centre of each key's top surface."""
        return np.stack(
            [
                (self.x_front + self.x_back) / 2,
                self.center_y,
                np.full(N_KEYS, self.surface_z),
            ],
            axis=1,
        )

    def bounding_box(self, z_top: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around the keys, up to ``z_top`` (default 4 * h_key)."""
        z_top = 4 * self.h_key if z_top is None else z_top
        lo = np.array([0.0, self.y_lo.min(), 0.0])
        hi = np.array([self.white_length, self.y_hi.max(), z_top])
        return lo, hi

    def key_under(self, x, y) -> np.ndarray:
        """Index of the key whose footprint contains (x, y), else -1.

        Black keys occlude the back part of their white neighbours.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.full(np.broadcast(x, y).shape, -1, dtype=int)
        inside_x = (x >= 0.0) & (x <= self.white_length)

        wi = np.searchsorted(self._white_lo, y, side="right") - 1
        ok = inside_x & (wi >= 0) & (y < self._white_lo[np.clip(wi, 0, None)] + self.white_pitch)
        ok &= wi < len(self._white_idx)
        out = np.where(ok, self._white_idx[np.clip(wi, 0, len(self._white_idx) - 1)], out)

        bi = np.searchsorted(self._black_lo, y, side="right") - 1
        bic = np.clip(bi, 0, len(self._black_idx) - 1)
        okb = (
            (bi >= 0)
            & (y < self._black_lo[bic] + self.black_width)
            & (x >= self.black_front)
            & (x <= self.white_length)
        )
        return np.where(okb, self._black_idx[bic], out)

    def to_dict(self) -> dict:
        return {
            "white_pitch": self.white_pitch,
            "black_width": self.black_width,
            "white_length": self.white_length,
            "black_front": self.black_front,
            "h_key": self.h_key,
            "surface_z": self.surface_z,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyGeometry":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

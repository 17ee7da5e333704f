"""Synthetic songs with matching fingertip demonstrations.

Each hand sits in a five-finger position over consecutive white keys; notes
are assigned to fingers so that every note is playable without crossing.
Black keys are only given to the index, middle and ring fingers. The
demonstration moves a finger over its key a couple of frames before the
onset and is rendered to pixels through a fixed camera homography, so the
full retargeting path can be exercised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_random_state
from .keyboard import KeyGeometry
from .kinematics import N_TIPS
from .retarget import Correspondence, apply_homography, write_correspondences, write_pixel_csv
from .score import NoteEvent, discretize, write_midi

# thumb white-key index of each hand's default position (G3 and C4)
LEFT_THUMB_WHITE = 20
RIGHT_THUMB_WHITE = 23

# plane (x, y) -> pixel
CAMERA = np.array(
    [
        [40.0, 1100.0, 700.0],
        [-1500.0, 30.0, 620.0],
        [0.3, 0.08, 1.0],
    ]
)

REST_X = 0.04
BLACK_X = 0.08


@dataclass
class SynthSong:
    name: str
    notes: list[NoteEvent]
    times: np.ndarray  # (T,)
    plane_tips: np.ndarray  # (T, 10, 2), before alignment
    pixel_tips: np.ndarray  # (T, 10, 2)
    correspondences: list[Correspondence]
    shift: tuple[int, int]  # white-key offset of the left and right hand


def finger_white_keys(geom: KeyGeometry, shift: tuple[int, int]) -> np.ndarray:
    """Key index under each finger's rest position (left thumb..pinky, right thumb..pinky)."""
    whites = np.flatnonzero(~geom.is_black)
    left = [whites[LEFT_THUMB_WHITE + shift[0] - i] for i in range(5)]
    right = [whites[RIGHT_THUMB_WHITE + shift[1] + i] for i in range(5)]
    return np.array(left + right)


def _black_neighbour(geom: KeyGeometry, key: int, toward_high: bool) -> int | None:
    k = key + (1 if toward_high else -1)
    if 0 <= k < len(geom.center_y) and geom.is_black[k]:
        return k
    return None


def generate_notes(
    rng,
    geom: KeyGeometry,
    n_notes: int = 10,
    shift: tuple[int, int] = (0, 0),
    black_prob: float = 0.2,
    chord_prob: float = 0.25,
    lead_in: float = 0.5,
) -> tuple[list[NoteEvent], list[int]]:
    """Random playable note sequence. Returns notes and the finger of each."""
    rest = finger_white_keys(geom, shift)
    notes, fingers = [], []
    t = lead_in
    last_finger = -1
    while len(notes) < n_notes:
        dur = float(rng.uniform(0.3, 0.6))
        chosen = []
        f = int(rng.integers(N_TIPS))
        while f == last_finger:
            f = int(rng.integers(N_TIPS))
        chosen.append(f)
        if len(notes) + 1 < n_notes and rng.random() < chord_prob:
            other = int(rng.integers(5)) + (0 if f >= 5 else 5)
            chosen.append(other)
        for f in chosen:
            key = int(rest[f])
            if f % 5 in (1, 2, 3) and rng.random() < black_prob:
                # left-hand fingers run toward low notes
                b = _black_neighbour(geom, key, toward_high=rng.random() < 0.5)
                if b is not None:
                    key = b
            notes.append(NoteEvent(key, round(t, 4), round(t + dur, 4)))
            fingers.append(f)
        last_finger = chosen[0]
        t += dur + float(rng.uniform(0.15, 0.3))
    return notes, fingers


def demonstration(
    notes, fingers, geom: KeyGeometry, shift, rate_hz: float = 20.0, lead_frames: int = 2,
    noise: float = 0.0015, rng=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Plane (x, y) fingertips per frame for the given fingering."""
    rng = check_random_state(rng)
    song = discretize(notes, rate_hz)
    T = len(song)
    rest = finger_white_keys(geom, shift)
    xy = np.empty((T, N_TIPS, 2))
    xy[:, :, 0] = REST_X
    xy[:, :, 1] = geom.center_y[rest][None, :]
    for n, f in zip(notes, fingers):
        first = max(0, int(np.ceil(n.on_time * rate_hz - 1e-9)) - lead_frames)
        last = min(T, int(np.ceil(n.off_time * rate_hz - 1e-9)))
        xy[first:last, f, 1] = geom.center_y[n.key_index]
        if geom.is_black[n.key_index]:
            xy[first:last, f, 0] = BLACK_X
    jitter = np.clip(rng.normal(0.0, noise, size=(T, N_TIPS, 2)), -3 * noise, 3 * noise)
    return song.times, xy + jitter


def key_corner_correspondences(geom: KeyGeometry, camera=CAMERA, keys=(3, 15, 27, 39, 51, 63, 75, 87)):
    """Alternating front and back corners of a spread of keys, projected
    exactly to pixels."""
    pts = np.array(
        [[geom.x_front[k] if i % 2 == 0 else geom.x_back[k], geom.y_lo[k]] for i, k in enumerate(keys)]
    )
    pix = apply_homography(camera, pts)
    return [Correspondence(tuple(map(float, p)), tuple(map(float, q))) for p, q in zip(pix, pts)]


def make_song(name: str, seed: int, geom: KeyGeometry | None = None, n_notes: int = 10,
              pixel_noise: float = 0.2) -> SynthSong:
    geom = geom or KeyGeometry()
    rng = np.random.default_rng(seed)
    shift = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
    notes, fingers = generate_notes(rng, geom, n_notes, shift)
    times, xy = demonstration(notes, fingers, geom, shift, rng=rng)
    pix = apply_homography(CAMERA, xy.reshape(-1, 2)).reshape(xy.shape)
    pix = pix + rng.normal(0.0, pixel_noise, size=pix.shape)
    return SynthSong(name, notes, times, xy, pix, key_corner_correspondences(geom), shift)


def write_song(song: SynthSong, out_dir) -> dict:
    """Write ``<name>.mid``, ``<name>_tips.csv`` (pixels) and ``<name>_corr.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "midi": f"{song.name}.mid",
        "tips": f"{song.name}_tips.csv",
        "correspondences": f"{song.name}_corr.json",
    }
    (out / files["midi"]).write_bytes(write_midi(song.notes))
    (out / files["tips"]).write_text(write_pixel_csv(song.times, song.pixel_tips))
    (out / files["correspondences"]).write_text(write_correspondences(song.correspondences))
    return files


def make_corpus(out_dir, n_train: int = 3, n_test: int = 2, seed: int = 0, n_notes: int = 10) -> dict:
    """Generate a corpus directory with a ``split.json`` file."""
    out = Path(out_dir)
    names = [f"song_{i:02d}" for i in range(n_train + n_test)]
    for i, name in enumerate(names):
        write_song(make_song(name, seed * 1000 + i, n_notes=n_notes), out)
    split = {"train": names[:n_train], "test": names[n_train:]}
    (out / "split.json").write_text(json.dumps(split, indent=1) + "\n")
    return split


def single_key_states(n_keys: int = 88) -> np.ndarray:
    """One state per key with only that key pressed."""
    return np.eye(n_keys, dtype=np.uint8)

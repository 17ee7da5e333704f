"""In-memory version of the ingest, retarget and ik-track stages."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .ik import IkParams, initial_configuration, track_trajectory
from .keyboard import KeyGeometry
from .kinematics import HandModelSpec, default_spec
from .retarget import read_correspondences, read_fingertip_csv, retarget
from .score import PianoStateTrajectory, discretize, parse_midi


@dataclass
class EpisodeInputs:
    name: str
    song: PianoStateTrajectory
    demo: np.ndarray  # (T, 10, 3) retargeted fingertips
    nominal: np.ndarray  # (T, 47) IK joint targets


def bundled_corpus() -> Path:
    return Path(str(resources.files("pianobot").joinpath("data/corpus")))


def load_episode(
    name: str,
    corpus_dir=None,
    geom: KeyGeometry | None = None,
    spec: HandModelSpec | None = None,
    params: IkParams | None = None,
    z_bias: float = 0.0,
    rate_hz: float = 20.0,
) -> EpisodeInputs:
    """Song, demonstration and nominal trajectory for one corpus entry.

    ``z_bias`` raises the fingertip targets handed to IK; the returned
    demonstration itself is unbiased.
    """
    src = Path(corpus_dir) if corpus_dir is not None else bundled_corpus()
    geom = geom or KeyGeometry()
    spec = spec or default_spec()
    params = params or IkParams(max_inner_iters=10)
    song = discretize(parse_midi((src / f"{name}.mid").read_bytes()), rate_hz)
    pix = read_fingertip_csv((src / f"{name}_tips.csv").read_text())
    corr = read_correspondences((src / f"{name}_corr.json").read_text())
    tips, _, _ = retarget(pix, corr, song, geom)
    demo = tips.tips
    targets = demo.copy()
    targets[:, :, 2] += z_bias
    q0 = initial_configuration(spec, targets[0], params)
    nominal, _ = track_trajectory(spec, q0, targets, params, pedal=song.pedal)
    return EpisodeInputs(name, song, demo, nominal)

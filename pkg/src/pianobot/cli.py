"""Command-line pipeline driver.

Every stage reads the outputs of earlier stages from the output directory:

    ingest        MIDI -> score/<song>.csv
    retarget      pixel fingertips + correspondences -> fingertips/<song>.csv
    ik-track      fingertips -> nominal/<song>.csv
    train-song    nominal -> experts/<song>.json (training songs)
    train-codec   piano states -> codec/codec.json
    distill-build experts -> dataset/
    distill-train dataset + codec -> policies/
    play          policies -> play/<song>_<variant>.jsonl and _pressed.csv
    eval          pressed vs goal -> eval/metrics.json
    report        per-variant metric tables and piano-roll plots

``all`` runs the stages in order and ``synth`` writes a synthetic corpus.
Failures print a JSON error object on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import GoalAutoencoder
from .config import ConfigError, PipelineConfig, load_config
from .distill import (
    DistillDataset,
    Expert,
    HighLevelPolicy,
    LowLevelPolicy,
    build_dataset,
    chunked_execute,
    load_policy,
    read_split,
    save_policy,
)
from .env import PianoEnv
from .ik import initial_configuration, joint_csv, read_joint_csv, track_trajectory
from .kinematics import default_spec
from .metrics import Metrics, compute_metrics, metrics_table_csv
from .residual import ResidualPolicy, cem_train, default_bounds, rollout
from .retarget import FingertipTrajectory, read_correspondences, read_fingertip_csv, retarget
from .score import PianoStateTrajectory, discretize, parse_midi
from .synth import make_corpus

logger = logging.getLogger("pianobot")

STAGES = ["ingest", "retarget", "ik-track", "train-song", "train-codec", "distill-build",
          "distill-train", "play", "eval", "report"]


class MissingInputError(FileNotFoundError):
    def __init__(self, path, what: str):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


# --------------------------------------------------------------------------
# helpers


class Run:
    def __init__(self, cfg: PipelineConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        self.out = cfg.path("output_dir")
        self.geom = cfg.key_geometry()
        self.spec = default_spec()

    def dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingInputError(path, what)
        return path

    def songs(self) -> list[str]:
        midi_dir = self.need(self.cfg.path("midi_dir"), "MIDI directory")
        names = sorted(p.stem for p in midi_dir.glob("*.mid"))
        if not names:
            raise MissingInputError(midi_dir / "*.mid", "MIDI files")
        return names

    def split(self) -> dict:
        return read_split(self.need(self.cfg.path("split"), "split file"))

    def score(self, name: str) -> PianoStateTrajectory:
        p = self.need(self.out / "score" / f"{name}.csv", "piano-state trajectory (run ingest)")
        return PianoStateTrajectory.from_csv(p.read_text())

    def tips(self, name: str) -> FingertipTrajectory:
        p = self.need(self.out / "fingertips" / f"{name}.csv", "fingertip trajectory (run retarget)")
        return read_fingertip_csv(p.read_text())

    def nominal(self, name: str) -> np.ndarray:
        p = self.need(self.out / "nominal" / f"{name}.csv", "nominal joint trajectory (run ik-track)")
        return read_joint_csv(p.read_text())

    def expert(self, name: str) -> ResidualPolicy:
        p = self.need(self.out / "experts" / f"{name}.json", "expert policy (run train-song)")
        return ResidualPolicy.from_json(p.read_text())

    def codec(self) -> GoalAutoencoder:
        p = self.need(self.out / "codec" / "codec.json", "goal codec (run train-codec)")
        return GoalAutoencoder.from_json(p.read_text())

    def env(self) -> PianoEnv:
        return PianoEnv(self.spec, self.geom, self.cfg.env)


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    logger.info("wrote %s", path)


def _pressed_csv(log, song: PianoStateTrajectory, threshold: float) -> str:
    keys = log.pressed(threshold)
    pedal = np.array([a[-1] >= 0.5 for a in log.action], dtype=np.uint8)
    return PianoStateTrajectory(keys, pedal, song.rate_hz).to_csv()


# --------------------------------------------------------------------------
# stages


def cmd_ingest(run: Run, args) -> dict:
    out = run.dir("score")
    midi_dir = run.cfg.path("midi_dir")
    rate = run.cfg.env.control_hz
    summary = {}
    for name in run.songs():
        score = parse_midi((midi_dir / f"{name}.mid").read_bytes())
        traj = discretize(score, rate)
        _write(out / f"{name}.csv", traj.to_csv())
        notes = [{"key": n.key_index, "on": n.on_time, "off": n.off_time, "unterminated": n.unterminated}
                 for n in score.notes]
        _write(out / f"{name}_notes.json", json.dumps({"notes": notes, "pedal": score.pedal,
                                                       "warnings": score.warnings}, indent=1))
        summary[name] = {"notes": len(score.notes), "frames": len(traj)}
    return summary


def cmd_retarget(run: Run, args) -> dict:
    out = run.dir("fingertips")
    src = run.cfg.path("fingertip_dir")
    summary = {}
    for name in run.songs():
        song = run.score(name)
        pix = read_fingertip_csv(run.need(src / f"{name}_tips.csv", "pixel fingertips").read_text())
        corr = read_correspondences(run.need(src / f"{name}_corr.json", "correspondences").read_text())
        if len(pix) != len(song):
            raise ValueError(f"{name}: {len(pix)} fingertip frames but {len(song)} score frames")
        tips, report, H = retarget(pix, corr, song, run.geom)
        _write(out / f"{name}.csv", tips.to_csv())
        _write(out / f"{name}_report.json", report.to_json())
        _write(out / f"{name}_homography.json",
               json.dumps({"h": H.h.tolist(), "reprojection_error": H.reprojection_error}))
        summary[name] = {"unserved": len(report.unserved)}
    return summary


def cmd_ik_track(run: Run, args) -> dict:
    out = run.dir("nominal")
    params = run.cfg.ik
    bias = run.cfg.residual.nominal_z_bias
    summary = {}
    for name in run.songs():
        tips = run.tips(name).tips.copy()
        tips[:, :, 2] += bias
        song = run.score(name)
        q0 = initial_configuration(run.spec, tips[0], params)
        traj, log = track_trajectory(run.spec, q0, tips, params, pedal=song.pedal)
        _write(out / f"{name}.csv", joint_csv(traj, 1.0 / run.cfg.env.control_hz))
        _write(out / f"{name}_track.jsonl", log.to_jsonl())
        summary[name] = {"max_tip_error": max(log.residual)}
    return summary


def cmd_train_song(run: Run, args) -> dict:
    out = run.dir("experts")
    rs = run.cfg.residual
    summary = {}
    for name in run.split()["train"]:
        song, demo, nominal = run.score(name), run.tips(name).tips, run.nominal(name)
        template = ResidualPolicy(rs.n_phase, bounds=default_bounds(rs.slide_bound, rs.rotary_bound))
        policy, curve = cem_train(run.spec, song, demo, nominal, run.cfg.cem, run.geom, run.cfg.env,
                                  template, n_jobs=run.jobs)
        _write(out / f"{name}.json", policy.to_json())
        _write(out / f"{name}_curve.csv", curve.to_csv())
        env = run.env()
        zero = rollout(env, song, demo, nominal, ResidualPolicy(rs.n_phase)).metrics(env.cfg.press_threshold)
        log = rollout(env, song, demo, nominal, policy)
        _write(out / f"{name}_episode.jsonl", log.to_jsonl())
        summary[name] = {"zero_residual_f1": zero.f1, "expert_f1": log.metrics(env.cfg.press_threshold).f1,
                         "best_return": curve.best[-1] if curve.best else None}
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


def cmd_train_codec(run: Run, args) -> dict:
    out = run.dir("codec")
    cs = run.cfg.codec
    states = [run.score(n).keys for n in run.split()["train"]]
    if cs.include_single_keys:
        states.append(np.eye(88, dtype=np.uint8))
    X = np.unique(np.vstack(states), axis=0)
    X = X[X.any(axis=1)]
    codec = GoalAutoencoder(cs.encoder_sizes, cs.decoder_hidden, cs.n_freq, cs.lr, cs.epochs,
                            cs.states_per_batch, cs.queries_per_state, cs.inflate, cs.d_max,
                            run.cfg.seed).fit(X, geom=run.geom)
    _write(out / "codec.json", codec.to_json())
    _write(out / "loss.csv", codec.loss_csv())
    return {"states": int(len(X)), "final_loss": codec.loss_curve_[-1] if codec.loss_curve_ else None,
            "rmse": codec.rmse(X)}


def cmd_distill_build(run: Run, args) -> dict:
    experts = [Expert(n, run.score(n), run.tips(n).tips, run.nominal(n), run.expert(n))
               for n in run.split()["train"]]
    ds = build_dataset(experts, run.spec, run.geom, run.cfg.env, n_jobs=run.jobs)
    ds.save(run.dir("dataset"))
    return ds.stats()


def cmd_distill_train(run: Run, args) -> dict:
    out = run.dir("policies")
    ds = DistillDataset.load(run.need(run.out / "dataset" / "manifest.json", "dataset (run distill-build)").parent)
    codec = run.codec()
    d = run.cfg.distill
    hl = HighLevelPolicy(d.high_level.hidden, d.high_level.lr, d.high_level.epochs, d.high_level.batch_size,
                         run.cfg.seed, d.tip_noise).fit(ds, codec, run.spec)
    ll = LowLevelPolicy(d.mode, d.low_level.hidden, d.low_level.lr, d.low_level.epochs,
                        d.low_level.batch_size, run.cfg.seed).fit(ds, codec)
    save_policy(hl, out / "high_level.json")
    save_policy(ll, out / "low_level.json")
    return {"high_level_loss": hl.loss_curve_[-1] if hl.loss_curve_ else None,
            "low_level_loss": ll.loss_curve_[-1] if ll.loss_curve_ else None}


def _play_variants(run: Run):
    split = run.split()
    for name in split["train"]:
        yield name, "expert"
    for name in split["train"] + split["test"]:
        yield name, "learned"
        yield name, "oracle_hl"


def cmd_play(run: Run, args) -> dict:
    out = run.dir("play")
    codec = run.codec()
    pol_dir = run.out / "policies"
    hl = load_policy(run.need(pol_dir / "high_level.json", "high-level policy (run distill-train)"))
    ll = load_policy(run.need(pol_dir / "low_level.json", "low-level policy (run distill-train)"))
    summary = {}
    for name, variant in _play_variants(run):
        song, demo, nominal = run.score(name), run.tips(name).tips, run.nominal(name)
        env = run.env()
        if variant == "expert":
            log = rollout(env, song, demo, nominal, run.expert(name))
        else:
            log, _, _ = chunked_execute(env, codec, hl, ll, song, demo, nominal, run.cfg.ik,
                                        oracle_high_level=variant == "oracle_hl",
                                        postprocess=run.cfg.distill.postprocess)
        _write(out / f"{name}_{variant}.jsonl", log.to_jsonl())
        _write(out / f"{name}_{variant}_pressed.csv", _pressed_csv(log, song, run.cfg.env.press_threshold))
        summary[f"{name}_{variant}"] = log.metrics(run.cfg.env.press_threshold).f1
    return summary


def _metrics_from_files(pressed: Path, goal: Path) -> Metrics:
    p = PianoStateTrajectory.from_csv(pressed.read_text())
    g = PianoStateTrajectory.from_csv(goal.read_text())
    return compute_metrics(p.keys, g.keys)


def cmd_eval(run: Run | None, args) -> dict:
    pressed, goal = getattr(args, "pressed", None), getattr(args, "goal", None)
    if pressed or goal:
        if not (pressed and goal):
            raise ValueError("--pressed and --goal must be given together")
        for p in (pressed, goal):
            if not Path(p).exists():
                raise MissingInputError(p, "piano-state CSV")
        m = _metrics_from_files(Path(pressed), Path(goal))
        if getattr(args, "out", None):
            Path(args.out).write_text(m.to_json() + "\n")
        return m.to_dict()
    out = run.dir("eval")
    play = run.out / "play"
    result = {}
    for name, variant in _play_variants(run):
        pressed = run.need(play / f"{name}_{variant}_pressed.csv", "played episode (run play)")
        m = _metrics_from_files(pressed, run.need(run.out / "score" / f"{name}.csv", "score"))
        result.setdefault(variant, {})[name] = m.to_dict()
    _write(out / "metrics.json", json.dumps(result, indent=1, sort_keys=True))
    return result


def piano_roll_svg(pressed: np.ndarray, goal: np.ndarray, cell: int = 6) -> str:
    """Goal cells filled grey, pressed cells outlined; keys outside the
    used range are dropped."""
    used = np.flatnonzero(pressed.any(axis=0) | goal.any(axis=0))
    lo, hi = (int(used.min()), int(used.max())) if len(used) else (0, 0)
    T, K = len(goal), hi - lo + 1
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{T * cell}" height="{K * cell}">',
             f'<rect width="{T * cell}" height="{K * cell}" fill="white"/>']
    for t in range(T):
        for k in range(lo, hi + 1):
            y = (hi - k) * cell
            if goal[t, k]:
                parts.append(f'<rect x="{t * cell}" y="{y}" width="{cell}" height="{cell}" fill="#bbbbbb"/>')
            if pressed[t, k]:
                colour = "#1f5fbf" if goal[t, k] else "#d0302f"
                parts.append(f'<rect x="{t * cell + 1}" y="{y + 1}" width="{cell - 2}" height="{cell - 2}" '
                             f'fill="none" stroke="{colour}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(run: Run, args) -> dict:
    out = run.dir("report")
    play = run.out / "play"
    tables: dict[str, dict[str, Metrics]] = {}
    for name, variant in _play_variants(run):
        pressed = PianoStateTrajectory.from_csv(
            run.need(play / f"{name}_{variant}_pressed.csv", "played episode (run play)").read_text())
        goal = run.score(name)
        tables.setdefault(variant, {})[name] = compute_metrics(pressed.keys, goal.keys)
        _write(out / f"{name}_{variant}_roll.svg", piano_roll_svg(pressed.keys, goal.keys))
        roll = np.where(goal.keys == 1, 2, 0) + pressed.keys  # 0 idle, 1 false, 2 missed, 3 hit
        _write(out / f"{name}_{variant}_roll.csv",
               "\n".join(",".join(map(str, r)) for r in roll) + "\n")
    for variant, rows in tables.items():
        _write(out / f"{variant}_metrics.csv", metrics_table_csv(rows))
    return {v: {n: m.f1 for n, m in rows.items()} for v, rows in tables.items()}


def cmd_synth(run: Run | None, args) -> dict:
    return make_corpus(args.out_dir, args.n_train, args.n_test, args.seed if args.seed is not None else 0,
                       args.n_notes)


COMMANDS = {
    "ingest": cmd_ingest,
    "retarget": cmd_retarget,
    "ik-track": cmd_ik_track,
    "train-song": cmd_train_song,
    "train-codec": cmd_train_codec,
    "distill-build": cmd_distill_build,
    "distill-train": cmd_distill_train,
    "play": cmd_play,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: bundled synthetic corpus)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for rollouts")
    common.add_argument("--out", dest="output_dir", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pianobot", description="Piano-playing pipeline driver.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "eval":
            p.add_argument("--pressed", help="pressed piano-state CSV")
            p.add_argument("--goal", help="goal piano-state CSV")
            p.add_argument("--metrics-out", dest="out", help="write metrics JSON here")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("out_dir")
    s.add_argument("--n-train", type=int, default=3)
    s.add_argument("--n-test", type=int, default=2)
    s.add_argument("--n-notes", type=int, default=10)
    return parser


def _error(kind: str, message: str, **extra) -> dict:
    return {"error": kind, "message": message, **extra}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            result = cmd_synth(None, args)
        elif args.command == "eval" and (args.pressed or args.goal):
            result = cmd_eval(None, args)
        else:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
                cfg.cem.seed = args.seed
            if args.output_dir:
                cfg.paths.output_dir = str(Path(args.output_dir).resolve())
            run = Run(cfg, args.jobs)
            run.dir("").joinpath("config.json").write_text(cfg.to_json() + "\n")
            if args.command == "all":
                result = {name: COMMANDS[name](run, args) for name in STAGES}
            else:
                result = COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(json.dumps(_error("config", str(exc), field=exc.field)), file=sys.stderr)
        return 1
    except MissingInputError as exc:
        print(json.dumps(_error("missing_input", str(exc), path=exc.path)), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps(_error("missing_input", str(exc), path=str(exc.filename or ""))), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        print(json.dumps(_error(type(exc).__name__, str(exc))), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""MIDI ingestion and piano-state trajectories.

A song is turned into an ``(T, 88)`` binary piano roll sampled at the
control rate, plus a parallel sustain-pedal flag per frame.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

N_KEYS = 88
LOWEST_MIDI_NOTE = 21  # A0
DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 bpm)
PEDAL_CONTROLLER = 64

# Frame instants are compared against note boundaries with this slack so that
# values like 3 / 20 and a tick-derived 0.15000000000000002 agree.
_TIME_EPS = 1e-9


class MidiParseError(ValueError):
    """Raised for malformed MIDI data; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class NoteEvent:
    key_index: int
    on_time: float
    off_time: float
    # set when the note-off was missing and the note was closed at track end
    unterminated: bool = False

    def __post_init__(self):
        if not 0 <= self.key_index < N_KEYS:
            raise ValueError(f"key_index {self.key_index} outside [0, {N_KEYS})")
        if not self.off_time > self.on_time:
            raise ValueError(
                f"off_time {self.off_time} must exceed on_time {self.on_time}"
            )


@dataclass
class Score:
    """Result of parsing a MIDI file."""

    notes: list[NoteEvent] = field(default_factory=list)
    pedal: list[tuple[float, bool]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def end_time(self) -> float:
        ends = [n.off_time for n in self.notes] + [t for t, _ in self.pedal]
        return max(ends, default=0.0)


# --------------------------------------------------------------------------
# parsing


def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _parse_track(data: bytes, start: int, end: int):
    """Yield ``(abs_tick, kind, payload)`` for the events we care about.

    kind is one of ``"on"``, ``"off"``, ``"cc"``, ``"tempo"``, ``"end"``.
    """
    pos = start
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("truncated event", pos)
        byte = data[pos]
        if byte == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos + 1]
            length, body = _read_vlq(data, pos + 2, end)
            if body + length > end:
                raise MidiParseError("meta event overruns track", pos)
            payload = data[body : body + length]
            pos = body + length
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("tempo meta event must carry 3 bytes", body)
                yield tick, "tempo", int.from_bytes(payload, "big")
            elif meta_type == 0x2F:
                yield tick, "end", None
                return
            continue
        if byte in (0xF0, 0xF7):
            length, body = _read_vlq(data, pos + 1, end)
            if body + length > end:
                raise MidiParseError("sysex event overruns track", pos)
            pos = body + length
            status = None
            continue
        if byte & 0x80:
            if byte >= 0xF0:
                raise MidiParseError(f"unsupported system message 0x{byte:02X}", pos)
            status = byte
            pos += 1
        elif status is None:
            raise MidiParseError("data byte without running status", pos)
        kind = status >> 4
        n = _CHANNEL_DATA_LEN[kind]
        if pos + n > end:
            raise MidiParseError("truncated channel message", pos)
        d = data[pos : pos + n]
        pos += n
        if kind == 0x9 and d[1] > 0:
            yield tick, "on", d[0]
        elif kind == 0x8 or kind == 0x9:
            yield tick, "off", d[0]
        elif kind == 0xB:
            yield tick, "cc", (d[0], d[1])
    yield tick, "end", None


class _TempoMap:
    def __init__(self, changes: Iterable[tuple[int, int]], ticks_per_beat: int):
        self.tpb = ticks_per_beat
        ticks, tempos = [0], [DEFAULT_TEMPO]
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            if tick == ticks[-1]:
                tempos[-1] = tempo
            else:
                ticks.append(tick)
                tempos.append(tempo)
        self.ticks = ticks
        self.tempos = tempos
        # seconds elapsed at each change point
        secs = [0.0]
        for i in range(1, len(ticks)):
            secs.append(secs[-1] + (ticks[i] - ticks[i - 1]) * tempos[i - 1] / (1e6 * self.tpb))
        self.secs = secs

    def seconds(self, tick: int) -> float:
        i = 0
        # tempo maps are short; linear scan is fine
        for j in range(len(self.ticks) - 1, -1, -1):
            if self.ticks[j] <= tick:
                i = j
                break
        return self.secs[i] + (tick - self.ticks[i]) * self.tempos[i] / (1e6 * self.tpb)


def parse_midi(data: bytes) -> Score:
    """Parse a format-0 or format-1 standard MIDI file.

    Notes are matched first-in first-out per key. Notes outside the 88-key
    range are dropped with a warning, as are zero-length notes. A note still
    sounding at the end of its track is closed there and flagged
    ``unterminated``.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError("bad header length", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported MIDI format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("ticks per beat must be positive", 12)

    pos = 8 + hlen
    tracks = []
    while len(tracks) < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError(f"expected {ntracks} tracks, found {len(tracks)}", pos)
        cid = data[pos : pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError("chunk length overruns file", pos + 4)
        if cid == b"MTrk":
            tracks.append(list(_parse_track(data, body, body + clen)))
        elif not cid.isascii():
            raise MidiParseError("malformed chunk id", pos)
        pos = body + clen

    tempo_map = _TempoMap(
        ((tick, val) for trk in tracks for tick, kind, val in trk if kind == "tempo"),
        division,
    )
    sec = tempo_map.seconds

    score = Score()
    pedal_ticks: list[tuple[int, bool]] = []
    for ti, trk in enumerate(tracks):
        open_notes: dict[int, list[int]] = {}
        end_tick = trk[-1][0] if trk else 0
        for tick, kind, val in trk:
            if kind == "on":
                open_notes.setdefault(val, []).append(tick)
            elif kind == "off":
                starts = open_notes.get(val)
                if starts:
                    _close(score, val, starts.pop(0), tick, sec, False)
            elif kind == "cc" and val[0] == PEDAL_CONTROLLER:
                pedal_ticks.append((tick, val[1] >= 64))
        for note, starts in sorted(open_notes.items()):
            for on in starts:
                score.warnings.append(
                    f"track {ti}: note {note} at tick {on} never released; closed at track end"
                )
                _close(score, note, on, end_tick, sec, True)

    state = False
    for tick, on in sorted(pedal_ticks, key=lambda p: p[0]):
        if on != state:
            score.pedal.append((sec(tick), on))
            state = on
    score.notes.sort(key=lambda n: (n.on_time, n.key_index))
    return score


def _close(score: Score, note: int, on: int, off: int, sec, unterminated: bool):
    key = note - LOWEST_MIDI_NOTE
    if not 0 <= key < N_KEYS:
        score.warnings.append(f"note {note} outside the 88-key range dropped")
        return
    t_on, t_off = sec(on), sec(off)
    if t_off <= t_on:
        score.warnings.append(f"zero-length note {note} at {t_on:.6f}s dropped")
        return
    score.notes.append(NoteEvent(key, t_on, t_off, unterminated))


# --------------------------------------------------------------------------
# writing


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(
    notes: Sequence[NoteEvent],
    pedal: Sequence[tuple[float, bool]] = (),
    tempo: int = DEFAULT_TEMPO,
    ticks_per_beat: int = 480,
    velocity: int = 80,
) -> bytes:
    """Serialize notes to a format-0 MIDI file at a constant tempo."""
    to_tick = lambda t: int(round(t * 1e6 * ticks_per_beat / tempo))
    events = []
    # ordering at equal ticks: offs before ons so re-strikes survive
    for n in notes:
        note = n.key_index + LOWEST_MIDI_NOTE
        events.append((to_tick(n.on_time), 1, bytes([0x90, note, velocity])))
        events.append((to_tick(n.off_time), 0, bytes([0x80, note, 0])))
    for t, on in pedal:
        events.append((to_tick(t), 0, bytes([0xB0, PEDAL_CONTROLLER, 127 if on else 0])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray(b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big"))
    last = 0
    for tick, _, msg in events:
        body += _vlq(tick - last) + msg
        last = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_beat)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# --------------------------------------------------------------------------
# piano-state trajectories


@dataclass(frozen=True)
class PianoState:
    keys: np.ndarray
    pedal: bool = False

    def __post_init__(self):
        keys = np.asarray(self.keys)
        if keys.shape != (N_KEYS,):
            raise ValueError(f"expected {N_KEYS} key flags, got shape {keys.shape}")
        if not np.isin(keys, (0, 1)).all():
            raise ValueError("key flags must be binary")
        object.__setattr__(self, "keys", keys.astype(np.uint8))


@dataclass
class PianoStateTrajectory:
    """Binary piano roll sampled at ``rate_hz``; frame i starts at i / rate_hz."""

    keys: np.ndarray  # (T, 88) uint8
    pedal: np.ndarray  # (T,) uint8
    rate_hz: float = 20.0

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.uint8)
        self.pedal = np.asarray(self.pedal, dtype=np.uint8)
        if self.keys.ndim != 2 or self.keys.shape[1] != N_KEYS:
            raise ValueError(f"keys must have shape (T, {N_KEYS})")
        if self.pedal.shape != (self.keys.shape[0],):
            raise ValueError("pedal must have one flag per frame")
        if self.keys.shape[0] == 0:
            raise ValueError("trajectory must be nonempty")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")

    def __len__(self) -> int:
        return self.keys.shape[0]

    def __getitem__(self, i: int) -> PianoState:
        return PianoState(self.keys[i], bool(self.pedal[i]))

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) / self.rate_hz

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"k{i}" for i in range(N_KEYS)] + ["pedal"])
        for i in range(len(self)):
            w.writerow([repr(i / self.rate_hz)] + self.keys[i].tolist() + [int(self.pedal[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PianoStateTrajectory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or len(rows[0]) != N_KEYS + 2:
            raise ValueError("piano-state CSV must have t, 88 key columns and pedal")
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        if len(body) < 2:
            rate = 20.0
        else:
            rate = 1.0 / (body[1, 0] - body[0, 0])
            rate = float(round(rate, 9))
        return cls(body[:, 1:-1].astype(np.uint8), body[:, -1].astype(np.uint8), rate)

    def to_json(self) -> str:
        # rows are stored as sorted lists of active key indices
        return json.dumps(
            {
                "rate_hz": self.rate_hz,
                "n_frames": len(self),
                "keys": [np.flatnonzero(r).tolist() for r in self.keys],
                "pedal": self.pedal.tolist(),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "PianoStateTrajectory":
        obj = json.loads(text)
        keys = np.zeros((obj["n_frames"], N_KEYS), dtype=np.uint8)
        for i, active in enumerate(obj["keys"]):
            keys[i, active] = 1
        return cls(keys, np.asarray(obj["pedal"], dtype=np.uint8), float(obj["rate_hz"]))


def _n_frames(end_time: float, rate_hz: float) -> int:
    return max(0, math.ceil(end_time * rate_hz - _TIME_EPS))


def discretize(
    notes: Sequence[NoteEvent] | Score,
    rate_hz: float = 20.0,
    pedal: Sequence[tuple[float, bool]] | None = None,
    tail_frames: int = 1,
) -> PianoStateTrajectory:
    """Sample notes at frame start instants ``i / rate_hz``.

    A key flag is set iff ``on_time <= i / rate_hz < off_time``. The
    trajectory covers the last note release plus ``tail_frames`` frames.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if isinstance(notes, Score):
        pedal = notes.pedal if pedal is None else pedal
        notes = notes.notes
    pedal = list(pedal or [])
    end = max([n.off_time for n in notes] + [t for t, _ in pedal], default=0.0)
    T = _n_frames(end, rate_hz) + tail_frames
    if T <= 0:
        raise ValueError("empty trajectory; use tail_frames >= 1")
    keys = np.zeros((T, N_KEYS), dtype=np.uint8)
    for n in notes:
        first = _n_frames(n.on_time, rate_hz)
        last = _n_frames(n.off_time, rate_hz)  # exclusive
        keys[first : min(last, T), n.key_index] = 1
    ped = np.zeros(T, dtype=np.uint8)
    state, since = False, 0
    for t, on in sorted(pedal, key=lambda p: p[0]):
        i = min(_n_frames(t, rate_hz), T)
        if state:
            ped[since:i] = 1
        state, since = on, i
    if state:
        ped[since:] = 1
    return PianoStateTrajectory(keys, ped, rate_hz)


@dataclass(frozen=True)
class GoalWindow:
    keys: np.ndarray  # (L, 88)
    pedal: np.ndarray  # (L,)

    @property
    def L(self) -> int:
        return self.keys.shape[0]

    @property
    def states(self) -> list[PianoState]:
        return [PianoState(k, bool(p)) for k, p in zip(self.keys, self.pedal)]


def frames_from(traj: PianoStateTrajectory, start: int, L: int) -> GoalWindow:
    """Frames ``start .. start+L-1``, zero-padded past the song end."""
    keys = np.zeros((L, N_KEYS), dtype=np.uint8)
    ped = np.zeros(L, dtype=np.uint8)
    stop = min(start + L, len(traj))
    if stop > start:
        keys[: stop - start] = traj.keys[start:stop]
        ped[: stop - start] = traj.pedal[start:stop]
    return GoalWindow(keys, ped)


def goal_window(traj: PianoStateTrajectory, t: int, L: int) -> GoalWindow:
    """The lookahead goal at frame ``t``: states ``t+1 .. t+L``."""
    if not 0 <= t < len(traj):
        raise IndexError(f"frame {t} outside trajectory of length {len(traj)}")
    if L < 1:
        raise ValueError("lookahead L must be >= 1")
    return frames_from(traj, t + 1, L)

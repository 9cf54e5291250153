"""Event-token language: measure/instrument/note tokens and the song codec.

A measure is ``M:dyn B:tempo L:len`` followed by one part per instrument
track present in it: ``I:x [R:y]`` then the part's ``w:`` (advance), ``d:``
(duration) and ``N:``/``D:`` (pitched note / drum hit) tokens.
"""
from __future__ import annotations

import json
import logging
import math
import re
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .midi_model import (
    DRUMS, GRID_TPQ, MeasureMap, Note, QuantizedSong, TempoChange, TimeSignature, Track,
    signature_for_length,
)

log = logging.getLogger(__name__)

RANGES = {
    "M": (0, 7), "B": (0, 7), "L": (1, 192), "I": (0, 128), "R": (1, 63),
    "N": (0, 127), "D": (0, 127), "d": (0, 192), "w": (1, 191),
    "MASK": (0, 255), "MONO": (0, 0), "POLY": (0, 0),
}
NOTE_KINDS = frozenset("wdND")
N_LEVELS = 8


class TokenError(ValueError):
    """Malformed token or token sequence; ``index`` locates the offending token."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"token {index}: {message}")
        self.index = index


class EncodeError(ValueError):
    pass


class Token(NamedTuple):
    kind: str
    value: int = 0

    def __str__(self):
        if self.kind == "MASK":
            return f"<extra_id_{self.value}>"
        if self.kind == "MONO":
            return "<mono>"
        if self.kind == "POLY":
            return "<poly>"
        return f"{self.kind}:{self.value}"


def tok(kind: str, value: int = 0) -> Token:
    lo, hi = RANGES[kind]
    if not lo <= value <= hi:
        raise EncodeError(f"{kind} value {value} outside [{lo}, {hi}]")
    return Token(kind, value)


MONO = Token("MONO")
POLY = Token("POLY")

_TOKEN_RE = re.compile(r"^(?:([MBLIRNDdw]):(\d+)|<extra_id_(\d+)>|<(mono)>|<(poly)>)$")


def to_text(tokens: Iterable[Token]) -> str:
    return " ".join(map(str, tokens))


def parse_text(text: str) -> list[Token]:
    out = []
    for i, word in enumerate(text.split()):
        m = _TOKEN_RE.match(word)
        if not m:
            raise TokenError(f"unknown token {word!r}", i)
        if m.group(1):
            kind, value = m.group(1), int(m.group(2))
        elif m.group(3) is not None:
            kind, value = "MASK", int(m.group(3))
        else:
            kind, value = ("MONO" if m.group(4) else "POLY"), 0
        lo, hi = RANGES[kind]
        if not lo <= value <= hi:
            raise TokenError(f"{word} outside [{lo}, {hi}]", i)
        out.append(Token(kind, value))
    return out


# --------------------------------------------------------------------------- levels


@dataclass(frozen=True)
class LevelThresholds:
    """Seven ascending cut points each for dynamics (velocity) and tempo (BPM).

    A value equal to a cut point belongs to the upper level.
    """

    dynamics: tuple[float, ...]
    tempo: tuple[float, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("dynamics", "tempo"):
            b = tuple(float(x) for x in getattr(self, name))
            if len(b) != N_LEVELS - 1 or any(x >= y for x, y in zip(b, b[1:])):
                raise ValueError(f"{name} bounds must be 7 strictly ascending values: {b}")
            object.__setattr__(self, name, b)

    @classmethod
    def default(cls) -> "LevelThresholds":
        return cls((16, 32, 48, 64, 80, 96, 112), (50, 70, 90, 105, 120, 140, 170), {"source": "default"})

    def dynamics_level(self, velocity: float) -> int:
        return bisect_right(self.dynamics, velocity)

    def tempo_level(self, bpm: float) -> int:
        return bisect_right(self.tempo, bpm)

    def velocity_for_level(self, level: int) -> int:
        b = self.dynamics
        lo = 1 if level == 0 else b[level - 1]
        hi = 128 if level == N_LEVELS - 1 else b[level]
        v = round((lo + hi) / 2)
        return int(min(max(v, math.ceil(lo)), math.ceil(hi) - 1))

    def bpm_for_level(self, level: int) -> float:
        b = self.tempo
        if level == 0:
            return b[0] / 2
        if level == N_LEVELS - 1:
            return b[-1] + (b[-1] - b[-2]) / 2
        return (b[level - 1] + b[level]) / 2

    def to_json(self) -> dict:
        return {"schema": "midifill.levels/1", "dynamics": list(self.dynamics),
                "tempo": list(self.tempo), "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "LevelThresholds":
        return cls(tuple(d["dynamics"]), tuple(d["tempo"]), d.get("meta", {}))

    @classmethod
    def load(cls, path) -> "LevelThresholds":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _octiles(values: Sequence[float], floor: float, ceiling: float | None, what: str) -> tuple[float, ...]:
    if len(set(values)) < N_LEVELS:
        log.warning("only %d distinct %s values; padding level bounds", len(set(values)), what)
    b = [float(x) for x in np.quantile(np.asarray(values, dtype=float), [k / N_LEVELS for k in range(1, N_LEVELS)])]
    # keep every level wide enough to hold a representative integer value
    b[0] = max(b[0], floor + 1)
    for i in range(1, len(b)):
        b[i] = max(b[i], b[i - 1] + 1)
    if ceiling is not None and b[-1] > ceiling:
        b[-1] = ceiling
        for i in range(len(b) - 2, -1, -1):
            b[i] = min(b[i], b[i + 1] - 1)
    return tuple(b)


def measure_mean_velocities(song: QuantizedSong) -> list[float | None]:
    sums = defaultdict(int)
    counts = defaultdict(int)
    for tr in song.tracks:
        for n in tr.notes:
            i = song.measures.index_of(n.onset)
            sums[i] += n.velocity
            counts[i] += 1
    return [sums[i] / counts[i] if counts[i] else None for i in range(len(song.measures))]


def learn_level_thresholds(corpus: Iterable[QuantizedSong]) -> LevelThresholds:
    """Equal-frequency (octile) cut points over all measures of ``corpus``."""
    vels, bpms = [], []
    n_songs = 0
    for song in corpus:
        n_songs += 1
        vels.extend(v for v in measure_mean_velocities(song) if v is not None)
        bpms.extend(song.bpm_at(start) for start, _ in song.measures)
    if not vels or not bpms:
        raise ValueError("cannot learn level thresholds from an empty corpus")
    return LevelThresholds(
        _octiles(vels, 1, 127, "velocity"),
        _octiles(bpms, 0, None, "tempo"),
        {"source": "learned", "songs": n_songs, "measures": len(bpms)},
    )


def measure_levels(song: QuantizedSong, thresholds: LevelThresholds) -> list[tuple[int, int]]:
    """(dynamics, tempo) level per measure; empty measures reuse the last dynamics level."""
    out = []
    dyn = 4
    for (start, _), mean in zip(song.measures, measure_mean_velocities(song)):
        if mean is not None:
            dyn = thresholds.dynamics_level(mean)
        out.append((dyn, thresholds.tempo_level(song.bpm_at(start))))
    return out


# --------------------------------------------------------------------------- encoding


def classify_polyphony(notes: Iterable[Note]) -> Token:
    onsets = [n.onset for n in notes]
    return MONO if len(onsets) == len(set(onsets)) else POLY


def track_layout(song: QuantizedSong) -> dict[int, tuple[int, int]]:
    """Map track index -> (instrument, R value), R = 0 for the first of an instrument.

    Same-instrument tracks are ranked by descending whole-song mean pitch,
    ties by track index. Empty tracks are left out.
    """
    groups = defaultdict(list)
    for i, tr in enumerate(song.tracks):
        if tr.notes:
            mean = sum(n.pitch for n in tr.notes) / len(tr.notes)
            groups[tr.instrument].append((-mean, i))
    layout = {}
    for instrument, members in groups.items():
        if len(members) > RANGES["R"][1] + 1:
            raise EncodeError(f"{len(members)} tracks share instrument {instrument}; at most 64 allowed")
        for rank, (_, i) in enumerate(sorted(members)):
            layout[i] = (instrument, rank)
    return layout


def encode_part(notes: Sequence[Note], measure_start: int, drums: bool) -> list[Token]:
    """w/d/N (or D) tokens for one track-measure, insertion point and duration reset."""
    out = []
    pos = 0
    dur = None
    for n in sorted(notes, key=lambda n: (n.onset, n.pitch, n.duration)):
        rel = n.onset - measure_start
        if rel > pos:
            out.append(tok("w", rel - pos))
            pos = rel
        if n.duration != dur:
            if n.duration > RANGES["d"][1]:
                raise EncodeError(f"note duration {n.duration} exceeds 192 ticks")
            out.append(tok("d", n.duration))
            dur = n.duration
        out.append(tok("D" if drums else "N", n.pitch))
    return out


@dataclass
class Part:
    track: int
    head: list[Token]
    body: list[Token]
    notes: list[Note]


@dataclass
class MeasureTokens:
    header: list[Token]
    parts: list[Part]

    def tokens(self) -> list[Token]:
        out = list(self.header)
        for p in self.parts:
            out += p.head
            out += p.body
        return out

    def __len__(self):
        return len(self.header) + sum(len(p.head) + len(p.body) for p in self.parts)


def encode_measures(song: QuantizedSong, thresholds: LevelThresholds,
                    start: int = 0, stop: int | None = None) -> list[MeasureTokens]:
    """Structured encoding of measures ``start:stop``.

    Instrument ranks and dynamics carry-over are computed on the whole song
    so a slice encodes exactly as it appears inside the full encoding.
    """
    measures = song.measures
    stop = len(measures) if stop is None else stop
    layout = track_layout(song)
    levels = measure_levels(song, thresholds)
    cells: dict[tuple[int, int], list[Note]] = defaultdict(list)
    for i, tr in enumerate(song.tracks):
        for n in tr.notes:
            m = measures.index_of(n.onset)
            ms, ml = measures[m]
            if not ms <= n.onset < ms + ml:
                raise EncodeError(f"note at tick {n.onset} lies outside every measure")
            if start <= m < stop:
                cells[(m, i)].append(n)
    order = sorted(layout, key=lambda i: layout[i])
    out = []
    for m in range(start, stop):
        ms, ml = measures[m]
        if not 1 <= ml <= RANGES["L"][1]:
            raise EncodeError(f"measure {m} is {ml} ticks long; L allows 1..192")
        dyn, tempo = levels[m]
        parts = []
        for i in order:
            notes = cells.get((m, i))
            if not notes:
                continue
            instrument, rank = layout[i]
            head = [tok("I", instrument)] + ([tok("R", rank)] if rank else [])
            parts.append(Part(i, head, encode_part(notes, ms, instrument == DRUMS), notes))
        out.append(MeasureTokens([tok("M", dyn), tok("B", tempo), tok("L", ml)], parts))
    return out


def encode(song: QuantizedSong, thresholds: LevelThresholds) -> list[Token]:
    out = []
    for m in encode_measures(song, thresholds):
        out += m.tokens()
    return out


# --------------------------------------------------------------------------- decoding


def decode_part(tokens: Sequence[Token], measure_length: int, drums: bool,
                offset: int = 0) -> list[tuple[int, int, int]]:
    """(onset, duration, pitch) triples from a part body, onsets measure-relative."""
    notes = []
    pos = 0
    dur = None
    for k, t in enumerate(tokens):
        if t.kind == "w":
            pos += t.value
            if pos >= measure_length:
                raise TokenError(f"insertion point {pos} leaves a {measure_length}-tick measure", offset + k)
        elif t.kind == "d":
            dur = t.value
        elif t.kind in ("N", "D"):
            if (t.kind == "D") != drums:
                raise TokenError(f"{t} used for {'drums' if drums else 'a pitched instrument'}", offset + k)
            if dur is None:
                raise TokenError("note before any d: token", offset + k)
            notes.append((pos, dur, t.value))
        else:
            raise TokenError(f"unexpected {t} inside a part", offset + k)
    return notes


def split_measures(tokens: Sequence[Token]) -> list[tuple[int, int]]:
    """(start, stop) index ranges of the measures in a token sequence."""
    starts = [i for i, t in enumerate(tokens) if t.kind == "M"]
    if tokens and (not starts or starts[0] != 0):
        raise TokenError("sequence must start with M:", 0)
    return list(zip(starts, starts[1:] + [len(tokens)]))


def iter_parts(tokens: Sequence[Token], lo: int, hi: int):
    """Yield (instrument, rank, body_start, body_stop) for parts in tokens[lo:hi] after the header."""
    i = lo
    while i < hi:
        t = tokens[i]
        if t.kind != "I":
            raise TokenError(f"expected I:, found {t}", i)
        instrument, rank = t.value, 0
        i += 1
        if i < hi and tokens[i].kind == "R":
            rank = tokens[i].value
            i += 1
        j = i
        while j < hi and tokens[j].kind != "I":
            if tokens[j].kind in ("M", "B", "L", "R"):
                raise TokenError(f"unexpected {tokens[j]} inside a part", j)
            j += 1
        yield instrument, rank, i, j
        i = j


def read_header(tokens: Sequence[Token], lo: int) -> tuple[int, int, int]:
    kinds = [t.kind for t in tokens[lo:lo + 3]]
    if kinds != ["M", "B", "L"]:
        raise TokenError("measure must begin with M: B: L:", lo)
    return tokens[lo].value, tokens[lo + 1].value, tokens[lo + 2].value


def decode(tokens: Sequence[Token] | str, thresholds: LevelThresholds) -> QuantizedSong:
    """Rebuild a QuantizedSong from a token sequence (no mask sentinels).

    Tracks come back ordered by (instrument, R value). Velocities and tempos
    are the representative values of each measure's levels.
    """
    if isinstance(tokens, str):
        tokens = parse_text(tokens)
    bounds = []
    notes: dict[tuple[int, int], list[Note]] = defaultdict(list)
    tempos: list[TempoChange] = []
    sigs: list[TimeSignature] = []
    cursor = 0
    for lo, hi in split_measures(tokens):
        dyn, tempo, length = read_header(tokens, lo)
        vel = thresholds.velocity_for_level(dyn)
        if not tempos or thresholds.tempo_level(tempos[-1].bpm) != tempo:
            tempos.append(TempoChange(cursor, thresholds.bpm_for_level(tempo)))
        sig = signature_for_length(length, GRID_TPQ)
        if not sigs or (sigs[-1].numerator, sigs[-1].denominator) != sig:
            sigs.append(TimeSignature(cursor, *sig))
        for instrument, rank, a, b in iter_parts(tokens, lo + 3, hi):
            for on, dur, pitch in decode_part(tokens[a:b], length, instrument == DRUMS, a):
                notes[(instrument, rank)].append(Note(cursor + on, dur, pitch, vel))
        bounds.append((cursor, length))
        cursor += length
    tracks = tuple(Track(instrument, tuple(notes[(instrument, rank)])) for instrument, rank in sorted(notes))
    return QuantizedSong(resolution=GRID_TPQ, tracks=tracks, tempos=tuple(tempos),
                         time_signatures=tuple(sigs), end_tick=cursor, measures=MeasureMap(tuple(bounds)))


def note_structure(song: QuantizedSong):
    """Comparable summary of what the codec preserves.

    Measure lengths plus, per (instrument, R value), the sorted
    (onset, duration, pitch) triples.
    """
    layout = track_layout(song)
    parts = {}
    for i, key in layout.items():
        parts[key] = sorted((n.onset, n.duration, n.pitch) for n in song.tracks[i].notes)
    return tuple(song.measures.lengths), parts

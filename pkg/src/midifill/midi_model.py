"""Core MIDI data model, Standard MIDI File read/write, and grid quantization.

Times are integer ticks. A :class:`Song` carries its own resolution (ticks per
quarter note); a :class:`QuantizedSong` is a Song at the 24-tick grid whose
note onsets and ends sit on multiples of 3 or 4 ticks from their measure start.
"""
from __future__ import annotations

import logging
import struct
from bisect import bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

log = logging.getLogger(__name__)

DRUMS = 128
DRUM_CHANNEL = 9
GRID_TPQ = 24
DEFAULT_BPM = 120.0
SUSTAIN_CC = 64

JSON_SCHEMA = "midifill.song/1"


class MidiFormatError(ValueError):
    """Raised for malformed or unsupported Standard MIDI File data."""


@dataclass(frozen=True)
class Note:
    onset: int
    duration: int
    pitch: int
    velocity: int = 64

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if self.onset < 0 or self.duration < 0:
            raise ValueError(f"negative time in note: {self}")

    @property
    def end(self) -> int:
        return self.onset + self.duration


def note_order(n: Note):
    return (n.onset, n.pitch, n.duration, n.velocity)


@dataclass(frozen=True)
class Track:
    """Notes for one instrument (128 = drums).

    ``programs`` holds program changes that occur after the first note; the
    program in effect at the first note is ``instrument``. ``pedal`` is the
    sustain pedal as (tick, down) pairs and ``controls`` every other
    controller event as (tick, number, value).
    """

    instrument: int
    notes: tuple[Note, ...] = ()
    name: str = ""
    programs: tuple[tuple[int, int], ...] = ()
    pedal: tuple[tuple[int, bool], ...] = ()
    controls: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if not 0 <= self.instrument <= DRUMS:
            raise ValueError(f"instrument out of range: {self.instrument}")
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=note_order)))
        object.__setattr__(self, "programs", tuple(sorted(self.programs)))
        object.__setattr__(self, "pedal", tuple(sorted(self.pedal)))
        object.__setattr__(self, "controls", tuple(sorted(self.controls)))

    @property
    def is_drum(self) -> bool:
        return self.instrument == DRUMS


class TempoChange(NamedTuple):
    tick: int
    bpm: float


class TimeSignature(NamedTuple):
    tick: int
    numerator: int
    denominator: int


@dataclass(frozen=True)
class Song:
    resolution: int = 480
    tracks: tuple[Track, ...] = ()
    tempos: tuple[TempoChange, ...] = ()
    time_signatures: tuple[TimeSignature, ...] = ()
    end_tick: int = 0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        tempos = sorted(TempoChange(int(t), float(b)) for t, b in self.tempos)
        if not tempos or tempos[0].tick > 0:
            tempos.insert(0, TempoChange(0, DEFAULT_BPM))
        sigs = sorted(
            (TimeSignature(*s) for s in self.time_signatures), key=lambda s: s.tick
        )
        if not sigs or sigs[0].tick > 0:
            sigs.insert(0, TimeSignature(0, 4, 4))
        if any(t.tick < 0 for t in tempos) or any(s.tick < 0 for s in sigs):
            raise ValueError("negative event tick")
        object.__setattr__(self, "tempos", tuple(tempos))
        object.__setattr__(self, "time_signatures", tuple(sigs))
        object.__setattr__(self, "tracks", tuple(self.tracks))

    @property
    def last_tick(self) -> int:
        """Last tick touched by any note or event (at least ``end_tick``)."""
        last = max(self.end_tick, self.tempos[-1].tick, self.time_signatures[-1].tick)
        for tr in self.tracks:
            for n in tr.notes:
                last = max(last, n.end, n.onset + 1)
            for seq in (tr.programs, tr.pedal, tr.controls):
                if seq:
                    last = max(last, seq[-1][0])
        return last

    def n_notes(self) -> int:
        return sum(len(t.notes) for t in self.tracks)

    def bpm_at(self, tick: int) -> float:
        i = bisect_right([t.tick for t in self.tempos], tick) - 1
        return self.tempos[max(i, 0)].bpm


@dataclass(frozen=True)
class MeasureMap:
    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(map(tuple, self.boundaries)))
        object.__setattr__(self, "_starts", [s for s, _ in self.boundaries])

    def __len__(self):
        return len(self.boundaries)

    def __iter__(self):
        return iter(self.boundaries)

    def __getitem__(self, i):
        return self.boundaries[i]

    @property
    def starts(self) -> list[int]:
        return list(self._starts)

    @property
    def lengths(self) -> list[int]:
        return [length for _, length in self.boundaries]

    @property
    def end(self) -> int:
        start, length = self.boundaries[-1]
        return start + length

    def index_of(self, tick: int) -> int:
        """Index of the measure containing ``tick`` (clamped to the last one)."""
        return max(bisect_right(self._starts, tick) - 1, 0)

    def too_long(self, resolution: int, max_quarters: int = 8) -> list[int]:
        return [i for i, (_, length) in enumerate(self.boundaries) if length > max_quarters * resolution]


@dataclass(frozen=True)
class QuantizedSong(Song):
    """A Song on the 24-tick grid with its measure map attached."""

    measures: MeasureMap = None

    def __post_init__(self):
        super().__post_init__()
        if self.measures is None:
            object.__setattr__(self, "measures", compute_measures(self))

    def measure_notes(self, track_index: int, measure_index: int) -> list[Note]:
        start, length = self.measures[measure_index]
        return [n for n in self.tracks[track_index].notes if start <= n.onset < start + length]


# --------------------------------------------------------------------------- measures


def measure_ticks(sig: TimeSignature, resolution: int) -> int:
    if sig.numerator <= 0 or sig.denominator <= 0:
        raise ValueError(f"nonpositive time signature {sig.numerator}/{sig.denominator}")
    exact = Fraction(sig.numerator * 4 * resolution, sig.denominator)
    if exact.denominator != 1:
        log.warning("time signature %s/%s is not a whole number of ticks at %d tpq",
                    sig.numerator, sig.denominator, resolution)
    return max(1, round(exact))


def signature_for_length(ticks: int, resolution: int) -> tuple[int, int]:
    """A numerator/denominator pair whose measure spans ``ticks``."""
    whole = Fraction(ticks, 4 * resolution)
    num, den = whole.numerator, whole.denominator
    if den < 4:
        num, den = num * 4 // den, 4
    return num, den


def compute_measures(song: Song) -> MeasureMap:
    """Tile [0, last tick] with measures from the time-signature map.

    A signature change that falls inside a measure cuts that measure short and
    starts a new one at its own tick.
    """
    sigs = song.time_signatures
    end = song.last_tick
    bounds: list[tuple[int, int]] = []
    for i, sig in enumerate(sigs):
        length = measure_ticks(sig, song.resolution)
        seg_end = sigs[i + 1].tick if i + 1 < len(sigs) else None
        t = sig.tick
        while (t < seg_end) if seg_end is not None else (t < end or not bounds):
            step = length if seg_end is None else min(length, seg_end - t)
            bounds.append((t, step))
            t += step
    return MeasureMap(tuple(bounds))


# --------------------------------------------------------------------------- quantization


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def _snap(x: Fraction, measures: MeasureMap, subdivisions: Sequence[int]) -> int:
    i = measures.index_of(int(x.__floor__()))
    start, length = measures[i]
    off = x - start
    cands = {length}
    for a in subdivisions:
        lo = (off // a) * a
        for c in (lo, lo + a):
            if 0 <= c <= length:
                cands.add(int(c))
    # ties: prefer straight (multiple-of-3) positions, then the earlier one
    best = min(cands, key=lambda c: (abs(c - off), c != length and c % 3 != 0, c))
    return start + best


def quantize(song: Song, ticks_per_quarter: int = GRID_TPQ,
             allowed_subdivisions: Sequence[int] = (3, 4)) -> QuantizedSong:
    """Rescale ``song`` to ``ticks_per_quarter`` and snap onsets and ends to the grid.

    A position is allowed when its offset from the measure start is a
    multiple of one of ``allowed_subdivisions``. Pitched notes keep a duration
    of at least one tick; drum notes may end up with zero duration.
    """
    subs = tuple(sorted(set(allowed_subdivisions)))
    scale = Fraction(ticks_per_quarter, song.resolution)

    def rs(t: int) -> int:
        return _round_half_up(t * scale)

    sigs = tuple(TimeSignature(rs(s.tick), s.numerator, s.denominator) for s in song.time_signatures)
    tempos = tuple(TempoChange(rs(t.tick), t.bpm) for t in song.tempos)
    end_tick = int((song.last_tick * scale).__ceil__())
    grid = compute_measures(Song(resolution=ticks_per_quarter, time_signatures=sigs, end_tick=end_tick))

    tracks = []
    for tr in song.tracks:
        notes = []
        for n in tr.notes:
            on = _snap(n.onset * scale, grid, subs)
            off = _snap(n.end * scale, grid, subs)
            dur = off - on
            if not tr.is_drum:
                dur = max(dur, 1)
            notes.append(Note(on, dur, n.pitch, n.velocity))
        tracks.append(replace(
            tr, notes=tuple(notes),
            programs=tuple((rs(t), p) for t, p in tr.programs),
            pedal=tuple((rs(t), v) for t, v in tr.pedal),
            controls=tuple((rs(t), c, v) for t, c, v in tr.controls),
        ))
    return QuantizedSong(resolution=ticks_per_quarter, tracks=tuple(tracks), tempos=tempos,
                         time_signatures=sigs, end_tick=end_tick)


def to_quantized(song: Song) -> QuantizedSong:
    """View an already on-grid 24-tpq Song as a QuantizedSong without snapping."""
    if isinstance(song, QuantizedSong):
        return song
    if song.resolution != GRID_TPQ:
        return quantize(song)
    return QuantizedSong(resolution=song.resolution, tracks=song.tracks, tempos=song.tempos,
                         time_signatures=song.time_signatures, end_tick=song.end_tick)


def on_grid(song: QuantizedSong) -> bool:
    for tr in song.tracks:
        for n in tr.notes:
            start, _ = song.measures[song.measures.index_of(n.onset)]
            off = n.onset - start
            if off % 3 and off % 4:
                return False
    return True


# --------------------------------------------------------------------------- SMF reading


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiFormatError("truncated variable-length quantity")
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiFormatError("variable-length quantity longer than 4 bytes")


_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


class _ChannelState:
    def __init__(self):
        self.open = defaultdict(deque)
        self.notes: list[Note] = []
        self.programs: list[tuple[int, int]] = []
        self.pedal: list[tuple[int, bool]] = []
        self.controls: list[tuple[int, int, int]] = []

    def close(self, pitch: int, tick: int):
        q = self.open.get(pitch)
        if q:
            onset, vel = q.popleft()
            self.notes.append(Note(onset, tick - onset, pitch, vel))


def _parse_track(chunk: bytes, tempos, sigs):
    pos = 0
    tick = 0
    status = None
    name = ""
    channels: dict[int, _ChannelState] = defaultdict(_ChannelState)
    while pos < len(chunk):
        delta, pos = _read_varlen(chunk, pos)
        tick += delta
        if pos >= len(chunk):
            raise MidiFormatError("truncated event")
        b = chunk[pos]
        if b == 0xFF:
            if pos + 2 > len(chunk):
                raise MidiFormatError("truncated meta event")
            kind = chunk[pos + 1]
            length, pos = _read_varlen(chunk, pos + 2)
            body = chunk[pos:pos + length]
            if len(body) < length:
                raise MidiFormatError("truncated meta event")
            pos += length
            if kind == 0x51 and length == 3:
                mpq = int.from_bytes(body, "big")
                if mpq > 0:
                    tempos.append(TempoChange(tick, 60_000_000 / mpq))
            elif kind == 0x58 and length >= 2:
                sigs.append(TimeSignature(tick, body[0], 2 ** body[1]))
            elif kind == 0x03 and not name:
                name = body.decode("latin-1")
            elif kind == 0x2F:
                break
            continue
        if b in (0xF0, 0xF7):
            length, pos = _read_varlen(chunk, pos + 1)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiFormatError("running status without a previous status byte")
        kind, ch = status & 0xF0, status & 0x0F
        n = _DATA_LEN.get(kind)
        if n is None:
            raise MidiFormatError(f"unexpected status byte 0x{status:02X}")
        args = chunk[pos:pos + n]
        if len(args) < n:
            raise MidiFormatError("truncated channel message")
        pos += n
        st = channels[ch]
        if kind == 0x90 and args[1] > 0:
            st.open[args[0]].append((tick, args[1]))
        elif kind == 0x80 or kind == 0x90:
            st.close(args[0], tick)
        elif kind == 0xC0:
            st.programs.append((tick, args[0]))
        elif kind == 0xB0:
            if args[0] == SUSTAIN_CC:
                st.pedal.append((tick, args[1] >= 64))
            else:
                st.controls.append((tick, args[0], args[1]))

    unresolved = 0
    for st in channels.values():
        for pitch, q in st.open.items():
            while q:
                unresolved += 1
                st.close(pitch, tick)
    if unresolved:
        log.warning("%d unresolved note-on(s) closed at track end (tick %d)", unresolved, tick)

    out = []
    for ch in sorted(channels):
        st = channels[ch]
        if not st.notes:
            continue
        first = min(n.onset for n in st.notes)
        if ch == DRUM_CHANNEL:
            instrument, later = DRUMS, ()
        else:
            before = [p for t, p in st.programs if t <= first]
            instrument = before[-1] if before else (st.programs[0][1] if st.programs else 0)
            later = tuple((t, p) for t, p in st.programs if t > first)
        out.append(Track(instrument, tuple(st.notes), name, later, tuple(st.pedal), tuple(st.controls)))
    return out, tick, unresolved


def parse_smf(data: bytes) -> Song:
    """Parse a format 0 or 1 Standard MIDI File into a Song.

    Each (track chunk, channel) pair with notes becomes one Track; channel 10
    is drums. Same-pitch notes are paired first-in first-out; note-ons still
    open at the end of a track are closed there.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiFormatError("missing MThd header")
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or len(data) < 8 + hlen:
        raise MidiFormatError("truncated header chunk")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiFormatError(f"unsupported SMF format {fmt}")
    if division & 0x8000 or division == 0:
        raise MidiFormatError("SMPTE time division is not supported")

    pos = 8 + hlen
    tracks: list[Track] = []
    tempos: list[TempoChange] = []
    sigs: list[TimeSignature] = []
    end_tick = 0
    found = 0
    while found < ntracks:
        if pos + 8 > len(data):
            raise MidiFormatError(f"truncated file: expected {ntracks} tracks, found {found}")
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        if len(body) < length:
            raise MidiFormatError("truncated chunk")
        pos += 8 + length
        if kind != b"MTrk":
            continue
        found += 1
        new, last, _ = _parse_track(body, tempos, sigs)
        tracks.extend(new)
        end_tick = max(end_tick, last)
    # keep the last event when several share a tick
    tempos = list({t.tick: t for t in sorted(tempos, key=lambda t: t.tick)}.values())
    sigs = list({s.tick: s for s in sorted(sigs, key=lambda s: s.tick)}.values())
    return Song(resolution=division, tracks=tuple(tracks), tempos=tuple(tempos),
                time_signatures=tuple(sigs), end_tick=end_tick)


def read_midi(path) -> Song:
    with open(path, "rb") as fh:
        return parse_smf(fh.read())


# --------------------------------------------------------------------------- SMF writing


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _chunk(events: Iterable[tuple[int, int, bytes]], end: int) -> bytes:
    body = bytearray()
    last = 0
    for tick, _, payload in sorted(events, key=lambda e: (e[0], e[1])):
        body += _varlen(tick - last) + payload
        last = tick
    body += _varlen(max(end - last, 0)) + b"\xFF\x2F\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _meta(kind: int, body: bytes) -> bytes:
    return bytes([0xFF, kind]) + _varlen(len(body)) + body


def write_smf(song: Song) -> bytes:
    """Serialize ``song`` as a format-1 SMF with tempo/meter on track 0."""
    end = song.last_tick
    meta = []
    for t in song.tempos:
        mpq = round(60_000_000 / t.bpm)
        if not 0 < mpq <= 0xFFFFFF:
            raise ValueError(f"tempo out of range: {t.bpm} BPM")
        meta.append((t.tick, 0, _meta(0x51, mpq.to_bytes(3, "big"))))
    for s in song.time_signatures:
        dd = s.denominator.bit_length() - 1
        if s.denominator <= 0 or 2 ** dd != s.denominator or not 0 < s.numerator < 256:
            raise ValueError(f"time signature {s.numerator}/{s.denominator} not representable in SMF")
        meta.append((s.tick, 0, _meta(0x58, bytes([s.numerator, dd, 24, 8]))))
    chunks = [_chunk(meta, end)]

    melodic = [c for c in range(16) if c != DRUM_CHANNEL]
    k = 0
    for tr in song.tracks:
        if tr.is_drum:
            ch = DRUM_CHANNEL
        else:
            ch = melodic[k % len(melodic)]
            k += 1
        ev = []
        if tr.name:
            ev.append((0, 0, _meta(0x03, tr.name.encode("latin-1", "replace"))))
        if not tr.is_drum:
            ev.append((0, 1, bytes([0xC0 | ch, tr.instrument])))
        for t, p in tr.programs:
            ev.append((t, 1, bytes([0xC0 | ch, p])))
        for t, c, v in tr.controls:
            ev.append((t, 2, bytes([0xB0 | ch, c, v])))
        for t, down in tr.pedal:
            ev.append((t, 2, bytes([0xB0 | ch, SUSTAIN_CC, 127 if down else 0])))
        for n in tr.notes:
            ev.append((n.onset, 4, bytes([0x90 | ch, n.pitch, n.velocity])))
            # offs of sounding notes go before new onsets; zero-length offs after
            ev.append((n.end, 5 if n.duration == 0 else 3, bytes([0x80 | ch, n.pitch, 0])))
        chunks.append(_chunk(ev, end))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), song.resolution)
    return header + b"".join(chunks)


def write_midi(song: Song, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_smf(song))


# --------------------------------------------------------------------------- JSON


def song_to_json(song: Song) -> dict:
    d = {
        "schema": JSON_SCHEMA,
        "resolution": song.resolution,
        "end_tick": song.end_tick,
        "tempos": [list(t) for t in song.tempos],
        "time_signatures": [list(s) for s in song.time_signatures],
        "tracks": [
            {
                "instrument": tr.instrument,
                "name": tr.name,
                "notes": [[n.onset, n.duration, n.pitch, n.velocity] for n in tr.notes],
                "programs": [list(p) for p in tr.programs],
                "pedal": [[t, bool(v)] for t, v in tr.pedal],
                "controls": [list(c) for c in tr.controls],
            }
            for tr in song.tracks
        ],
    }
    if isinstance(song, QuantizedSong):
        d["measures"] = [list(b) for b in song.measures]
    return d


def song_from_json(d: dict) -> Song:
    tracks = tuple(
        Track(
            t["instrument"],
            tuple(Note(*n) for n in t["notes"]),
            t.get("name", ""),
            tuple(tuple(p) for p in t.get("programs", ())),
            tuple((a, bool(b)) for a, b in t.get("pedal", ())),
            tuple(tuple(c) for c in t.get("controls", ())),
        )
        for t in d["tracks"]
    )
    kw = dict(
        resolution=d["resolution"],
        tracks=tracks,
        tempos=tuple(TempoChange(*t) for t in d["tempos"]),
        time_signatures=tuple(TimeSignature(*s) for s in d["time_signatures"]),
        end_tick=d.get("end_tick", 0),
    )
    if "measures" in d:
        return QuantizedSong(**kw, measures=MeasureMap(tuple(tuple(b) for b in d["measures"])))
    return Song(**kw)

"""Per-file normalization and shifted-duplicate track removal."""
from __future__ import annotations

import logging
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, replace
from fractions import Fraction
from importlib import resources
from typing import Mapping

from .midi_model import (
    DRUMS, GRID_TPQ, Note, QuantizedSong, Song, TimeSignature, Track,
    compute_measures, measure_ticks, quantize, signature_for_length,
)

log = logging.getLogger(__name__)

DEFAULT_OVERLAP_THRESHOLD = 0.9
DEFAULT_MAX_SHIFT = 2 * GRID_TPQ  # a half note on the 24-tick grid
MAX_MEASURE_QUARTERS = 8
MAX_DURATION = 192


class EmptySongError(ValueError):
    """Raised when preprocessing leaves a song with no notes."""


@dataclass(frozen=True)
class DrumSimplificationMap:
    mapping: Mapping[int, int]

    def __post_init__(self):
        full = {p: p for p in range(128)}
        full.update({int(k): int(v) for k, v in self.mapping.items()})
        for k, v in full.items():
            if not (0 <= k <= 127 and 0 <= v <= 127):
                raise ValueError(f"drum map entry out of range: {k}={v}")
            if full[v] != v:
                raise ValueError(f"drum map is not idempotent: {k}->{v}->{full[v]}")
        object.__setattr__(self, "mapping", full)

    def __call__(self, pitch: int) -> int:
        return self.mapping[pitch]

    @classmethod
    def parse(cls, text: str) -> "DrumSimplificationMap":
        pairs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad drum map line: {raw!r}")
            pairs[int(key)] = int(value)
        return cls(pairs)

    @classmethod
    def load(cls, path) -> "DrumSimplificationMap":
        with open(path) as fh:
            return cls.parse(fh.read())

    @classmethod
    def default(cls) -> "DrumSimplificationMap":
        return cls.parse(resources.files("midifill.data").joinpath("drum_map.txt").read_text())


# --------------------------------------------------------------------------- track layout


def split_tracks_by_instrument(song: Song) -> Song:
    """One instrument per track; tracks sorted by instrument with drums last."""
    rows = []
    for idx, tr in enumerate(song.tracks):
        groups: dict[int, list[Note]] = defaultdict(list)
        if tr.is_drum or not tr.programs:
            groups[tr.instrument] = list(tr.notes)
        else:
            ticks = [t for t, _ in tr.programs]
            for n in tr.notes:
                i = bisect_right(ticks, n.onset) - 1
                groups[tr.programs[i][1] if i >= 0 else tr.instrument].append(n)
        for instrument, notes in groups.items():
            rows.append((instrument, idx, replace(tr, instrument=instrument, notes=tuple(notes), programs=())))
    rows.sort(key=lambda r: (r[0], r[1]))
    return replace(song, tracks=tuple(r[2] for r in rows))


def consolidate_drums(song: Song, drum_map: DrumSimplificationMap | None = None) -> Song:
    """Merge every drum track into one final track, simplifying drum pitches.

    Hits that land on the same (onset, pitch) after mapping collapse to the
    loudest one.
    """
    drum_map = drum_map or DrumSimplificationMap.default()
    drums = [t for t in song.tracks if t.is_drum]
    if not drums:
        return song
    hits: dict[tuple[int, int], Note] = {}
    for tr in drums:
        for n in tr.notes:
            n = replace(n, pitch=drum_map(n.pitch))
            key = (n.onset, n.pitch)
            if key not in hits or n.velocity > hits[key].velocity:
                hits[key] = n
    name = drums[0].name if len(drums) == 1 else "Drums"
    merged = Track(DRUMS, tuple(hits.values()), name)
    return replace(song, tracks=tuple(t for t in song.tracks if not t.is_drum) + (merged,))


def _pedal_spans(pedal, song_end: int) -> list[tuple[int, int]]:
    spans, down = [], None
    for tick, on in pedal:
        if on and down is None:
            down = tick
        elif not on and down is not None:
            spans.append((down, tick))
            down = None
    if down is not None:
        spans.append((down, max(song_end, down)))
    return spans


def apply_sustain_pedal(song: Song) -> Song:
    """Extend notes released under a held sustain pedal, then drop all cc data.

    A note whose end falls strictly inside a pedal-down span is held until
    pedal release, or until the next onset of the same pitch if that comes
    first.
    """
    end = song.last_tick
    tracks = []
    for tr in song.tracks:
        spans = _pedal_spans(tr.pedal, end)
        notes = tr.notes
        if spans and not tr.is_drum:
            starts = [a for a, _ in spans]
            onsets = defaultdict(list)
            for n in notes:
                onsets[n.pitch].append(n.onset)
            out = []
            for n in notes:
                i = bisect_right(starts, n.end - 1) - 1
                if i >= 0 and spans[i][0] < n.end < spans[i][1]:
                    new_end = spans[i][1]
                    later = onsets[n.pitch]
                    j = bisect_right(later, n.onset)
                    if j < len(later):
                        new_end = min(new_end, later[j])
                    if new_end > n.end:
                        n = replace(n, duration=new_end - n.onset)
                out.append(n)
            notes = tuple(out)
        tracks.append(replace(tr, notes=notes, pedal=(), controls=()))
    return replace(song, tracks=tuple(tracks))


# --------------------------------------------------------------------------- overlap


class IntervalSet:
    """Per-pitch unions of closed tick intervals for one track."""

    def __init__(self, intervals: Mapping[int, list[tuple[float, float]]]):
        self.by_pitch: dict[int, list[tuple[float, float]]] = {}
        for pitch, ivs in intervals.items():
            merged: list[list[float]] = []
            for s, e in sorted(ivs):
                if merged and s <= merged[-1][1]:
                    merged[-1][1] = max(merged[-1][1], e)
                else:
                    merged.append([s, e])
            if merged:
                self.by_pitch[pitch] = [(s, e) for s, e in merged]
        self.total_length = sum(e - s for ivs in self.by_pitch.values() for s, e in ivs)

    @classmethod
    def from_track(cls, track: Track, scale=1) -> "IntervalSet":
        ivs = defaultdict(list)
        for n in track.notes:
            if scale == 1:
                ivs[n.pitch].append((n.onset, n.end))
            else:
                ivs[n.pitch].append((round(n.onset * scale), round(n.end * scale)))
        return cls(ivs)

    def intersection_length(self, other: "IntervalSet", shift: float = 0) -> float:
        """Total per-pitch intersection with ``other`` shifted by ``shift`` ticks."""
        total = 0
        for pitch, mine in self.by_pitch.items():
            theirs = other.by_pitch.get(pitch)
            if not theirs:
                continue
            i = j = 0
            while i < len(mine) and j < len(theirs):
                a0, a1 = mine[i]
                b0, b1 = theirs[j][0] + shift, theirs[j][1] + shift
                lo, hi = max(a0, b0), min(a1, b1)
                if hi > lo:
                    total += hi - lo
                if a1 < b1:
                    i += 1
                else:
                    j += 1
        return total


def overlap_measure(t1, t2, shift: float = 0) -> float:
    """Share of the larger track's note time covered by the other track.

    Accepts Tracks or IntervalSets; ``shift`` moves ``t2`` in time. Two empty
    tracks score 0.
    """
    a = t1 if isinstance(t1, IntervalSet) else IntervalSet.from_track(t1)
    b = t2 if isinstance(t2, IntervalSet) else IntervalSet.from_track(t2)
    denom = max(a.total_length, b.total_length)
    if denom == 0:
        return 0.0
    return a.intersection_length(b, shift) / denom


def remove_shifted_duplicates(song: Song, threshold: float = DEFAULT_OVERLAP_THRESHOLD,
                              max_shift: int = DEFAULT_MAX_SHIFT) -> Song:
    """Drop tracks that (nearly) duplicate an earlier same-instrument track.

    Tracks are compared on the 24-tick grid. A later track goes if some
    integer shift within ``max_shift`` grid ticks brings its overlap with an
    earlier kept track of the same instrument to ``threshold`` or more.
    """
    scale = Fraction(GRID_TPQ, song.resolution)
    sets = [IntervalSet.from_track(t, scale) for t in song.tracks]
    kept: list[int] = []
    for i, tr in enumerate(song.tracks):
        dup = False
        for j in kept:
            if song.tracks[j].instrument != tr.instrument:
                continue
            a, b = sets[j].total_length, sets[i].total_length
            big = max(a, b)
            if big == 0 or min(a, b) < threshold * big:
                continue
            for s in range(-max_shift, max_shift + 1):
                if sets[j].intersection_length(sets[i], s) >= threshold * big:
                    dup = True
                    log.debug("track %d duplicates track %d at shift %d", i, j, s)
                    break
            if dup:
                break
        if not dup:
            kept.append(i)
    if len(kept) == len(song.tracks):
        return song
    return replace(song, tracks=tuple(song.tracks[i] for i in kept))


# --------------------------------------------------------------------------- measures


def enforce_max_measure_length(song: Song, max_quarters: int = MAX_MEASURE_QUARTERS) -> Song:
    """Split measures longer than ``max_quarters`` by rewriting time signatures.

    Long measures become full ``max_quarters`` chunks followed by the
    remainder. Note ticks are untouched.
    """
    measures = compute_measures(song)
    limit = max_quarters * song.resolution
    if not measures.too_long(song.resolution, max_quarters):
        return song
    sig_ticks = [s.tick for s in song.time_signatures]
    sigs: list[TimeSignature] = []
    for start, length in measures:
        sig = song.time_signatures[bisect_right(sig_ticks, start) - 1]
        nominal = measure_ticks(sig, song.resolution)
        pieces = [length] if length <= limit else [limit] * (length // limit) + (
            [length % limit] if length % limit else [])
        t = start
        for piece in pieces:
            nd = (sig.numerator, sig.denominator) if piece == nominal else signature_for_length(piece, song.resolution)
            if not sigs or (sigs[-1].numerator, sigs[-1].denominator) != nd or t == 0:
                sigs.append(TimeSignature(t, *nd))
            t += piece
    return replace(song, time_signatures=tuple(sigs))


# --------------------------------------------------------------------------- pipeline


def clip_durations(song: Song, max_duration: int = MAX_DURATION) -> Song:
    tracks = tuple(
        replace(t, notes=tuple(replace(n, duration=min(n.duration, max_duration)) for n in t.notes))
        for t in song.tracks
    )
    return replace(song, tracks=tracks)


def preprocess_file(song: Song, drum_map: DrumSimplificationMap | None = None,
                    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
                    max_shift: int = DEFAULT_MAX_SHIFT) -> QuantizedSong:
    s = split_tracks_by_instrument(song)
    s = consolidate_drums(s, drum_map)
    s = apply_sustain_pedal(s)
    s = remove_shifted_duplicates(s, overlap_threshold, max_shift)
    s = enforce_max_measure_length(s)
    q = quantize(s, GRID_TPQ, (3, 4))
    q = clip_durations(q)
    tracks = tuple(t for t in q.tracks if t.notes)
    if not tracks:
        raise EmptySongError("no notes left after preprocessing")
    return QuantizedSong(resolution=q.resolution, tracks=tracks, tempos=q.tempos,
                         time_signatures=q.time_signatures, end_tick=q.end_tick)

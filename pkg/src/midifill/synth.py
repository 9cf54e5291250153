"""Seeded synthetic songs for tests, scripts and smoke runs.

Everything here is deterministic given the numpy Generator passed in.
"""
from __future__ import annotations

import numpy as np

from .midi_model import DRUMS, GRID_TPQ, Note, QuantizedSong, Song, TempoChange, TimeSignature, Track

# meters whose measure fits the 192-tick L range at 24 tpq
METERS = ((4, 4), (3, 4), (2, 4), (6, 8), (5, 4), (7, 8), (12, 8))
DRUM_PITCHES = (36, 38, 42, 46, 49, 51)


def grid_positions(length: int) -> list[int]:
    """Offsets inside a measure that are multiples of 3 or 4."""
    return [p for p in range(length) if p % 3 == 0 or p % 4 == 0]


def _track_notes(rng, start: int, length: int, style: str, drums: bool, low: int, high: int,
                 max_dur: int = 96) -> list[Note]:
    pos = grid_positions(length)
    notes = []
    if style == "empty":
        return notes
    k = int(rng.integers(1, min(len(pos), 8) + 1))
    onsets = sorted(rng.choice(pos, size=k, replace=False).tolist())
    for on in onsets:
        chord = 1 if style == "mono" else int(rng.integers(1, 4))
        pitches = rng.choice(DRUM_PITCHES if drums else np.arange(low, high + 1), size=chord, replace=False)
        dur = int(rng.integers(0 if drums else 1, max_dur + 1))
        for p in pitches:
            notes.append(Note(start + on, dur, int(p), int(rng.integers(20, 127))))
    return notes


def random_quantized_song(rng, max_tracks: int = 16, max_measures: int = 32,
                          meters=METERS) -> QuantizedSong:
    """Random on-grid song at 24 tpq: mixed mono, poly and drum tracks, mixed meters."""
    n_tracks = int(rng.integers(1, max_tracks + 1))
    n_measures = int(rng.integers(1, max_measures + 1))
    sigs, cursor, bounds = [], 0, []
    for m in range(n_measures):
        if m == 0 or rng.random() < 0.1:
            num, den = meters[int(rng.integers(len(meters)))]
            if not sigs or (sigs[-1].numerator, sigs[-1].denominator) != (num, den):
                sigs.append(TimeSignature(cursor, num, den))
        length = sigs[-1].numerator * GRID_TPQ * 4 // sigs[-1].denominator
        bounds.append((cursor, length))
        cursor += length
    pool = [0, 0, 24, 33, 40, 56, 73, DRUMS]  # repeats force several same-instrument tracks
    tracks = []
    for _ in range(n_tracks):
        instrument = int(pool[int(rng.integers(len(pool)))]) if rng.random() < 0.7 else int(rng.integers(0, 128))
        drums = instrument == DRUMS
        style = "drum" if drums else ("mono" if rng.random() < 0.5 else "poly")
        low = int(rng.integers(21, 90))
        notes = []
        for start, length in bounds:
            if rng.random() < 0.8:
                notes += _track_notes(rng, start, length, style, drums, low, min(127, low + 24), 192)
        tracks.append(Track(instrument, tuple(notes)))
    tempos = [TempoChange(0, float(rng.integers(40, 200)))]
    return QuantizedSong(resolution=GRID_TPQ, tracks=tuple(tracks), tempos=tuple(tempos),
                         time_signatures=tuple(sigs), end_tick=cursor)


def random_song(rng, resolution: int = 480, n_tracks: int | None = None, n_measures: int | None = None,
                drums: bool = True) -> Song:
    """Raw-looking 4/4 song at ``resolution`` whose onsets sit on 8th/16th/triplet positions."""
    n_tracks = n_tracks or int(rng.integers(1, 5))
    n_measures = n_measures or int(rng.integers(4, 17))
    measure = 4 * resolution
    tracks = []
    programs = rng.choice([0, 24, 33, 40, 56, 73, 80], size=n_tracks)
    for k in range(n_tracks):
        style = "mono" if k % 2 else "poly"
        low = int(rng.integers(36, 72))
        notes = []
        for m in range(n_measures):
            for n in _track_notes(rng, m * 96, 96, style, False, low, low + 19):
                scale = resolution // GRID_TPQ if resolution % GRID_TPQ == 0 else None
                on = n.onset * scale if scale else n.onset * resolution // GRID_TPQ
                dur = max(1, n.duration * resolution // GRID_TPQ)
                notes.append(Note(on, dur, n.pitch, n.velocity))
        tracks.append(Track(int(programs[k]), tuple(notes)))
    if drums:
        notes = []
        for m in range(n_measures):
            for beat in range(8):
                on = m * measure + beat * resolution // 2
                notes.append(Note(on, resolution // 4, 42, 80))
                if beat % 4 == 0:
                    notes.append(Note(on, resolution // 4, 36, 100))
                if beat % 4 == 2:
                    notes.append(Note(on, resolution // 4, 38, 96))
        tracks.append(Track(DRUMS, tuple(notes)))
    bpm = float(rng.integers(60, 180))
    return Song(resolution=resolution, tracks=tuple(tracks), tempos=(TempoChange(0, bpm),),
                end_tick=n_measures * measure)


def repetitive_song(rng, n_measures: int = 8, n_tracks: int = 3, resolution: int = GRID_TPQ) -> Song:
    """Every track repeats one measure-long pattern; copying any measure reproduces any other."""
    scale = resolution // GRID_TPQ
    tracks = []
    for k in range(n_tracks):
        drums = k == n_tracks - 1
        pattern = _track_notes(rng, 0, 96, "drum" if drums else ("mono" if k % 2 else "poly"),
                               drums, 48 + 7 * k, 67 + 7 * k, 24)
        # durations stop at the barline so no trailing empty measure appears
        notes = [Note((m * 96 + n.onset) * scale, max(0 if drums else 1, min(n.duration, 96 - n.onset) * scale),
                      n.pitch, 90)
                 for m in range(n_measures) for n in pattern]
        tracks.append(Track(DRUMS if drums else [0, 33, 40, 73][k % 4], tuple(notes)))
    return Song(resolution=resolution, tracks=tuple(tracks), tempos=(TempoChange(0, 120.0),),
                end_tick=n_measures * 96 * scale)


def transposed(song: Song, semitones: int) -> Song:
    """Pitch-shift every pitched note (drums untouched)."""
    tracks = tuple(
        t if t.is_drum else Track(t.instrument, tuple(Note(n.onset, n.duration, n.pitch + semitones, n.velocity)
                                                      for n in t.notes), t.name)
        for t in song.tracks
    )
    return Song(song.resolution, tracks, song.tempos, song.time_signatures, song.end_tick)


def rescaled(song: Song, factor: int) -> Song:
    """Same music at ``factor`` times the resolution."""
    def sc(t):
        return t * factor
    tracks = tuple(Track(t.instrument, tuple(Note(sc(n.onset), sc(n.duration), n.pitch, n.velocity)
                                             for n in t.notes), t.name) for t in song.tracks)
    return Song(song.resolution * factor, tracks, tuple((sc(a), b) for a, b in song.tempos),
                tuple(TimeSignature(sc(s.tick), s.numerator, s.denominator) for s in song.time_signatures),
                sc(song.end_tick))


def padded(song: Song, n_measures: int) -> Song:
    """Prepend ``n_measures`` empty 4/4 measures (the song must be 4/4 throughout)."""
    shift = n_measures * 4 * song.resolution
    tracks = tuple(Track(t.instrument, tuple(Note(n.onset + shift, n.duration, n.pitch, n.velocity)
                                             for n in t.notes), t.name) for t in song.tracks)
    tempos = ((0, song.tempos[0].bpm),) + tuple((a + shift, b) for a, b in song.tempos[1:])
    return Song(song.resolution, tracks, tempos, (), song.end_tick + shift)


def golden_measure_song() -> QuantizedSong:
    """One 4/4 measure: piano melody, piano bass chord, flute descent; velocity 88 at 150 BPM."""
    v = 88
    hi = Track(0, (Note(48, 24, 67, v),))
    lo = Track(0, (Note(0, 48, 36, v), Note(0, 48, 43, v), Note(0, 48, 48, v)))
    flute = Track(73, (Note(12, 12, 84, v), Note(24, 12, 81, v), Note(36, 12, 79, v)))
    return QuantizedSong(resolution=GRID_TPQ, tracks=(hi, lo, flute), tempos=(TempoChange(0, 150.0),),
                         end_tick=96)


GOLDEN_TOKENS = ("M:5 B:6 L:96 I:0 w:48 d:24 N:67 I:0 R:1 d:48 N:36 N:43 N:48 "
                  "I:73 w:12 d:12 N:84 w:12 N:81 w:12 N:79")


def uniform_residue_song(resolution: int = 12, n: int = 120) -> Song:
    """Onsets cycling through every residue mod 12: the grid filter's worst case."""
    notes = tuple(Note(i * 13 * resolution // 12, 1, 60) for i in range(n))
    return Song(resolution=resolution, tracks=(Track(0, notes),))


def pulse_song(step_ticks: int, resolution: int = 480, n: int = 64) -> Song:
    notes = tuple(Note(i * step_ticks, step_ticks, 60 + (i % 5)) for i in range(n))
    return Song(resolution=resolution, tracks=(Track(0, notes),))

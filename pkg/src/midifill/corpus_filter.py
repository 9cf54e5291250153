"""Corpus-level filtering: off-grid file removal and chromagram deduplication."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .midi_model import Song, quantize

DEFAULT_GRID_THRESHOLD = 0.8
FILTER_TPQ = 12


def grid_histogram(song: Song) -> list[int]:
    """Onset counts by residue (0..11) after a quarter note on a 12-tick grid.

    Onsets are rounded to the nearest 12-tpq tick, not snapped to 16ths or
    triplets, so the raw residue spread survives.
    """
    counts = [0] * FILTER_TPQ
    res = song.resolution
    for tr in song.tracks:
        for n in tr.notes:
            # round half up in exact integer arithmetic
            tick = (2 * n.onset * FILTER_TPQ + res) // (2 * res)
            counts[tick % FILTER_TPQ] += 1
    return counts


def grid_alignment_score(song: Song) -> float | None:
    """Cosine between the residue histogram and the all-ones vector.

    Returns None for a song with no notes.
    """
    v = grid_histogram(song)
    norm = math.sqrt(sum(c * c for c in v))
    if norm == 0:
        return None
    return sum(v) / (norm * math.sqrt(len(v)))


def is_off_grid(score: float | None, threshold: float = DEFAULT_GRID_THRESHOLD) -> bool:
    return score is None or score > threshold


def filter_corpus(files: Sequence[Song], threshold: float = DEFAULT_GRID_THRESHOLD):
    """Split ``files`` into (kept, removed), preserving input order."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    kept, removed = [], []
    for song in files:
        (removed if is_off_grid(grid_alignment_score(song), threshold) else kept).append(song)
    return kept, removed


# --------------------------------------------------------------------------- fingerprints

EMPTY_HASH = hashlib.sha256(b"midifill:empty-fingerprint").hexdigest()


@dataclass(frozen=True)
class Fingerprint:
    """The 12 transposed onset chromagrams, canonically ordered."""

    chromagrams: tuple[frozenset[tuple[int, int]], ...]
    canonical_hash: str

    @property
    def is_empty(self) -> bool:
        return self.canonical_hash == EMPTY_HASH

    def __eq__(self, other):
        return isinstance(other, Fingerprint) and self.canonical_hash == other.canonical_hash

    def __hash__(self):
        return hash(self.canonical_hash)


def _normalized_onsets(song: Song) -> list[tuple[int, int]]:
    """(tick, pitch) onsets of non-drum notes after grid snap and empty-measure folding."""
    pitched = Song(resolution=song.resolution,
                   tracks=tuple(t for t in song.tracks if not t.is_drum),
                   tempos=song.tempos, time_signatures=song.time_signatures,
                   end_tick=song.end_tick)
    q = quantize(pitched, FILTER_TPQ, (3, 4))
    measures = q.measures
    by_measure: dict[int, list[tuple[int, int]]] = {}
    for tr in q.tracks:
        for n in tr.notes:
            i = measures.index_of(n.onset)
            by_measure.setdefault(i, []).append((n.onset - measures[i][0], n.pitch))
    if not by_measure:
        return []

    out = []
    cursor = 0
    prev_empty = False
    for i in range(min(by_measure), max(by_measure) + 1):
        _, length = measures[i]
        notes = by_measure.get(i)
        if notes is None:
            if prev_empty:
                continue
            prev_empty = True
        else:
            prev_empty = False
            out.extend((cursor + off, p) for off, p in notes)
        cursor += length
    return out


def _serialize(gram: frozenset) -> str:
    return json.dumps(sorted(gram), separators=(",", ":"))


def onset_chromagram_fingerprint(song: Song) -> Fingerprint:
    """Transposition-invariant set of 12 binary (tick, pitch class) onset chromagrams."""
    onsets = _normalized_onsets(song)
    if not onsets:
        return Fingerprint((), EMPTY_HASH)
    base = {(t, p % 12) for t, p in onsets}
    grams = [frozenset((t, (pc + k) % 12) for t, pc in base) for k in range(12)]
    rows = sorted((_serialize(g), g) for g in grams)
    digest = hashlib.sha256("\n".join(r for r, _ in rows).encode()).hexdigest()
    return Fingerprint(tuple(g for _, g in rows), digest)


def dedupe(files: Iterable[tuple[Hashable, Fingerprint]]):
    """Keep the first id seen for each canonical hash.

    Returns ``(survivors, duplicate_of)`` where ``duplicate_of`` maps every
    removed id to the surviving id it duplicates.
    """
    first: dict[str, Hashable] = {}
    survivors, duplicate_of = [], {}
    for key, fp in files:
        h = fp.canonical_hash
        if h in first:
            duplicate_of[key] = first[h]
        else:
            first[h] = key
            survivors.append(key)
    return survivors, duplicate_of


"""Pretraining (span corruption) and finetuning (track-measure mask) examples."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .midi_model import QuantizedSong
from .tokens import (
    LevelThresholds, MeasureTokens, Token, classify_polyphony, encode_measures, parse_text,
    split_measures, to_text,
)

log = logging.getLogger(__name__)

SHORT_LIMIT = 512
LONG_LIMIT = 1650
MAX_MASKS = 256
PATTERN_WEIGHTS = (4, 6, 1, 1, 1, 1, 4)
TRANSPOSE_RANGE = (-5, 6)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` split by integer ``keys`` (e.g. song index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


@dataclass
class InfillExample:
    input: list[Token]
    target: list[Token]
    coords: list[tuple[int, int]]
    meta: dict = field(default_factory=dict)
    id: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "input": to_text(self.input),
            "target": to_text(self.target),
            "coords": [list(c) for c in self.coords],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InfillExample":
        return cls(parse_text(d["input"]), parse_text(d["target"]),
                   [tuple(c) for c in d.get("coords", [])], d.get("meta", {}), d.get("id", ""))

    @property
    def n_masks(self) -> int:
        return sum(t.kind == "MASK" for t in self.input)


def write_jsonl(records: Iterable[dict], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- augmentation


def _shift_pitch(pitch: int, semitones: int) -> int:
    p = pitch + semitones
    while p < 0:
        p += 12
    while p > 127:
        p -= 12
    return p


def transpose(song: QuantizedSong, semitones: int) -> QuantizedSong:
    """Shift every pitched note; notes pushed out of MIDI range move back by octaves."""
    if semitones == 0:
        return song
    tracks = tuple(
        tr if tr.is_drum else replace(
            tr, notes=tuple(replace(n, pitch=_shift_pitch(n.pitch, semitones)) for n in tr.notes))
        for tr in song.tracks
    )
    return replace(song, tracks=tracks)


def random_transposition(rng: np.random.Generator, bounds=TRANSPOSE_RANGE) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


# --------------------------------------------------------------------------- chunking


class ChunkError(ValueError):
    pass


def pack_measures(lengths: Sequence[int], limit: int) -> list[tuple[int, int]]:
    """Greedy left-to-right packing of measure token counts into ranges of at most ``limit``."""
    out = []
    start, total = 0, 0
    for i, n in enumerate(lengths):
        if n > limit:
            raise ChunkError(f"measure {i} has {n} tokens, more than the limit of {limit}")
        if total + n > limit:
            out.append((start, i))
            start, total = i, 0
        total += n
    if start < len(lengths):
        out.append((start, len(lengths)))
    return out


def chunk(tokens: Sequence[Token], limit: int) -> list[list[Token]]:
    """Split a song's tokens at measure boundaries into chunks of at most ``limit`` tokens."""
    spans = split_measures(tokens)
    packed = pack_measures([b - a for a, b in spans], limit)
    return [list(tokens[spans[a][0]:spans[b - 1][1]]) for a, b in packed]


# --------------------------------------------------------------------------- span corruption


def _random_segmentation(n_items: int, n_segments: int, rng) -> np.ndarray:
    first = np.zeros(n_items - 1, dtype=int)
    first[:n_segments - 1] = 1
    rng.shuffle(first)
    segment_id = np.concatenate([[0], np.cumsum(first)])
    return np.bincount(segment_id, minlength=n_segments)


def noise_span_lengths(length: int, noise_density: float, mean_span: float, rng):
    """(non-noise lengths, noise lengths) for alternating spans, non-noise first."""
    n_noise = min(max(int(round(length * noise_density)), 1), length - 1)
    n_spans = max(int(round(n_noise / mean_span)), 1)
    n_spans = min(n_spans, n_noise, length - n_noise)
    return (_random_segmentation(length - n_noise, n_spans, rng),
            _random_segmentation(n_noise, n_spans, rng))


def span_corrupt(tokens: Sequence[Token], rng, noise_density: float = 0.15,
                 mean_span: float = 3.0) -> tuple[list[Token], list[Token]]:
    keep, drop = noise_span_lengths(len(tokens), noise_density, mean_span, rng)
    inp, tgt = [], []
    pos = 0
    for k, (a, b) in enumerate(zip(keep, drop)):
        inp += tokens[pos:pos + a]
        pos += a
        sentinel = Token("MASK", k)
        inp.append(sentinel)
        tgt.append(sentinel)
        tgt += tokens[pos:pos + b]
        pos += b
    return inp, tgt


MIN_CORRUPTIBLE = 7


def build_pretrain_examples(song: QuantizedSong, thresholds: LevelThresholds, limit: int,
                            rng: np.random.Generator, noise_density: float = 0.15,
                            mean_span: float = 3.0, transpose_range=TRANSPOSE_RANGE,
                            source: str = "") -> list[InfillExample]:
    """Transpose, encode, chunk at measure boundaries, then span-corrupt each chunk.

    Corruption only shortens a chunk, so every input stays within ``limit``.
    """
    shift = random_transposition(rng, transpose_range) if transpose_range else 0
    measures = encode_measures(transpose(song, shift), thresholds)
    flat = [t for m in measures for t in m.tokens()]
    out = []
    if noise_density <= 0:
        log.info("%s: corruption rate is zero, nothing to predict; skipped", source or "song")
        return out
    for ci, piece in enumerate(chunk(flat, limit)):
        if len(piece) < MIN_CORRUPTIBLE:
            log.info("%s: chunk %d has %d tokens, too short to corrupt; skipped", source or "song", ci, len(piece))
            continue
        inp, tgt = span_corrupt(piece, rng, noise_density, mean_span)
        out.append(InfillExample(inp, tgt, [], {"source": source, "transposition": shift, "chunk": ci,
                                                "objective": "span_corruption"}))
    return out


# --------------------------------------------------------------------------- finetuning masks


@dataclass(frozen=True)
class MaskPattern:
    pattern_id: int
    masked: frozenset[tuple[int, int]]


@dataclass
class FinetuneConfig:
    input_limit: int = LONG_LIMIT
    target_limit: int = LONG_LIMIT
    max_masks: int = MAX_MASKS
    polyphony_prob: float = 0.75
    truncate_prob: float = 0.15
    transpose_range: tuple[int, int] | None = TRANSPOSE_RANGE
    pattern_weights: tuple[int, ...] = PATTERN_WEIGHTS
    most_tracks_low: float = 0.6
    max_slice_measures: int | None = None
    max_resamples: int = 50


def _coin_tracks(n_tracks: int, rng) -> list[int]:
    while True:
        chosen = [t for t in range(n_tracks) if rng.random() < 0.5]
        if chosen:
            return chosen


def _most_tracks(n_tracks: int, rng, low: float) -> list[int]:
    k = math.ceil(n_tracks * rng.uniform(low, 1.0))
    k = min(max(k, 1), n_tracks)
    return sorted(int(t) for t in rng.choice(n_tracks, size=k, replace=False))


def _measure_run(n_measures: int, rng) -> range:
    length = min(int(rng.integers(2, 5)), n_measures)
    start = int(rng.integers(0, n_measures - length + 1))
    return range(start, start + length)


def sample_finetune_mask(n_tracks: int, n_measures: int, rng,
                         cfg: FinetuneConfig | None = None) -> MaskPattern:
    """Draw one of the seven finetuning mask patterns over an n_tracks x n_measures slice."""
    if n_tracks < 1 or n_measures < 1:
        raise ValueError("slice must have at least one track and one measure")
    cfg = cfg or FinetuneConfig()
    w = np.asarray(cfg.pattern_weights, dtype=float)
    pid = int(rng.choice(len(w), p=w / w.sum()))
    all_tracks = range(n_tracks)
    while True:
        if pid == 0:
            coords = {(t, m) for t in all_tracks for m in range(n_measures) if rng.random() < 0.5}
        elif pid == 1:
            coords = {(t, m) for t in _coin_tracks(n_tracks, rng) for m in range(n_measures)}
        elif pid == 2:
            m = int(rng.integers(n_measures))
            coords = {(t, m) for t in all_tracks}
        elif pid == 3:
            m = int(rng.integers(n_measures))
            coords = {(t, m) for t in _most_tracks(n_tracks, rng, cfg.most_tracks_low)}
        elif pid == 4:
            run = _measure_run(n_measures, rng)
            coords = {(t, m) for t in all_tracks for m in run}
        elif pid == 5:
            run = _measure_run(n_measures, rng)
            coords = {(t, m) for t in _most_tracks(n_tracks, rng, cfg.most_tracks_low) for m in run}
        else:
            coords = set()
            for t in _coin_tracks(n_tracks, rng):
                for _ in range(int(rng.integers(1, 3))):
                    length = int(rng.integers(1, n_measures + 1))
                    start = int(rng.integers(0, n_measures - length + 1))
                    coords.update((t, m) for m in range(start, start + length))
        if coords:
            return MaskPattern(pid, frozenset(coords))


def assemble(measures: Sequence[MeasureTokens], masked: set[tuple[int, int]],
             hints: bool) -> tuple[list[Token], list[Token], list[tuple[int, int]]]:
    """Replace masked, note-bearing track-measures by sentinels.

    ``masked`` holds (track index, slice measure index) pairs. Returns
    (input, target, coords) with coords in sentinel order.
    """
    inp, tgt, coords = [], [], []
    for mi, mt in enumerate(measures):
        inp += mt.header
        for part in mt.parts:
            inp += part.head
            if (part.track, mi) in masked:
                sentinel = Token("MASK", len(coords))
                inp.append(sentinel)
                if hints:
                    inp.append(classify_polyphony(part.notes))
                tgt.append(sentinel)
                tgt += part.body
                coords.append((part.track, mi))
            else:
                inp += part.body
    return inp, tgt, coords


def splice(inp: Sequence[Token], tgt: Sequence[Token]) -> list[Token]:
    """Put target spans back at their sentinels and drop mono/poly hints."""
    spans: dict[int, list[Token]] = {}
    current = None
    for t in tgt:
        if t.kind == "MASK":
            current = spans.setdefault(t.value, [])
        elif current is not None:
            current.append(t)
    out = []
    for t in inp:
        if t.kind == "MASK":
            out += spans.get(t.value, [])
        elif t.kind not in ("MONO", "POLY"):
            out.append(t)
    return out


def _fit(measures, masked, hints, cfg: FinetuneConfig):
    """Assemble, dropping trailing measures until every limit holds."""
    n = len(measures)
    while n > 0:
        inp, tgt, coords = assemble(measures[:n], masked, hints)
        if len(inp) <= cfg.input_limit and len(tgt) <= cfg.target_limit and len(coords) <= cfg.max_masks:
            return n, inp, tgt, coords
        n -= 1
    return 0, None, None, None


def build_finetune_example(song: QuantizedSong, measure_slice: tuple[int, int], rng,
                           thresholds: LevelThresholds, mask: MaskPattern | None = None,
                           cfg: FinetuneConfig | None = None, source: str = "") -> InfillExample | None:
    """One infilling example from ``song[measure_slice]``.

    Order: optional truncation, random transposition, mask sampling over the
    final slice (``mask`` coordinates are song track indices), assembly, and
    shrinking to the token limits. Returns None if no note-bearing
    track-measure can be masked or a single measure breaks the limits.
    """
    cfg = cfg or FinetuneConfig()
    start, stop = measure_slice
    if not 0 <= start < stop <= len(song.measures):
        raise ValueError(f"slice {measure_slice} outside a {len(song.measures)}-measure song")
    truncated = False
    if rng.random() < cfg.truncate_prob and stop - start > 1:
        stop = start + int(rng.integers(1, stop - start))
        truncated = True
    shift = random_transposition(rng, cfg.transpose_range) if cfg.transpose_range else 0
    measures = encode_measures(transpose(song, shift), thresholds, start, stop)
    # masking never lengthens the input (sentinel + hint <= d + N), so fit the plain slice first
    total, keep = 0, 0
    for mt in measures:
        if total + len(mt) > cfg.input_limit:
            break
        total += len(mt)
        keep += 1
    measures = measures[:max(keep, 1)]
    hints = bool(rng.random() < cfg.polyphony_prob)

    bearing = {(p.track, mi) for mi, mt in enumerate(measures) for p in mt.parts}
    if not bearing:
        return None
    present = sorted({t for t, _ in bearing})
    pattern_id = mask.pattern_id if mask is not None else None
    masked: set = set()
    for attempt in range(cfg.max_resamples):
        if mask is not None and attempt == 0:
            masked = set(mask.masked) & bearing
        else:
            pat = sample_finetune_mask(len(present), len(measures), rng, cfg)
            pattern_id = pat.pattern_id
            masked = {(present[t], m) for t, m in pat.masked} & bearing
        if masked:
            break
    if not masked:
        return None

    n, inp, tgt, coords = _fit(measures, masked, hints, cfg)
    if not n or not coords:
        log.info("%s: slice %s cannot meet token limits; rejected", source or "song", measure_slice)
        return None
    meta = {"source": source, "transposition": shift, "slice": [start, start + n],
            "pattern_id": pattern_id, "truncated": truncated, "hints": hints}
    return InfillExample(inp, tgt, coords, meta)


def choose_slice(measure_token_counts: Sequence[int], rng, limit: int,
                 max_measures: int | None = None) -> tuple[int, int]:
    """Random start measure, extended greedily while the unmasked encoding fits ``limit``."""
    n = len(measure_token_counts)
    start = int(rng.integers(0, n))
    stop, total = start, 0
    while stop < n and total + measure_token_counts[stop] <= limit:
        if max_measures is not None and stop - start >= max_measures:
            break
        total += measure_token_counts[stop]
        stop += 1
    return start, max(stop, start + 1)


def build_finetune_dataset(songs: Sequence[tuple[str, QuantizedSong]], thresholds: LevelThresholds,
                           seed: int, examples_per_song: int = 1,
                           cfg: FinetuneConfig | None = None) -> list[InfillExample]:
    """Examples for every song; song ``i`` draws from ``make_rng(seed, i)``."""
    cfg = cfg or FinetuneConfig()
    out = []
    for idx, (source, song) in enumerate(songs):
        rng = make_rng(seed, idx)
        counts = [len(m) for m in encode_measures(song, thresholds)]
        for e in range(examples_per_song):
            sl = choose_slice(counts, rng, cfg.input_limit, cfg.max_slice_measures)
            ex = build_finetune_example(song, sl, rng, thresholds, cfg=cfg, source=source)
            if ex is None:
                continue
            ex.id = f"{source}#{e}"
            ex.meta["seed"] = [seed, idx]
            out.append(ex)
    return out


def build_pretrain_dataset(songs: Sequence[tuple[str, QuantizedSong]], thresholds: LevelThresholds,
                           seed: int, limit: int = SHORT_LIMIT, noise_density: float = 0.15,
                           mean_span: float = 3.0) -> list[InfillExample]:
    out = []
    for idx, (source, song) in enumerate(songs):
        rng = make_rng(seed, idx)
        for ex in build_pretrain_examples(song, thresholds, limit, rng, noise_density, mean_span, source=source):
            ex.id = f"{source}#{ex.meta['chunk']}"
            ex.meta["seed"] = [seed, idx]
            out.append(ex)
    return out

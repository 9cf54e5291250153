"""Infilling test sets, objective metrics, a copy-based baseline, and reporting."""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import InfillExample, LONG_LIMIT, assemble, pack_measures
from .midi_model import DRUMS, Note, QuantizedSong
from .tokens import (
    LevelThresholds, Token, TokenError, decode_part, encode_measures, encode_part, iter_parts,
    parse_text, read_header, split_measures, to_text,
)

log = logging.getLogger(__name__)

KINDS = ("random", "track", "lastbar")
TASK_NAMES = {"random": "random infill", "track": "track infill", "lastbar": "last-bar fill"}
GROOVE_DENOMINATOR = 48
FOUR_FOUR = 96


@dataclass(frozen=True)
class NoteKey:
    track: int
    measure: int
    onset: int
    pitch: int
    drum: bool = field(default=False, compare=False)


def task_name(slice_len: int, kind: str) -> str:
    return f"{slice_len}-bar {TASK_NAMES[kind]}"


# --------------------------------------------------------------------------- test examples


def make_test_example(song: QuantizedSong, slice_len: int, kind: str, rng,
                      thresholds: LevelThresholds, hints: bool = True,
                      require_four_four: bool = True, max_resamples: int = 20,
                      source: str = "") -> InfillExample | None:
    """A masked test slice; the target holds the ground-truth notes.

    Only note-bearing track-measures are masked. Returns None when no valid
    slice/mask turns up within ``max_resamples`` draws.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    lengths = song.measures.lengths
    offsets = [s for s in range(len(lengths) - slice_len + 1)
               if not require_four_four or all(x == FOUR_FOUR for x in lengths[s:s + slice_len])]
    if not offsets:
        return None
    for _ in range(max_resamples):
        start = int(offsets[int(rng.integers(len(offsets)))])
        measures = encode_measures(song, thresholds, start, start + slice_len)
        bearing = {(p.track, mi) for mi, mt in enumerate(measures) for p in mt.parts}
        present = sorted({t for t, _ in bearing})
        if not present:
            continue
        if kind == "random":
            masked = {(t, m) for t in present for m in range(slice_len) if rng.random() < 0.5}
        elif kind == "track":
            count = int(rng.integers(1, max(1, len(present) // 2) + 1))
            chosen = rng.choice(len(present), size=count, replace=False)
            masked = {(present[int(i)], m) for i in chosen for m in range(slice_len)}
        else:
            masked = {(t, slice_len - 1) for t in present}
        masked &= bearing
        if not masked:
            continue
        inp, tgt, coords = assemble(measures, masked, hints)
        meta = {"source": source, "slice": [start, start + slice_len], "kind": kind,
                "task": task_name(slice_len, kind), "hints": hints}
        return InfillExample(inp, tgt, coords, meta)
    return None


def build_testset(songs: Sequence[tuple[str, QuantizedSong]], thresholds: LevelThresholds, seed: int,
                  slice_lens: Sequence[int] = (8, 16), kinds: Sequence[str] = KINDS,
                  hints: bool = True, require_four_four: bool = True) -> list[InfillExample]:
    from .dataset import make_rng

    out = []
    for idx, (source, song) in enumerate(songs):
        rng = make_rng(seed, idx)
        for slice_len in slice_lens:
            for kind in kinds:
                ex = make_test_example(song, slice_len, kind, rng, thresholds, hints,
                                       require_four_four, source=source)
                if ex is None:
                    log.info("%s: no %d-bar %s example", source, slice_len, kind)
                    continue
                ex.id = f"{source}#{slice_len}-{kind}"
                ex.meta["seed"] = [seed, idx]
                out.append(ex)
    return out


# --------------------------------------------------------------------------- prompt structure


@dataclass
class MaskSlot:
    index: int
    measure: int
    measure_length: int
    instrument: int
    rank: int


@dataclass
class PromptMeasure:
    length: int
    parts: list  # (instrument, rank, body tokens or None, mask index or None)


def read_prompt(tokens: Sequence[Token]) -> tuple[list[PromptMeasure], dict[int, MaskSlot]]:
    """Parse a masked input into measures and sentinel slots."""
    measures, slots = [], {}
    for mi, (lo, hi) in enumerate(split_measures(tokens)):
        _, _, length = read_header(tokens, lo)
        parts = []
        for instrument, rank, a, b in iter_parts(tokens, lo + 3, hi):
            body = list(tokens[a:b])
            masks = [t.value for t in body if t.kind == "MASK"]
            if masks:
                k = masks[0]
                slots[k] = MaskSlot(k, mi, length, instrument, rank)
                parts.append((instrument, rank, None, k))
            else:
                parts.append((instrument, rank, body, None))
        measures.append(PromptMeasure(length, parts))
    return measures, slots


def split_spans(tokens: Sequence[Token]) -> dict[int, list[Token]]:
    spans: dict[int, list[Token]] = {}
    current = None
    for t in tokens:
        if t.kind == "MASK":
            current = spans.setdefault(t.value, [])
        elif current is not None:
            current.append(t)
    return spans


def span_notes(example: InfillExample, output: Sequence[Token] | str) -> list[NoteKey]:
    """Notes written into the sentinels of ``example`` by a target-format ``output``.

    Raises TokenError when a span does not decode.
    """
    if isinstance(output, str):
        output = parse_text(output)
    _, slots = read_prompt(example.input)
    spans = split_spans(output)
    notes = []
    for k, slot in sorted(slots.items()):
        track, measure = example.coords[k]
        body = spans.get(k, [])
        drum = slot.instrument == DRUMS
        for on, _, pitch in decode_part(body, slot.measure_length, drum):
            notes.append(NoteKey(track, measure, on, pitch, drum))
    return notes


def truth_notes(example: InfillExample) -> list[NoteKey]:
    return span_notes(example, example.target)


def masked_measures(example: InfillExample) -> dict[int, int]:
    """Slice measure index -> measure length for every measure holding a sentinel."""
    _, slots = read_prompt(example.input)
    return {s.measure: s.measure_length for s in slots.values()}


# --------------------------------------------------------------------------- metrics


def note_f1(generated: Iterable[NoteKey], truth: Iterable[NoteKey]) -> tuple[float, float, float]:
    """(precision, recall, f1) over exact (track, measure, onset, pitch) matches."""
    g, t = set(generated), set(truth)
    if not g and not t:
        return 1.0, 1.0, 1.0
    if not g or not t:
        return 0.0, 0.0, 0.0
    hits = len(g & t)
    p, r = hits / len(g), hits / len(t)
    f1 = 0.0 if hits == 0 else 2 * p * r / (p + r)
    return p, r, f1


def pitch_class_entropy(pitches: Iterable[int]) -> float:
    counts = Counter(p % 12 for p in pitches)
    total = sum(counts.values())
    if total == 0:
        return 0.0
    return -sum(c / total * math.log2(c / total) for c in counts.values())


def pch_entropy_diff(generated: Iterable[NoteKey], truth: Iterable[NoteKey],
                     measures: Iterable[int] | None = None) -> float | None:
    """Mean absolute per-measure pitch-class entropy gap, drums ignored.

    Measures empty on both sides are skipped; None if nothing is left.
    """
    gen, tru = defaultdict(list), defaultdict(list)
    for n in generated:
        if not n.drum:
            gen[n.measure].append(n.pitch)
    for n in truth:
        if not n.drum:
            tru[n.measure].append(n.pitch)
    if measures is None:
        measures = set(gen) | set(tru)
    diffs = [abs(pitch_class_entropy(gen[m]) - pitch_class_entropy(tru[m]))
             for m in sorted(set(measures)) if gen.get(m) or tru.get(m)]
    return float(np.mean(diffs)) if diffs else None


def onset_positions(measure_length: int) -> list[int]:
    """Grid positions (multiples of 3 or 4 ticks) inside a measure; 48 for 4/4."""
    return [x for x in range(measure_length) if x % 3 == 0 or x % 4 == 0]


def _nearest_position(onset: int, positions: Sequence[int]) -> int:
    return min(positions, key=lambda x: (abs(x - onset), x % 3 != 0, x))


def groove_similarity(generated: Iterable[NoteKey], truth: Iterable[NoteKey],
                      measure_lengths: Mapping[int, int]) -> float | None:
    """Mean over ``measure_lengths`` of 1 - hamming(onset vectors) / positions.

    Every track counts, drums included. Off-grid onsets fall on the nearest
    grid position.
    """
    if not measure_lengths:
        return None
    gen, tru = defaultdict(set), defaultdict(set)
    for bucket, notes in ((gen, generated), (tru, truth)):
        for n in notes:
            if n.measure in measure_lengths:
                bucket[n.measure].add(n.onset)
    sims = []
    for m, length in sorted(measure_lengths.items()):
        positions = onset_positions(length)
        if length != FOUR_FOUR:
            log.debug("measure %d is %d ticks; groove uses %d positions", m, length, len(positions))
        g = {_nearest_position(x, positions) for x in gen[m]}
        t = {_nearest_position(x, positions) for x in tru[m]}
        sims.append(1 - len(g ^ t) / len(positions))
    return float(np.mean(sims))


# --------------------------------------------------------------------------- baseline


def _note_tokens(notes: Sequence[Note], drums: bool) -> list[Token]:
    return encode_part(notes, 0, drums)


def baseline_infill(example: InfillExample, context: QuantizedSong | None = None) -> list[Token]:
    """Fill each sentinel by copying the nearest unmasked, note-bearing measure of the same track.

    Ties go to the earlier measure. With no donor in the slice the span gets
    one beat-long note at the track's median visible pitch. Every span
    receives at least one note. ``context`` is unused; everything needed is
    read from the prompt.
    """
    measures, slots = read_prompt(example.input)
    donors: dict[tuple[int, int], dict[int, list[tuple[int, int, int]]]] = defaultdict(dict)
    for mi, pm in enumerate(measures):
        for instrument, rank, body, k in pm.parts:
            if body:
                try:
                    notes = decode_part(body, pm.length, instrument == DRUMS)
                except TokenError:
                    continue
                if notes:
                    donors[(instrument, rank)][mi] = notes

    out: list[Token] = []
    for k in sorted(slots):
        slot = slots[k]
        key = (slot.instrument, slot.rank)
        drums = slot.instrument == DRUMS
        cands = sorted(donors[key], key=lambda mj: (abs(mj - slot.measure), mj))
        notes = []
        if cands:
            notes = [Note(on, dur, p) for on, dur, p in donors[key][cands[0]] if on < slot.measure_length]
        if not notes:
            visible = [p for ns in donors[key].values() for _, _, p in ns]
            pitch = int(round(float(np.median(visible)))) if visible else (36 if drums else 60)
            notes = [Note(0, min(24, slot.measure_length), pitch)]
        out.append(Token("MASK", k))
        out += _note_tokens(notes, drums)
    return out


# --------------------------------------------------------------------------- prompt chunking


def split_prompt(example: InfillExample, limit: int = LONG_LIMIT) -> list[InfillExample]:
    """Cut an over-long prompt at measure boundaries; sentinels renumber from 0 per chunk.

    Each chunk records ``mask_offset`` so outputs can be merged back.
    """
    if len(example.input) <= limit:
        return [example]
    spans = split_measures(example.input)
    target_spans = split_spans(example.target)
    out = []
    offset = 0
    for ci, (a, b) in enumerate(pack_measures([hi - lo for lo, hi in spans], limit)):
        piece = example.input[spans[a][0]:spans[b - 1][1]]
        masks = [t.value for t in piece if t.kind == "MASK"]
        renum = {k: i for i, k in enumerate(masks)}
        inp = [Token("MASK", renum[t.value]) if t.kind == "MASK" else t for t in piece]
        tgt = []
        for k in masks:
            tgt += [Token("MASK", renum[k])] + target_spans.get(k, [])
        coords = [(t, m - a) for t, m in (example.coords[k] for k in masks)]
        meta = dict(example.meta, parent=example.id, chunk=ci, mask_offset=offset, measure_offset=a)
        out.append(InfillExample(inp, tgt, coords, meta, f"{example.id}/{ci}"))
        offset += len(masks)
    return out


def merge_chunk_outputs(chunks: Sequence[InfillExample], outputs: Sequence[Sequence[Token]]) -> list[Token]:
    merged = []
    for ch, out in zip(chunks, outputs):
        off = ch.meta.get("mask_offset", 0) if len(chunks) > 1 else 0
        merged += [Token("MASK", t.value + off) if t.kind == "MASK" else t for t in out]
    return merged


def run_baseline(example: InfillExample, limit: int = LONG_LIMIT) -> list[Token]:
    chunks = split_prompt(example, limit)
    return merge_chunk_outputs(chunks, [baseline_infill(c) for c in chunks])


# --------------------------------------------------------------------------- scoring


@dataclass
class EvalRecord:
    example_id: str
    task: str
    precision: float
    recall: float
    f1: float
    entropy_diff: float | None
    groove_sim: float | None
    flagged: bool = False


def evaluate_example(example: InfillExample, output: Sequence[Token] | str | None) -> EvalRecord:
    """Score one system output; unparseable output counts as writing nothing and is flagged."""
    truth = truth_notes(example)
    flagged = False
    try:
        if output is None:
            raise TokenError("missing output")
        generated = span_notes(example, output)
    except TokenError as exc:
        log.warning("%s: undecodable output (%s)", example.id, exc)
        generated, flagged = [], True
    lengths = masked_measures(example)
    p, r, f1 = note_f1(generated, truth)
    if flagged:
        p = r = f1 = 0.0
    return EvalRecord(example.id, example.meta.get("task", "all"), p, r, f1,
                      pch_entropy_diff(generated, truth, lengths), groove_similarity(generated, truth, lengths),
                      flagged)


METRICS = ("f1", "entropy_diff", "groove_sim")
METRIC_TITLES = {"f1": "Note F1", "entropy_diff": "Pitch class histogram entropy difference",
                 "groove_sim": "Groove similarity"}


@dataclass
class EvalReport:
    records: list[EvalRecord]
    summary: dict = field(default_factory=dict)
    flagged: int = 0

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord]) -> "EvalReport":
        by_task = defaultdict(list)
        for r in records:
            by_task[r.task].append(r)
        summary = {}
        for task in sorted(by_task, key=_task_sort_key):
            rows = by_task[task]
            summary[task] = {}
            for metric in METRICS:
                vals = [getattr(r, metric) for r in rows if getattr(r, metric) is not None]
                summary[task][metric] = {
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "count": len(vals),
                }
        return cls(list(records), summary, sum(r.flagged for r in records))

    def to_json(self) -> dict:
        return {"schema": "midifill.eval/1", "summary": self.summary, "flagged": self.flagged,
                "records": [asdict(r) for r in self.records]}

    def table(self) -> str:
        """Aligned text table: one block per metric, one row per task, mean ± (std)."""
        tasks = list(self.summary)
        width = max([len(t) for t in tasks] + [4])
        lines = []
        for metric in METRICS:
            lines.append(METRIC_TITLES[metric])
            for task in tasks:
                s = self.summary[task][metric]
                cell = "n/a" if s["mean"] is None else f"{s['mean']:.4f} ± ({s['std']:.4f})  n={s['count']}"
                lines.append(f"  {task:<{width}}  {cell}")
        if self.flagged:
            lines.append(f"flagged outputs: {self.flagged}")
        return "\n".join(lines)


def _task_sort_key(task: str):
    head, _, kind = task.partition(" ")
    order = {v: i for i, v in enumerate(TASK_NAMES.values())}
    try:
        bars = int(head.split("-")[0])
    except ValueError:
        bars = 0
    return order.get(kind, 99), bars, task


def evaluate_corpus(examples: Sequence[InfillExample], outputs: Mapping[str, Sequence[Token] | str]) -> EvalReport:
    return EvalReport.from_records([evaluate_example(ex, outputs.get(ex.id)) for ex in examples])

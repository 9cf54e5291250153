"""Command-line driver: one subcommand per pipeline stage.

Every subcommand is a thin wrapper over library calls. Randomized commands
require ``--seed``; per-file work can fan out with ``--jobs`` while outputs
stay ordered by sorted input path.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from functools import partial
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .corpus_filter import dedupe, grid_alignment_score, is_off_grid, onset_chromagram_fingerprint
from .dataset import (
    InfillExample, build_finetune_dataset, build_pretrain_dataset, read_jsonl, write_jsonl,
)
from .evaluation import EvalReport, build_testset, evaluate_example, run_baseline
from .midi_model import (
    MidiFormatError, QuantizedSong, Song, parse_smf, song_from_json, song_to_json, to_quantized,
    write_smf,
)
from .preprocess import DrumSimplificationMap, EmptySongError, preprocess_file
from .tokens import LevelThresholds, TokenError, decode, encode, learn_level_thresholds, parse_text, to_text

log = logging.getLogger("midifill")

REPORT_SCHEMA = "midifill.report/1"
MIDI_SUFFIXES = {".mid", ".midi", ".json"}


class InputError(Exception):
    """Bad user input: missing files, unreadable data, missing flags."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- file helpers


def list_corpus(root: str) -> list[Path]:
    base = Path(root)
    if not base.exists():
        raise InputError(f"input not found: {root}")
    if base.is_file():
        return [base]
    return sorted(p for p in base.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES)


def _rel(path: Path, root: str) -> str:
    base = Path(root)
    return path.name if base.is_file() else str(path.relative_to(base))


def load_song(path) -> Song:
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path) as fh:
            return song_from_json(json.load(fh))
    return parse_smf(path.read_bytes())


def save_song(song: Song, path: Path) -> Path:
    """Write SMF, falling back to canonical JSON when SMF cannot hold the meter."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        data = write_smf(song)
    except ValueError:
        path = path.with_suffix(".json")
        path.write_text(json.dumps(song_to_json(song), separators=(",", ":")))
        return path
    path = path.with_suffix(".mid")
    path.write_bytes(data)
    return path


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _report_path(args, out_dir: str, name: str) -> Path:
    return Path(args.report) if getattr(args, "report", None) else Path(out_dir) / name


def _record(**kw) -> dict:
    return {"schema": REPORT_SCHEMA, **kw}


def _load_quantized(path: Path):
    try:
        return to_quantized(load_song(path)), None
    except (MidiFormatError, ValueError, OSError) as exc:
        return None, str(exc)


def load_quantized_corpus(root: str, jobs: int = 1) -> list[tuple[str, QuantizedSong]]:
    paths = list_corpus(root)
    out = []
    for path, (song, err) in zip(paths, _pmap(_load_quantized, paths, jobs)):
        if song is None:
            log.warning("skipping %s: %s", path, err)
        else:
            out.append((_rel(path, root), song))
    return out


def thresholds_for(cfg: PipelineConfig) -> LevelThresholds:
    if cfg.levels:
        try:
            return LevelThresholds.load(cfg.levels)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read level thresholds {cfg.levels}: {exc}") from None
    return LevelThresholds.default()


def _need_seed(cfg: PipelineConfig) -> int:
    if cfg.seed < 0:
        raise InputError("this command is randomized; pass --seed N")
    return cfg.seed


# --------------------------------------------------------------------------- per-file workers


def _scan_one(path: Path) -> dict:
    try:
        song = load_song(path)
    except (MidiFormatError, ValueError, OSError) as exc:
        return {"error": str(exc)}
    return {
        "resolution": song.resolution, "tracks": len(song.tracks), "notes": song.n_notes(),
        "drum_tracks": sum(t.is_drum for t in song.tracks),
        "time_signatures": len(song.time_signatures), "tempos": len(song.tempos),
        "grid_score": grid_alignment_score(song),
    }


def _score_one(path: Path):
    try:
        return grid_alignment_score(load_song(path)), None
    except (MidiFormatError, ValueError, OSError) as exc:
        return None, str(exc)


def _fingerprint_one(path: Path):
    try:
        return onset_chromagram_fingerprint(load_song(path)).canonical_hash, None
    except (MidiFormatError, ValueError, OSError) as exc:
        return None, str(exc)


def _preprocess_one(item, out_dir: str, drum_map_path: str, threshold: float, max_shift: int):
    path, rel = item
    try:
        drum_map = DrumSimplificationMap.load(drum_map_path) if drum_map_path else None
        q = preprocess_file(load_song(path), drum_map, threshold, max_shift)
    except EmptySongError as exc:
        return _record(path=rel, verdict="empty", detail=str(exc))
    except (MidiFormatError, ValueError, OSError) as exc:
        return _record(path=rel, verdict="error", detail=str(exc))
    written = save_song(q, Path(out_dir) / rel)
    return _record(path=rel, verdict="ok", output=str(written.relative_to(out_dir)),
                   tracks=len(q.tracks), notes=q.n_notes(), measures=len(q.measures))


# --------------------------------------------------------------------------- commands


def cmd_scan(args, cfg):
    paths = list_corpus(args.input)
    rows = [_record(path=_rel(p, args.input), **info) for p, info in zip(paths, _pmap(_scan_one, paths, cfg.jobs))]
    if args.report:
        write_jsonl(rows, args.report)
    else:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    ok = [r for r in rows if "error" not in r]
    print(f"scanned {len(rows)} files: {len(ok)} readable, {sum(r['notes'] for r in ok)} notes", file=sys.stderr)


def _copy(path: Path, root: str, out_dir: str):
    dest = Path(out_dir) / _rel(path, root)
    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(path, dest)


def cmd_filter(args, cfg):
    paths = list_corpus(args.input)
    Path(args.output).mkdir(parents=True, exist_ok=True)
    rows = []
    for path, (score, err) in zip(paths, _pmap(_score_one, paths, cfg.jobs)):
        rel = _rel(path, args.input)
        if err:
            rows.append(_record(path=rel, score=None, verdict="removed", detail=err))
            continue
        removed = is_off_grid(score, cfg.grid_threshold)
        rows.append(_record(path=rel, score=score, verdict="removed" if removed else "kept",
                            detail="no notes" if score is None else None))
        if not removed:
            _copy(path, args.input, args.output)
    write_jsonl(rows, _report_path(args, args.output, "filter_report.jsonl"))
    kept = sum(r["verdict"] == "kept" for r in rows)
    print(f"kept {kept}, removed {len(rows) - kept}")


def cmd_dedupe(args, cfg):
    paths = list_corpus(args.input)
    Path(args.output).mkdir(parents=True, exist_ok=True)
    hashes = _pmap(_fingerprint_one, paths, cfg.jobs)
    from .corpus_filter import Fingerprint

    items = [(_rel(p, args.input), Fingerprint((), h)) for p, (h, err) in zip(paths, hashes) if h]
    survivors, dup_of = dedupe(items)
    keep = set(survivors)
    rows = []
    for path, (h, err) in zip(paths, hashes):
        rel = _rel(path, args.input)
        if err:
            rows.append(_record(path=rel, hash=None, verdict="error", detail=err))
        elif rel in keep:
            rows.append(_record(path=rel, hash=h, verdict="kept"))
            _copy(path, args.input, args.output)
        else:
            rows.append(_record(path=rel, hash=h, verdict=f"duplicate-of:{dup_of[rel]}"))
    write_jsonl(rows, _report_path(args, args.output, "dedupe_report.jsonl"))
    print(f"kept {len(survivors)}, duplicates {len(dup_of)}")


def cmd_preprocess(args, cfg):
    paths = list_corpus(args.input)
    Path(args.output).mkdir(parents=True, exist_ok=True)
    if cfg.drum_map and not Path(cfg.drum_map).exists():
        raise InputError(f"drum map not found: {cfg.drum_map}")
    work = partial(_preprocess_one, out_dir=args.output, drum_map_path=cfg.drum_map,
                   threshold=cfg.overlap_threshold, max_shift=cfg.max_shift_ticks)
    rows = _pmap(work, [(p, _rel(p, args.input)) for p in paths], cfg.jobs)
    write_jsonl(rows, _report_path(args, args.output, "preprocess_report.jsonl"))
    ok = sum(r["verdict"] == "ok" for r in rows)
    print(f"preprocessed {ok} of {len(rows)} files")


def cmd_learn_levels(args, cfg):
    songs = load_quantized_corpus(args.input, cfg.jobs)
    if not songs:
        raise InputError(f"no readable songs under {args.input}")
    th = learn_level_thresholds(s for _, s in songs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(th.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"learned levels from {len(songs)} songs -> {args.out}")


def cmd_tokenize(args, cfg):
    if args.input == "-":
        data = sys.stdin.buffer.read()
        song = parse_smf(data)
    else:
        if not Path(args.input).is_file():
            raise InputError(f"input not found: {args.input}")
        song = load_song(args.input)
    if args.preprocess:
        drum_map = DrumSimplificationMap.load(cfg.drum_map) if cfg.drum_map else None
        q = preprocess_file(song, drum_map, cfg.overlap_threshold, cfg.max_shift_ticks)
    else:
        q = to_quantized(song)
    print(to_text(encode(q, thresholds_for(cfg))))


def cmd_detokenize(args, cfg):
    if args.input == "-":
        text = sys.stdin.read()
    else:
        if not Path(args.input).is_file():
            raise InputError(f"input not found: {args.input}")
        text = Path(args.input).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise InputError(f"expected one token line, found {len(lines)}")
    song = decode(parse_text(lines[0]), thresholds_for(cfg))
    if args.out:
        out = Path(args.out)
        if out.suffix.lower() == ".json":
            out.write_text(json.dumps(song_to_json(song), separators=(",", ":")))
        else:
            out.write_bytes(write_smf(song))
    else:
        sys.stdout.buffer.write(write_smf(song))


def cmd_build_pretrain(args, cfg):
    seed = _need_seed(cfg)
    songs = load_quantized_corpus(args.input, cfg.jobs)
    examples = build_pretrain_dataset(songs, thresholds_for(cfg), seed, cfg.pretrain_limit,
                                      cfg.noise_density, cfg.mean_span)
    n = write_jsonl((e.to_json() for e in examples), args.output)
    print(f"wrote {n} pretraining examples from {len(songs)} songs")


def cmd_build_finetune(args, cfg):
    seed = _need_seed(cfg)
    songs = load_quantized_corpus(args.input, cfg.jobs)
    examples = build_finetune_dataset(songs, thresholds_for(cfg), seed, cfg.examples_per_song, cfg.finetune())
    n = write_jsonl((e.to_json() for e in examples), args.output)
    print(f"wrote {n} finetuning examples from {len(songs)} songs")


def cmd_make_testset(args, cfg):
    seed = _need_seed(cfg)
    songs = load_quantized_corpus(args.input, cfg.jobs)
    try:
        lens = [int(x) for x in cfg.slice_lens.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"bad slice_lens {cfg.slice_lens!r}") from None
    kinds = [k.strip() for k in cfg.kinds.split(",") if k.strip()]
    examples = build_testset(songs, thresholds_for(cfg), seed, lens, kinds, cfg.test_hints, cfg.reference_parity)
    n = write_jsonl((e.to_json() for e in examples), args.output)
    print(f"wrote {n} test examples from {len(songs)} songs")


def _read_examples(path: str) -> list[InfillExample]:
    if not Path(path).is_file():
        raise InputError(f"input not found: {path}")
    try:
        return [InfillExample.from_json(d) for d in read_jsonl(path)]
    except (json.JSONDecodeError, KeyError, TokenError) as exc:
        raise InputError(f"{path}: not an example file ({exc})") from None


def cmd_infill_baseline(args, cfg):
    examples = _read_examples(args.examples)
    rows = ({"id": ex.id, "output": to_text(run_baseline(ex, cfg.long_limit))} for ex in examples)
    n = write_jsonl(rows, args.output)
    print(f"filled {n} examples")


def cmd_evaluate(args, cfg):
    examples = _read_examples(args.examples)
    if not Path(args.outputs).is_file():
        raise InputError(f"input not found: {args.outputs}")
    outputs = {}
    for d in read_jsonl(args.outputs):
        outputs[d["id"]] = d.get("output")
    records = []
    for ex in examples:
        out = outputs.get(ex.id)
        try:
            parsed = parse_text(out) if out is not None else None
        except TokenError:
            parsed = None
        records.append(evaluate_example(ex, parsed))
    report = EvalReport.from_records(records)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    table = report.table()
    if args.table:
        Path(args.table).write_text(table + "\n")
    print(table)


# --------------------------------------------------------------------------- parser


def _config_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    g.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the effective configuration and exit")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = dict(dest=f"cfg_{f.name}", default=argparse.SUPPRESS, metavar=f.name.upper())
        g.add_argument(flag, type=str, **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    p = _Parser(prog="midifill", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"midifill {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_text, *positionals, **extra):
        sp = sub.add_parser(name, help=help_text, parents=[common])
        for pos in positionals:
            sp.add_argument(pos)
        for flag, kw in extra.items():
            sp.add_argument(flag, **kw)
        sp.set_defaults(func=fn)
        return sp

    add("scan", cmd_scan, "corpus statistics", "input", **{"--report": dict(default=None)})
    sp = add("filter", cmd_filter, "drop files that ignore the grid", "input", "output",
             **{"--report": dict(default=None)})
    sp.add_argument("--threshold", dest="cfg_grid_threshold", default=argparse.SUPPRESS)
    add("dedupe", cmd_dedupe, "remove chromagram duplicates", "input", "output", **{"--report": dict(default=None)})
    add("preprocess", cmd_preprocess, "normalize and quantize files", "input", "output",
        **{"--report": dict(default=None)})
    add("learn-levels", cmd_learn_levels, "learn dynamics/tempo level thresholds", "input",
        **{"--out": dict(default="levels.json")})
    add("tokenize", cmd_tokenize, "MIDI file to token text", "input",
        **{"--preprocess": dict(action="store_true", help="run the full preprocessing pipeline first")})
    add("detokenize", cmd_detokenize, "token text to MIDI", "input", **{"--out": dict(default=None)})
    sp = add("build-pretrain", cmd_build_pretrain, "span-corruption examples", "input", "output")
    sp.add_argument("--limit", dest="cfg_pretrain_limit", default=argparse.SUPPRESS)
    add("build-finetune", cmd_build_finetune, "mask-pattern infilling examples", "input", "output")
    add("make-testset", cmd_make_testset, "random/track/last-bar test examples", "input", "output")
    add("infill-baseline", cmd_infill_baseline, "copy-nearest-measure baseline outputs", "examples", "output")
    add("evaluate", cmd_evaluate, "Note F1, entropy difference, groove similarity", "examples", "outputs",
        **{"--report": dict(default=None), "--table": dict(default=None)})
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ns = vars(args)
    logging.basicConfig(level=logging.INFO if ns.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in ns.items() if k.startswith("cfg_")}
    try:
        cfg = load_config(ns.get("config"), overrides)
    except ConfigError as exc:
        print(f"midifill: error: {exc}", file=sys.stderr)
        return 1
    if ns.get("dump_config"):
        sys.stdout.write(cfg.dump())
        return 0
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("midifill: error: a command is required", file=sys.stderr)
        return 1
    try:
        args.func(args, cfg)
    except (InputError, ConfigError, MidiFormatError, TokenError, EmptySongError) as exc:
        print(f"midifill: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"midifill: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"midifill: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())

import json

import numpy as np
import pytest

from midifill.cli import run
from midifill.config import ConfigError, PipelineConfig, load_config, parse_config_text
from midifill.midi_model import write_midi
from midifill.synth import GOLDEN_TOKENS, golden_measure_song, pulse_song, random_song, uniform_residue_song


def test_config_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\ngrid_threshold = 0.7\nseed = 3\ntest_hints = false\n")
    monkeypatch.setenv("MIDIFILL_LEVELS", "/x/levels.json")
    cfg = load_config(str(p), {"seed": "9"})
    assert cfg.grid_threshold == 0.7 and cfg.seed == 9 and cfg.test_hints is False
    assert cfg.levels == "/x/levels.json"
    assert load_config(None, parse_config_text(cfg.dump())) == cfg


@pytest.mark.parametrize("bad", [{"grid_threshold": "1.5"}, {"nope": "1"}, {"jobs": "x"}, {"long_limit": "0"}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_dump_config(capsys):
    assert run(["--dump-config", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "seed = 4" in out and "grid_threshold = 0.8" in out


def test_filter_two_files(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    write_midi(pulse_song(480), src / "quarters.mid")
    write_midi(uniform_residue_song(), src / "uniform.mid")
    assert run(["filter", "--threshold", "0.8", str(src), str(tmp_path / "out")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "out" / "filter_report.jsonl").read_text().splitlines()]
    assert {r["path"]: r["verdict"] for r in rows} == {"quarters.mid": "kept", "uniform.mid": "removed"}
    assert all(r["schema"] == "midifill.report/1" for r in rows)
    assert sorted(p.name for p in (tmp_path / "out").glob("*.mid")) == ["quarters.mid"]


def test_tokenize_golden_measure(tmp_path, capsys):
    write_midi(golden_measure_song(), tmp_path / "golden.mid")
    assert run(["tokenize", str(tmp_path / "golden.mid")]) == 0
    assert capsys.readouterr().out.strip() == GOLDEN_TOKENS


def test_detokenize_to_file(tmp_path, capsys):
    (tmp_path / "t.txt").write_text(GOLDEN_TOKENS + "\n")
    assert run(["detokenize", str(tmp_path / "t.txt"), "--out", str(tmp_path / "o.mid")]) == 0
    assert run(["tokenize", str(tmp_path / "o.mid")]) == 0
    assert capsys.readouterr().out.strip() == GOLDEN_TOKENS


def _corpus(tmp_path, n=6):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        write_midi(random_song(rng, n_measures=12), src / f"s{i}.mid")
    return src


def test_build_finetune_deterministic(tmp_path):
    src = _corpus(tmp_path)
    assert run(["preprocess", str(src), str(tmp_path / "p")]) == 0
    for name in ("a", "b"):
        assert run(["build-finetune", "--seed", "7", str(tmp_path / "p"), str(tmp_path / f"{name}.jsonl")]) == 0
    a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
    assert a == b and a
    assert run(["build-finetune", "--seed", "7", "--jobs", "2", str(tmp_path / "p"), str(tmp_path / "c.jsonl")]) == 0
    assert (tmp_path / "c.jsonl").read_bytes() == a


def test_build_pretrain(tmp_path):
    src = _corpus(tmp_path, 3)
    assert run(["build-pretrain", "--seed", "1", str(src), str(tmp_path / "pt.jsonl")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "pt.jsonl").read_text().splitlines()]
    assert rows and all(len(r["input"].split()) <= 512 for r in rows)


def test_scan(tmp_path, capsys):
    src = _corpus(tmp_path, 2)
    assert run(["scan", str(src)]) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(rows) == 2 and rows[0]["notes"] > 0


def test_error_exit_codes(tmp_path, capsys):
    assert run(["filter", str(tmp_path / "missing"), str(tmp_path / "o")]) == 1
    assert run(["build-finetune", str(tmp_path), str(tmp_path / "x.jsonl")]) == 1
    assert "--seed" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run(["filter", "--no-such-flag", "a", "b"])
    assert e.value.code == 1
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"not midi")
    assert run(["tokenize", str(bad)]) == 1
    (tmp_path / "t.txt").write_text("M:0 B:0 L:96 I:0 w:96 d:1 N:60\n")
    assert run(["detokenize", str(tmp_path / "t.txt"), "--out", str(tmp_path / "o.mid")]) == 1
    assert run(["evaluate", str(tmp_path / "none.jsonl"), str(tmp_path / "none2.jsonl")]) == 1

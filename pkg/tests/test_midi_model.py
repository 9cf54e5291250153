import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from midifill.midi_model import (
    MeasureMap, MidiFormatError, Note, QuantizedSong, Song, TempoChange, TimeSignature, Track,
    compute_measures, measure_ticks, on_grid, parse_smf, quantize, song_from_json, song_to_json,
    to_quantized, write_smf,
)
from midifill.synth import random_quantized_song


def _vlq(v):
    out = [v & 0x7F]
    v >>= 7
    while v:
        out.append(0x80 | (v & 0x7F))
        v >>= 7
    return bytes(reversed(out))


def _smf(tracks, resolution=96, fmt=1):
    body = struct.pack(">4sIHHH", b"MThd", 6, fmt, len(tracks), resolution)
    for events in tracks:
        data = b"".join(_vlq(dt) + ev for dt, ev in events) + b"\x00\xff\x2f\x00"
        body += b"MTrk" + struct.pack(">I", len(data)) + data
    return body


def test_minimal_file():
    song = parse_smf(_smf([[(0, b"\x90\x3c\x50"), (96, b"\x80\x3c\x00")]], fmt=0))
    assert song.resolution == 96
    assert [n for t in song.tracks for n in t.notes] == [Note(0, 96, 60, 80)]
    assert song.tempos == (TempoChange(0, 120.0),)
    assert song.time_signatures == (TimeSignature(0, 4, 4),)


def test_running_status_and_velocity_zero_off():
    song = parse_smf(_smf([[(0, b"\x90\x3c\x50"), (0, b"\x40\x50"), (48, b"\x3c\x00"), (48, b"\x40\x00")]]))
    notes = sorted((n.pitch, n.onset, n.duration) for t in song.tracks for n in t.notes)
    assert notes == [(60, 0, 48), (64, 0, 96)]


def test_tempo_and_meter_meta():
    song = parse_smf(_smf([[(0, b"\xff\x51\x03\x07\xa1\x20"), (0, b"\xff\x58\x04\x03\x02\x18\x08"),
                            (0, b"\x90\x3c\x50"), (10, b"\x80\x3c\x00")]]))
    assert song.tempos[0].bpm == pytest.approx(120.0)
    assert song.time_signatures[0] == TimeSignature(0, 3, 4)


def test_drum_channel_becomes_drums():
    song = parse_smf(_smf([[(0, b"\x99\x24\x64"), (10, b"\x89\x24\x00")]]))
    assert song.tracks[0].is_drum


@pytest.mark.parametrize("blob", [b"", b"RIFF0000", _smf([[(0, b"\x90\x3c")]])[:-3]])
def test_malformed_raises(blob):
    with pytest.raises(MidiFormatError):
        parse_smf(blob)


def test_smpte_rejected():
    data = bytearray(_smf([[(0, b"\x90\x3c\x50"), (10, b"\x80\x3c\x00")]]))
    data[12:14] = b"\xe7\x28"
    with pytest.raises(MidiFormatError):
        parse_smf(bytes(data))


def test_empty_song_writes_valid_file():
    song = parse_smf(write_smf(Song()))
    assert song.tracks == ()
    assert song.tempos == (TempoChange(0, 120.0),)


def _without_same_pitch_overlap(song):
    # SMF cannot say which note-off closes which of two overlapping same-pitch notes
    tracks = []
    for t in song.tracks:
        last_end, keep = {}, []
        for n in t.notes:
            if n.onset >= last_end.get(n.pitch, -1) and n.duration > 0:
                keep.append(n)
                last_end[n.pitch] = n.end
        tracks.append(Track(t.instrument, tuple(keep)))
    return Song(song.resolution, tuple(tracks), song.tempos, song.time_signatures, song.end_tick)


def test_write_read_roundtrip_random():
    rng = np.random.default_rng(5)
    for _ in range(30):
        s = _without_same_pitch_overlap(random_quantized_song(rng, max_tracks=10, max_measures=8))
        back = parse_smf(write_smf(s))
        key = lambda song: sorted((t.instrument, sorted((n.onset, n.duration, n.pitch, n.velocity) for n in t.notes))
                                  for t in song.tracks if t.notes)
        assert key(back) == key(s)
        assert [tuple(x) for x in back.time_signatures] == [tuple(x) for x in s.time_signatures]


def test_write_rejects_bad_denominator():
    with pytest.raises(ValueError):
        write_smf(Song(time_signatures=(TimeSignature(0, 5, 6),)))


def test_measures_four_four():
    s = Song(resolution=24, tracks=(Track(0, (Note(0, 1, 60), Note(300, 1, 60))),))
    assert compute_measures(s).lengths == [96] * 4


def test_measures_meter_change():
    sigs = (TimeSignature(0, 3, 4), TimeSignature(216, 6, 8), TimeSignature(360, 3, 8))
    s = Song(resolution=24, tracks=(Track(0, (Note(400, 10, 60),)),), time_signatures=sigs)
    assert compute_measures(s).lengths[:6] == [72, 72, 72, 72, 72, 36]


def test_twelve_four_is_flagged():
    s = Song(resolution=24, tracks=(Track(0, (Note(0, 10, 60),)),), time_signatures=(TimeSignature(0, 12, 4),))
    mm = compute_measures(s)
    assert mm.lengths[0] == 288
    assert mm.too_long(24) == [0]
    assert measure_ticks(TimeSignature(0, 6, 8), 24) == 72


def test_quantize_examples():
    def q(tick, res):
        s = Song(resolution=res, tracks=(Track(0, (Note(tick, res, 60),)),))
        return quantize(s).tracks[0].notes[0].onset
    assert q(48, 24) == 48
    assert q(5, 24) == 6
    assert q(955, 960) == 24


def test_quantize_keeps_pitched_duration_positive():
    s = Song(resolution=960, tracks=(Track(0, (Note(0, 5, 60),)), Track(128, (Note(0, 0, 36),))))
    q = quantize(s)
    assert q.tracks[0].notes[0].duration == 1
    assert q.tracks[1].notes[0].duration == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 2000), st.integers(0, 127)), max_size=30),
       st.sampled_from([96, 120, 384, 480, 960]))
def test_quantize_lands_on_grid(raw, res):
    notes = tuple(Note(o, d, p) for o, d, p in raw)
    q = to_quantized(Song(resolution=res, tracks=(Track(0, notes),)))
    assert isinstance(q, QuantizedSong)
    assert q.resolution == 24
    assert on_grid(q)


def test_json_roundtrip():
    s = to_quantized(random_quantized_song(np.random.default_rng(2)))
    back = song_from_json(song_to_json(s))
    assert back == s
    assert isinstance(back, QuantizedSong)


def test_measure_map_index():
    mm = MeasureMap(((0, 96), (96, 72)))
    assert mm.index_of(95) == 0 and mm.index_of(96) == 1 and mm.end == 168


def test_note_validation():
    with pytest.raises(ValueError):
        Note(0, 1, 128)
    with pytest.raises(ValueError):
        Note(-1, 1, 60)

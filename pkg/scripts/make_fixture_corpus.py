"""Write a small raw MIDI corpus: random songs, clones of some of them, and off-grid files.

    python3 scripts/make_fixture_corpus.py OUT_DIR --songs 20 --clones 5 --off-grid 3 --seed 0
"""
import argparse
from pathlib import Path

import numpy as np

from midifill.midi_model import write_midi
from midifill.synth import padded, random_song, repetitive_song, rescaled, transposed, uniform_residue_song


def build(out: Path, songs: int, clones: int, off_grid: int, seed: int, repetitive: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out.mkdir(parents=True, exist_ok=True)
    originals = []
    for i in range(songs):
        s = random_song(rng)
        write_midi(s, out / f"song_{i:03d}.mid")
        originals.append(s)
    for i in range(repetitive):
        write_midi(repetitive_song(rng, n_measures=16, resolution=480), out / f"loop_{i:03d}.mid")
    truth = {}
    for i in range(clones):
        k = int(rng.integers(len(originals)))
        kind = ("transpose", "rescale", "pad")[i % 3]
        s = originals[k]
        clone = {"transpose": lambda: transposed(s, int(rng.integers(1, 12))),
                 "rescale": lambda: rescaled(s, 2),
                 "pad": lambda: padded(s, int(rng.integers(1, 4)))}[kind]()
        name = f"clone_{i:03d}_{kind}.mid"
        write_midi(clone, out / name)
        truth[name] = f"song_{k:03d}.mid"
    for i in range(off_grid):
        write_midi(uniform_residue_song(resolution=12 * (i + 1)), out / f"offgrid_{i:03d}.mid")
    return truth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--songs", type=int, default=20)
    ap.add_argument("--clones", type=int, default=5)
    ap.add_argument("--off-grid", type=int, default=3)
    ap.add_argument("--repetitive", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    truth = build(Path(a.out), a.songs, a.clones, a.off_grid, a.seed, a.repetitive)
    for clone, orig in sorted(truth.items()):
        print(f"{clone} -> {orig}")


if __name__ == "__main__":
    main()

"""Empirical checks of the sampling knobs: grid landmarks, mask patterns, hint and truncation rates.

    python3 scripts/dataset_statistics.py [--draws 100000] [--examples 10000] [--seed 0]
"""
import argparse
from collections import Counter

import numpy as np

from midifill.corpus_filter import grid_alignment_score
from midifill.dataset import FinetuneConfig, PATTERN_WEIGHTS, build_finetune_dataset, make_rng, sample_finetune_mask
from midifill.synth import pulse_song, random_quantized_song, uniform_residue_song
from midifill.tokens import LevelThresholds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--draws", type=int, default=100_000)
    ap.add_argument("--examples", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    print("grid alignment scores")
    for name, song in (("quarters", pulse_song(480)), ("8ths", pulse_song(240)), ("16ths", pulse_song(120)),
                       ("uniform residues", uniform_residue_song())):
        print(f"  {name:<17} {grid_alignment_score(song):.4f}")

    rng = make_rng(a.seed)
    counts = Counter(sample_finetune_mask(4, 8, rng).pattern_id for _ in range(a.draws))
    total = sum(PATTERN_WEIGHTS)
    print(f"mask pattern frequencies over {a.draws} draws")
    for pid, w in enumerate(PATTERN_WEIGHTS):
        print(f"  pattern {pid}: {counts[pid] / a.draws:.4f}  (target {w / total:.4f})")
    only0 = FinetuneConfig(pattern_weights=(1, 0, 0, 0, 0, 0, 0))
    cells = [len(sample_finetune_mask(4, 8, rng, only0).masked) for _ in range(max(1, a.examples // 32))]
    print(f"pattern 0 mask rate: {sum(cells) / (32 * len(cells)):.4f}")

    data_rng = np.random.default_rng(a.seed)
    songs = [(f"s{i}", random_quantized_song(data_rng, 8, 32)) for i in range(100)]
    per_song = -(-a.examples * 5 // 4 // len(songs))
    exs = build_finetune_dataset(songs, LevelThresholds.default(), a.seed, per_song)[:a.examples]
    hinted = np.mean([any(t.kind in ("MONO", "POLY") for t in e.input) for e in exs])
    truncated = np.mean([e.meta["truncated"] for e in exs])
    print(f"{len(exs)} finetune examples: hint rate {hinted:.4f}, truncation rate {truncated:.4f}, "
          f"max input {max(len(e.input) for e in exs)}, max masks {max(e.n_masks for e in exs)}")


if __name__ == "__main__":
    main()

"""Four-row ablation on the toy backend over a color x object prompt grid.

Style references are synthesized as flat-color PNGs so the script runs
without any assets. Scores come from the mock embedder and say nothing
about real image quality; the point is to exercise the full harness.

    python scripts/toy_ablation.py --out ablation_out --steps 20
"""

import argparse
import os

import numpy as np
from PIL import Image

from adastyle.evaluation import BenchmarkGrid, MockEmbedder, expand_template, run_ablation, table_csv, write_results
from adastyle.pipeline import GenerationConfig
from adastyle.toy_backend import ToyBackend

COLORS = ["red", "blue", "green"]
OBJECTS = ["apple", "car", "chair"]
PALETTES = {"sunset": (230, 120, 60), "ocean": (40, 90, 200), "moss": (80, 140, 70)}


def write_styles(out_dir):
    paths = []
    rng = np.random.default_rng(0)
    for name, rgb in PALETTES.items():
        img = np.clip(np.array(rgb) + rng.normal(0, 25, size=(64, 64, 3)), 0, 255).astype(np.uint8)
        path = os.path.join(out_dir, f"style_{name}.png")
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="ablation_out")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--cutoff", type=int, default=8)
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    grid = BenchmarkGrid(expand_template(COLORS, OBJECTS), write_styles(args.out))
    base = GenerationConfig(steps=args.steps, teacher_cutoff=args.cutoff)
    table = run_ablation(grid, ToyBackend(0), MockEmbedder(), base, jobs=args.jobs)
    write_results(table, args.out, csv_export=True)
    print(table_csv(table), end="")


if __name__ == "__main__":
    main()

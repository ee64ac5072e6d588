"""Sweep the teacher cutoff on the toy backend.

For each cutoff k, reports how far the final student latent sits from the
teacher-alone latent and from the student-alone latent, plus the mock
text-alignment score of the decoded image. Useful for eyeballing the
layout-vs-style trade-off before spending GPU time on a real backend.

    python scripts/cutoff_sweep.py --steps 50 --cutoffs 0 5 10 20 30 50
"""

import argparse
from pathlib import Path

import numpy as np

from adastyle.evaluation import MockEmbedder, text_alignment
from adastyle.pipeline import GenerationConfig, generate
from adastyle.toy_backend import ToyBackend

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "style_ref.png"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--prompt", default="A red apple")
    ap.add_argument("--style-image", default=str(FIXTURE))
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--cutoffs", type=int, nargs="+", default=[0, 5, 10, 20, 30, 50])
    args = ap.parse_args()

    backend = ToyBackend(0)
    embedder = MockEmbedder()
    base = GenerationConfig(prompt=args.prompt, style_image_path=args.style_image, steps=args.steps, seed=args.seed)
    teacher_only = generate(base.replace(style_image_path=None, teacher_enabled=False), backend=backend).latent
    student_only = generate(base.replace(teacher_enabled=False), backend=backend).latent

    print(f"{'cutoff':>6}  {'|z - teacher|':>13}  {'|z - student|':>13}  {'alignment':>9}")
    for k in args.cutoffs:
        if k > args.steps:
            continue
        res = generate(base.replace(teacher_cutoff=k), backend=backend)
        d_t = float(np.linalg.norm(res.latent - teacher_only))
        d_s = float(np.linalg.norm(res.latent - student_only))
        score = text_alignment(res.image, args.prompt, embedder).value
        print(f"{k:>6}  {d_t:>13.4f}  {d_s:>13.4f}  {score:>9.4f}")


if __name__ == "__main__":
    main()

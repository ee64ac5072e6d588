"""Record the toy-backend golden values used by the test suite.

Run from the repository root after any intentional change to the toy
backend, encoders or scheduler:

    python scripts/record_goldens.py

Writes tests/fixtures/golden.json.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from adastyle.guidance import ConditioningBundle
from adastyle.pipeline import GenerationConfig, generate
from adastyle.scheduler import LatentState
from adastyle.toy_backend import EMBED_DIM, STYLE_LEN, TEXT_LEN, ToyBackend, build_toy, toy_predict, weights_checksum

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "tests" / "fixtures"

BASELINE_PROMPT = "A red apple"
BASELINE_SEEDS = (42, 0, 7)
BASELINE_STEPS = 10
BIAS_TIMESTEP = 501


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def baseline_config(seed):
    return GenerationConfig.baseline(
        prompt=BASELINE_PROMPT,
        style_image_path=str(FIXTURES / "style_ref.png"),
        seed=seed,
        steps=BASELINE_STEPS,
    )


def main():
    backend = ToyBackend(0)
    denoiser, encoders = build_toy(0)
    zero = LatentState(np.zeros(backend.latent_shape), BIAS_TIMESTEP, 0)
    conds = ConditioningBundle(np.zeros((1, TEXT_LEN, EMBED_DIM)), np.zeros((1, TEXT_LEN, EMBED_DIM)), np.zeros((1, STYLE_LEN, EMBED_DIM)))
    bias = toy_predict(denoiser, zero, conds)
    golden = {
        "baseline": {
            "prompt": BASELINE_PROMPT,
            "steps": BASELINE_STEPS,
            "pixels_sha256": {str(s): sha(generate(baseline_config(s), backend=backend).image) for s in BASELINE_SEEDS},
        },
        "bias_response": {"timestep": BIAS_TIMESTEP, "values": bias.ravel().tolist()},
        "weights_sha256": {"0": weights_checksum(denoiser.weights), "1": weights_checksum(build_toy(1)[0].weights)},
        "style_embedding_sha256": sha(encoders.encode_style(FIXTURES / "style_ref.png")),
    }
    out = FIXTURES / "golden.json"
    out.write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()

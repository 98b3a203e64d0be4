"""Smoke test for the `foley` extension module.

Build and run from the repository root:

    cargo build -p foley-py --features extension-module
    cp target/debug/libfoley.so python/foley.so
    python3 python/smoke.py
"""

import json
import math
import random
import sys
import tempfile

import foley


def main() -> int:
    names = foley.classes()
    assert len(names) == 7 and names[0] == "dog_bark", names

    samples, rate = foley.synthesize("rain", 3, 1.0)
    assert rate == 16000 and len(samples) == 16000
    assert max(abs(s) for s in samples) <= 1.0

    mel = foley.mel_spectrogram(samples, rate)
    assert len(mel) == 32 and all(len(row) == 100 for row in mel), (len(mel), len(mel[0]))

    rng = random.Random(0)
    a = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(64)]
    assert foley.frechet_distance(a, a) < 1e-8
    shifted = [[x + 1.0 for x in row] for row in a]
    assert abs(foley.frechet_distance(a, shifted) - 4.0) < 1e-3

    assert foley.alpha_bar(1000) < 5e-5
    assert math.isclose(foley.step_weight(200), 0.1)
    assert foley.total_loss(0.5, 0.001, 2000.0) == 2.5

    try:
        foley.synthesize("violin", 0, 1.0)
    except ValueError as e:
        assert "violin" in str(e)
    else:
        raise AssertionError("unknown class accepted")

    with tempfile.TemporaryDirectory() as out:
        summary = json.loads(
            foley.run_stage(
                out,
                "make-data",
                ["classes=[\"rain\",\"keyboard\"]", "dataset.per_class=2", "dataset.reference_per_class=1"],
            )
        )
        print("make-data:", summary)
        try:
            foley.run_stage(out, "finetune-ldm")
        except ValueError as e:
            assert "train-vae" in str(e), e
        else:
            raise AssertionError("fine-tuning ran without a VAE")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Smoke test for the compiled `fidseg` extension.

Build and run:
    cargo build --release -p fidseg-py
    cp target/release/libfidseg_py.so python/fidseg.abi3.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fidseg  # noqa: E402


def main():
    p = fidseg.softmax([0.4] * 6, 1, 1, 6)
    assert all(abs(v - 1 / 6) < 1e-12 for v in p)

    ce, grad = fidseg.loss(p, [0], 1, 1, 6)
    assert abs(ce - math.log(6)) < 1e-9
    assert len(grad) == 6

    probs = [0.5] + [0.1] * 5
    focal, _ = fidseg.loss(probs, [0], 1, 1, 6, kind="focal")
    assert abs(focal - 0.173287) < 1e-6

    probs = [0.18, 0.1, 0.18, 0.18, 0.18, 0.18]
    wce, _ = fidseg.loss(probs, [1], 1, 1, 6, foreground_weight=50.0)
    assert abs(wce - 115.129) < 1e-3

    row3 = [0.9996, 0.6101, 0.5000, 0.7159, 0.6779, 0.6624]
    assert abs(fidseg.overall_miou(row3) - 0.6943) < 5e-5

    ids = [0] * 16
    for i in (5, 6, 9, 10):
        ids[i] = 3
    centers = dict(fidseg.centers(ids, 4, 4, 6))
    assert centers[3] == (1.5, 1.5)
    assert centers[1] is None
    assert fidseg.ious(ids, ids, 4, 4, 6)[3] == 1.0

    model = fidseg.Model.desk(2, seed=1)
    w, h = model.input_size
    probs, seg = model.predict([0.5] * (w * h))
    assert len(probs) == 6 * w * h and len(seg) == w * h
    for px in range(0, w * h, 997):
        assert abs(sum(probs[k * w * h + px] for k in range(6)) - 1) < 1e-5

    with tempfile.TemporaryDirectory() as d:
        try:
            fidseg.generate(d, preset="nope")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown preset accepted")

    print(f"fidseg {fidseg.__version__}: smoke test passed")


if __name__ == "__main__":
    main()

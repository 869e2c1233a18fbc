"""Smoke test for the regionnet_py extension module."""

import math
import sys
import tempfile
from pathlib import Path

import regionnet_py as rn


def main() -> int:
    a = rn.BBox(10.0, 10.0, 4.0, 4.0)
    b = rn.BBox(11.0, 10.0, 4.0, 4.0)
    assert math.isclose(rn.iou(a, b), 12.0 / 20.0)
    assert a.iou(a) == 1.0

    dets = [rn.Detection(0, a, 0.9), rn.Detection(0, b, 0.8), rn.Detection(1, b, 0.3)]
    assert len(rn.nms_standard(dets, 0.5)) == 2
    best = rn.nms_special(dets)
    assert sorted((d.region_class, d.score) for d in best) == [(0, 0.9), (1, 0.3)]

    aps = [0.938, 0.926, 0.915, 0.901, 0.893, 0.931, 0.904]
    assert round(rn.mean_ap(aps) * 100, 1) == 91.5

    label, sums = rn.fuse([[0.7, 0.3], [0.4, 0.6], [0.45, 0.55]])
    assert label == 0 and math.isclose(sums[0], 1.55) and math.isclose(sums[1], 1.45)

    pooled = rn.roi_align([1.0] * 16, [1, 4, 4], rn.BBox(2.0, 2.0, 2.0, 2.0), 2, 2)
    assert all(math.isclose(v, 1.0) for v in pooled)

    data = rn.Dataset.synthetic(2, 2, 6, 32, seed=1)
    train, test = data.split(0.5, seed=2)
    assert len(train) == 6 and len(test) == 6
    assert len(train.image(0)) == 3 * 32 * 32

    model = rn.Model(2, 2, 32, stage_channels=[4, 8], hidden_units=8, seed=3)
    losses = [model.train_epoch(train, e, lr=3e-3, batch_size=3, seed=4) for e in range(3)]
    assert all(math.isfinite(x) for x in losses)
    report = model.evaluate(test)
    assert set(report) == {"per_head", "fused"}
    assert 0.0 <= report["fused"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "model.ckpt"
        model.save(path, 3)
        other = rn.Model(2, 2, 32, stage_channels=[4, 8], hidden_units=8, seed=9)
        assert other.load(path) == 3
        assert other.predict(test, 0) == model.predict(test, 0)

    try:
        rn.BBox(0.0, 0.0, -1.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative width accepted")

    print("regionnet_py smoke test passed, losses", [round(x, 4) for x in losses])
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Exercises the ctseg extension end to end.

Build and install first:
    pip install maturin && maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/ctseg-*.whl
"""

import math
import tempfile

import ctseg


def main():
    counts = ctseg.count_params()
    assert counts["total"] == 21_480_074, counts
    assert ctseg.count_params(width=256, height=256)["total"] - counts["total"] == 122_880

    rows = ctseg.derive_dims(width=256, height=256, downsample=4)
    assert rows[2] == (64, 64, 256, 1024, 256, rows[2][5]), rows

    gt = [True, True, False, False]
    assert ctseg.dice(2, 2, [True, False, True, False], gt) == 0.5
    value, status = ctseg.assd(2, 2, gt, gt)
    assert value == 0.0 and status == "true", (value, status)
    n, _, p = ctseg.wsrt([1, 2, 3, 4, 5, 6], [0] * 6)
    assert n == 6 and math.isclose(p, 2 / 64)

    try:
        ctseg.count_params(levels="x")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    with tempfile.TemporaryDirectory() as tmp:
        assert ctseg.synth(tmp + "/data", count=20, size=16, seed=1) == (14, 2, 4)
        tiny = dict(width=16, height=16, in_channels=1, levels=3, blocks=1, base_channels=8, downsample=2)
        model = ctseg.Model(seed=3, **tiny)
        history = model.fit(tmp + "/data", epochs=1, batch=4, out=tmp + "/run")
        assert len(history) == 1 and all(math.isfinite(v) for v in history[0][1:]), history

        pixels = [((i % 7) / 7.0) for i in range(2 * 16 * 16)]
        logits, shape = model.predict(pixels, [2, 1, 16, 16])
        assert shape == [2, 2, 16, 16] and len(logits) == 2 * 2 * 256
        labels = model.predict_labels(pixels, [2, 1, 16, 16])
        assert set(labels) <= {0, 1}

        model.save(tmp + "/m.ckpt")
        again = ctseg.Model.load(tmp + "/m.ckpt")
        assert again.predict(pixels, [2, 1, 16, 16]) == (logits, shape)
        assert again.num_parameters() == model.num_parameters()
        dc = again.mean_dice(tmp + "/data", "test")
        assert 0.0 <= dc <= 1.0

    print("smoke test ok")


if __name__ == "__main__":
    main()

"""Exercise the Python bindings end to end on a tiny problem."""

import os
import tempfile

import pwtp_py as pw


def main():
    # projection: a constant basis leaves the temporal mean as static appearance
    t, n = 4, 3
    x = [float((i * 7) % 5) for i in range(t * n)]
    bases = [1.0] * (n * t)
    xh, p, da = pw.project(x, [t, 1, n, 1], bases, [n, t, 1])
    assert xh[1] == ([t, 1, n, 1])
    assert all(abs(v) < 1e-12 for v in da[0]), da
    assert pw.enopr(*p) >= 0.0

    assert pw.mgda_alpha([1.0, 0.0], [-1.0, 0.0]) == 0.5
    assert pw.mgda_alpha([1.0, 2.0], [2.0, 4.0]) == 1.0
    assert pw.scale_schedule(0.2, 0.3, 1000, 1) == 1.0

    gray = pw.export_da([0.0] * 12, [2, 2, 3])
    assert gray.startswith(b"P6") and gray[-12:] == bytes([128]) * 12

    cfg = pw.Config(frames=4, kernel=4, stride=4, channels=8)
    data = pw.Dataset(height=16, width=16, segments=2, frames=4, n_train=16, n_test=8)
    assert data.size("train") == 16 and len(data.manifest("test")) == 8
    values, shape, label = data.clip(0)
    assert shape == [2, 4, 16, 16, 3] and label == 0

    proj = pw.Projector(cfg, seed=1)
    out = proj.forward(values, shape)
    assert out["da"][1] == [2, 16, 16, 3]
    log = proj.train_unsupervised(data, steps=10, warmup=2, batch=4)
    assert len(log) == 10 and log[-1] < log[0], log

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "theta1.pwtc")
        proj.save(path)
        again = pw.Projector.load(path, cfg)
        assert again.num_trainable() == proj.num_trainable()
        data.save(os.path.join(d, "data"))
        assert pw.Dataset.load(os.path.join(d, "data")).size("test") == 8

    acc, rows = pw.train_joint(data, mode="constant:0.0", steps=4, config=cfg)
    assert 0.0 <= acc <= 1.0
    assert [r[3] for r in rows] == [0.0] * 4
    print("smoke test passed")


if __name__ == "__main__":
    main()

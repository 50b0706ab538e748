"""Quick end-to-end check of the extension module."""

import math
import os
import random
import tempfile

import weightscope_py as ws


def main():
    rng = random.Random(0)
    xs = [rng.gauss(0.0, 1.0) for _ in range(20000)]

    s = ws.summarize(xs, sigma_k=None)
    assert abs(s["mean"]) < 0.05 and abs(s["std"] - 1.0) < 0.05, s
    assert abs(s["kurtosis"] - 3.0) < 0.2, s
    windowed = ws.summarize(xs)
    assert windowed["retain_ratio"] > 0.99, windowed

    h = ws.histogram(xs, bins=20)
    assert sum(h["counts"]) + h["underflow"] + h["overflow"] == len(xs)

    inside, outside = ws.outlier_split([-3.0, -0.5, 0.0, 0.5, 3.0], 1.0)
    assert sorted(inside) == [-0.5, 0.0, 0.5] and sorted(outside) == [-3.0, 3.0]

    f = ws.extract_features(xs)
    label = ws.classify(f["kurt3s"], f["center_mass"])
    print("gaussian sample ->", label)

    w = ws.gen_wstar({"total_points": 100000, "nonzero_points": 2000, "seed": 42})
    assert len(w) == 100000 and sum(1 for v in w if v != 0.0) <= 2000

    sweep = ws.regime_sweep({"total_points": 200000, "nonzero_points": 4000, "seed": 42})
    print("sweep labels:", [r["shape"] for r in sweep["reports"]])

    base = [0.0, 1.0, 2.0, 3.0]
    merged = ws.merge_arrays(base, [[0.1, 1.2, 2.0, 3.3], [-0.2, 1.1, 2.4, 2.9]], t=1e9, mode="outlier")
    avg = ws.merge_arrays(base, [[0.1, 1.2, 2.0, 3.3], [-0.2, 1.1, 2.4, 2.9]], mode="average")
    assert all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(merged, avg)), (merged, avg)

    with tempfile.TemporaryDirectory() as d:
        paths = []
        for i, off in enumerate([0.0, 0.01, -0.02]):
            p = os.path.join(d, f"m{i}.safetensors")
            ws.save_tensors(p, {"layer.weight": ([2, 3], [v + off for v in range(6)])})
            paths.append(p)
        ck = ws.Checkpoint(paths[0])
        assert ck.names() == ["layer.weight"] and len(ck) == 1
        assert ck.load("layer.weight") == [float(v) for v in range(6)]
        rows = ck.inspect(sigma_k=None)
        assert rows[0]["stats"]["count"] == 6
        out = os.path.join(d, "merged.safetensors")
        report = ws.merge_files(paths[0], paths[1:], out, t=2.0)
        assert report[0]["name"] == "layer.weight"
        assert len(ws.Checkpoint(out).load("layer.weight")) == 6

    delta = ws.make_delta(3, 4, seed=7)
    g = [[1.0] * 4 for _ in range(3)]
    assert math.isclose(ws.grad_s(g, delta), sum(map(sum, delta)), rel_tol=1e-12)

    r = ws.toy_train({"sigma_true": 0.3, "seed": 0})
    assert r["converged"] and abs(r["s_learned"] - 0.3) < 1e-3, r
    assert math.isclose(ws.closed_form_s({"sigma_true": 0.3}), 0.3, abs_tol=1e-9)

    rep = ws.delta_sigma_report({"a": [0.0, 1.0, -1.0]}, {"a": [0.0, 2.0, -2.0]})
    assert rep["mean_abs_diff"] > 0
    trend = ws.depth_trend({i: [(-1) ** k * (i + 1) * 0.1 for k in range(10)] for i in range(6)})
    assert math.isclose(trend["spearman_rho"], 1.0)

    print("smoke test ok, version", ws.__version__)


if __name__ == "__main__":
    main()

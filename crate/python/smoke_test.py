"""Smoke test for the twinbranch_py extension.

Build first, either with maturin (`maturin develop -m crates/py/Cargo.toml`)
or with cargo:

    cargo build --release -p twinbranch-py --features extension-module

In the cargo case this script loads target/release/libtwinbranch_py.so
directly, or the path in TWINBRANCH_PY_LIB.
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import twinbranch_py

        return twinbranch_py
    except ImportError:
        pass
    lib = Path(os.environ.get("TWINBRANCH_PY_LIB", ROOT / "target" / "release" / "libtwinbranch_py.so"))
    if not lib.exists():
        sys.exit(f"extension not found at {lib}; build it first")
    loader = importlib.machinery.ExtensionFileLoader("twinbranch_py", str(lib))
    spec = importlib.util.spec_from_file_location("twinbranch_py", lib, loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    tb = load()

    x = tb.Tensor.uniform([3, 6, 5], seed=1)
    a = tb.Tensor.uniform([3, 6, 5], seed=2)
    b = tb.Tensor.uniform([3, 6, 5], seed=3)
    w = tb.Tensor.uniform([3, 3, 3, 3], seed=4)
    fast = tb.dr1conv(x, a, b, w)
    slow = tb.dense_dynamic_conv(x, a, b, w)
    assert fast.shape == [3, 6, 5]
    assert fast.max_abs_diff(slow) < 1e-10

    ones = tb.Tensor.ones([4])
    wl = tb.Tensor.uniform([3, 4], seed=5)
    xl = tb.Tensor.uniform([4], seed=6)
    y = tb.dr1_linear(wl, xl, ones, tb.Tensor.ones([3]))
    want = [sum(wl.tolist()[4 * i + j] * xl.tolist()[j] for j in range(4)) for i in range(3)]
    assert max(abs(p - q) for p, q in zip(y.tolist(), want)) < 1e-12

    k = tb.CameraIntrinsics(720.0, 720.0, 640.0, 360.0)
    p = [1.5, -0.3, 20.0]
    u, v = k.project(p)
    back = k.backproject((u, v), p[2])
    assert max(abs(s - t) for s, t in zip(back, p)) < 1e-10
    s, x0, y0 = 0.75, 40.0, 12.0
    u2, v2 = k.resized_and_cropped(s, x0, y0).project(p)
    assert abs(u2 - (s * u - x0)) < 1e-9 and abs(v2 - (s * v - y0)) < 1e-9

    box = tb.Box3D([1.0, 1.2, 15.0], [1.5, 1.6, 4.0], 0.3)
    assert len(box.corners()) == 8
    alpha = box.yaw - math.atan2(box.center[0], box.center[2])
    assert box.corner_terms(box.center, box.dims, alpha) == (0.0, 0.0, 0.0)

    assert tb.nds(1.0, [0.0] * 5) == 1.0
    assert abs(tb.nds(0.4, [0.5, 0.2, 0.1, 0.3, 0.0]) - 0.59) < 1e-12
    gt = [float(i % 7 + 1) for i in range(50)]
    m = tb.depth_metrics([1.3 * g for g in gt], gt)
    assert abs(m["abs_rel"] - 0.3) < 1e-12 and m["delta1"] == 0.0
    cls = [0] * 8 + [1] * 8
    inst = [0] * 16
    assert tb.panoptic_quality(4, 4, (cls, inst), (cls, inst))["pq"] == 1.0
    assert tb.total_loss({"dim": 1.0}) == 0.4 * 2.0

    assert tb.scene_bytes(3) == tb.scene_bytes(3)
    report = json.loads(tb.train("seg", steps=3, seed=1, config_json='{"scenes": 1}'))
    assert report["steps_completed"] == 3
    assert all(math.isfinite(r["total"]) for r in report["trace"])

    ok, rep = tb.verify([1, 8])
    assert ok and json.loads(rep)["passed"]
    flipped, _ = tb.verify([1], flip_dr1conv_sign=True)
    assert not flipped

    bench = json.loads(tb.bench(c=4, h=8, w=8, kernel=3, repeats=1))
    assert [r["name"] for r in bench["rows"]] == ["dr1conv", "oracle_dense_dynamic_conv"]

    print("python smoke test passed")


if __name__ == "__main__":
    main()

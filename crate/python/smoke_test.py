#!/usr/bin/env python3
"""End-to-end smoke test for the caustic_py extension module.

Builds nothing itself: run `cargo build -p caustic-py` first, then
`python3 python/smoke_test.py`. Exercises the in-memory API (render,
metrics, objectives with gradients) and one file-based design run at toy
scale, finishing in a few seconds.
"""

import math
import shutil
import struct
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_extension():
    candidates = [
        REPO / "target" / "debug" / "libcaustic_py.so",
        REPO / "target" / "release" / "libcaustic_py.so",
    ]
    for built in candidates:
        if built.exists():
            stage = Path(tempfile.mkdtemp(prefix="caustic_py_"))
            shutil.copy2(built, stage / "caustic_py.so")
            sys.path.insert(0, str(stage))
            import caustic_py

            return caustic_py
    sys.exit(f"extension not built; run `cargo build -p caustic-py` (looked in {candidates})")


cp = import_extension()

TOY_SCENE = """
[scene]
b = 1.0
front_z = 120.0
plane_z = 150.0
lens_width = 10.0
lens_height = 10.0
grid_w = 9
grid_h = 9
thickness = 1.0
refractive_index = 1.49

[image]
width = 9.9
height = 9.9
res_w = 24
res_h = 24
gamma = 2.2
"""


def write_pgm(path, res_w, res_h, values):
    # 8-bit P5, top raster row = top of the plane (last row of `values`).
    rows = [values[v * res_w : (v + 1) * res_w] for v in range(res_h)]
    body = bytearray()
    for row in reversed(rows):
        body.extend(int(v * 255.0 + 0.5) for v in row)
    path.write_bytes(b"P5\n%d %d\n255\n" % (res_w, res_h) + bytes(body))


def check(label, ok, detail=""):
    print(f"  {'ok' if ok else 'FAIL'}  {label}{'  ' + detail if detail else ''}")
    if not ok:
        sys.exit(1)


print(f"caustic_py {cp.__version__}")

# Metrics agree with the hand fixtures.
mae, psnr = cp.metrics([0.3] * 16, [0.2] * 16, 4, 4)
check("metrics uniform-0.1 fixture", abs(mae - 0.1) < 1e-12 and abs(psnr - 20.0) < 1e-9)
mae, psnr = cp.metrics([0.5] * 16, [0.5] * 16, 4, 4)
check("metrics identical images", mae == 0.0 and math.isinf(psnr))

# A flat-lens render books all emitted flux and stays normalized.
w, h, gray, report = cp.render(TOY_SCENE, [(0.1, -0.05, 1.0)])
check(
    "render shape and bounds",
    w == 24 and h == 24 and len(gray) == 576 and all(0.0 <= g <= 1.0 for g in gray),
)
check(
    "render flux bookkeeping",
    report["emitted"] > 0.0 and report["escaped"] >= 0.0 and report["tir"] == 0,
    f"emitted {report['emitted']:.3e}",
)

# Scaling every intensity by 8 leaves the normalized image bitwise intact.
_, _, gray8, _ = cp.render(TOY_SCENE, [(0.1, -0.05, 8.0)])
check("intensity scaling invariance", gray == gray8)

# Objective gradients match central finite differences, probed away from
# the flat-lens fixed point so the gradient is not already zero.
flat = cp.render(TOY_SCENE, [(0.0, 0.0, 1.0)])[2]
heights0 = [121.0 + 0.02 * math.sin(1.7 * k) for k in range(81)]
design_energy, grad = cp.design_objective(TOY_SCENE, [(0.0, 0.0, 1.0)], flat, heights0)
check(
    "design objective finite",
    math.isfinite(design_energy) and design_energy > 0.0 and len(grad) == 81,
)
step = 1e-6
worst = 0.0
for i in (0, 40, 80):
    hp, hm = list(heights0), list(heights0)
    hp[i] += step
    hm[i] -= step
    ep, _ = cp.design_objective(TOY_SCENE, [(0.0, 0.0, 1.0)], flat, hp)
    em, _ = cp.design_objective(TOY_SCENE, [(0.0, 0.0, 1.0)], flat, hm)
    fd = (ep - em) / (2 * step)
    worst = max(worst, abs(grad[i] - fd) / max(abs(fd), 1e-9))
check("design gradient vs finite differences", worst < 1e-4, f"worst rel err {worst:.2e}")

x = [0.05, -0.02, 0.7, -0.03, 0.04, 0.3]
energy, grad = cp.fit_objective(TOY_SCENE, [([121.0] * 81, flat)], x, "contracted")
check("fit objective finite", math.isfinite(energy) and len(grad) == 6)

# scipy can drive the design objective directly.
try:
    import numpy as np
    from scipy.optimize import minimize

    fun = lambda z: cp.design_objective(TOY_SCENE, [(0.0, 0.0, 1.0)], flat, list(z))
    res = minimize(fun, np.array(heights0), jac=True, method="L-BFGS-B", options={"maxiter": 3})
    check("scipy drives the design objective", res.fun < design_energy)
except ImportError:
    print("  skip scipy interop (scipy not installed)")

# File-based design run emits the same artifacts as the CLI.
workdir = Path(tempfile.mkdtemp(prefix="caustic_smoke_"))
out = workdir / "out"
write_pgm(workdir / "target.pgm", 24, 24, flat)
(workdir / "source_table.txt").write_text("1 1.0\n0.0 0.0 1.0\n")
(workdir / "design.toml").write_text(
    TOY_SCENE
    + f"""
[solver]
max_iters = 3

[paths]
output_dir = "{out}"
source_table = "{workdir / 'source_table.txt'}"
target = "{workdir / 'target.pgm'}"
"""
)
result = cp.run_design(str(workdir / "design.toml"))
check(
    "run_design completes",
    result["exit_code"] in (0, 2) and result["energy"] <= result["initial_energy"],
    f"stop {result['stop']} after {result['iterations']} iters",
)
expected = ["config.toml", "lens.obj", "trace.csv", "rendered.pgm", "report.txt"]
check("run_design artifacts", all((out / f).exists() for f in expected))

print("smoke test passed")

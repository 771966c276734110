"""Smoke test for the `gaze` Python extension.

Build first, then run from the repository root:

    cargo build -p gaze-py -p gaze-cli
    python3 python/smoke_test.py

The script imports an installed `gaze` module if there is one, otherwise it
loads target/debug/libgaze.so (or the release build). When the `gaze` CLI
binary is next to it, a tiny model is trained to exercise `Predictor`.
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import gaze  # noqa: F401

        return sys.modules["gaze"], None
    except ImportError:
        pass
    for profile in ("debug", "release"):
        target = ROOT / "target" / profile
        for name in ("libgaze.so", "libgaze.dylib", "gaze.dll"):
            lib = target / name
            if lib.exists():
                loader = importlib.machinery.ExtensionFileLoader("gaze", str(lib))
                spec = importlib.util.spec_from_loader("gaze", loader)
                mod = importlib.util.module_from_spec(spec)
                loader.exec_module(mod)
                sys.modules["gaze"] = mod
                return mod, target
    sys.exit("gaze extension not found; run `cargo build -p gaze-py` first")


def check(name, ok):
    print(f"{'PASS' if ok else 'FAIL'} {name}")
    return ok


def main():
    gaze, target = load_module()
    results = []

    results.append(check("metric (3,4) -> 5", gaze.euclidean_error((3.0, 4.0), (0.0, 0.0)) == 5.0))
    results.append(check("mean error", abs(gaze.mean_error([(0, 0), (0, 0)], [(1, 0), (0, 3)]) - 2.0) < 1e-12))

    lrs = [gaze.cyclic_lr(t) for t in (0.0, 2.0, 4.0)]
    results.append(check("cyclic schedule", all(abs(a - b) < 1e-15 for a, b in zip(lrs, (5e-4, 1.75e-3, 3e-3)))))
    results.append(check("step decay", gaze.step_decay_lr(0) == 1e-3 and gaze.step_decay_lr(29) == 1e-4))
    try:
        gaze.step_decay_lr(30)
        results.append(check("step decay range error", False))
    except gaze.GazeError:
        results.append(check("step decay range error", True))

    # A 4x2 rectangle turned by 30 degrees.
    c, s = math.cos(math.radians(30)), math.sin(math.radians(30))
    corners = [(x * c - y * s, x * s + y * c) for x, y in ((-2, -1), (2, -1), (2, 1), (-2, 1))]
    cx, cy, w, h, angle = gaze.min_area_rect(corners)
    results.append(check("min area rect", abs(w * h - 8.0) < 1e-9 and abs(cx) < 1e-9 and abs(cy) < 1e-9))

    grid = gaze.face_grid(100, 100, (50.0, 50.0, 40.0, 40.0, 0.0), 10)
    results.append(check("face grid", len(grid) == 100 and sum(grid) == 16))

    worst = max(
        abs(a - b)
        for rgb in ((0, 0, 0), (255, 255, 255), (12, 200, 77), (255, 0, 128))
        for a, b in zip(gaze.from_ycbcr(gaze.to_ycbcr(rgb)), rgb)
    )
    results.append(check("ycbcr round trip", worst <= 1))

    toml = gaze.preset_toml(11, "toy")
    results.append(check("preset toml", "preset = 11" in toml and "resnet18_style" in toml))
    results.append(check("describe preset", "ResNet18" in gaze.describe_preset(11)))

    cam = gaze.gradcam_pp([[[1.0, 2.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]],
                          [[[1.0, 1.0], [1.0, 1.0]], [[-1.0, 2.0], [0.0, 0.0]]])
    expect = [[2 / 3, 5 / 3], [1 / 3, 2 / 3]]
    results.append(check("grad-cam++", all(abs(a - b) < 1e-9 for r, e in zip(cam, expect) for a, b in zip(r, e))))

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "synth"
        n = gaze.synth_generate(str(data), n_subjects=4, frames_per_subject=3, seed=1)
        results.append(check("synthetic data", n == 12 and (data / "synth_truth.json").exists()))

        cli = target / "gaze" if target else None
        if cli and cli.exists():
            env = dict(os.environ, GAZE_LOG="warn")
            subprocess.run(
                [str(cli), "train", "--preset", "13", "--profile", "toy", "--data", str(data),
                 "--out", str(Path(tmp) / "run"), "--epochs", "1", "--split", "relaxed"],
                check=True, env=env,
            )
            p = gaze.Predictor(str(Path(tmp) / "run" / "last.safetensors"))
            frame = data / "00000" / "frames" / "00000.png"
            lm = json.loads((data / "00000" / "landmarks" / "00000.json").read_text())
            x, y = p.predict(frame.read_bytes(), [tuple(q) for q in lm])
            info = json.loads(p.info())
            results.append(check("predictor", math.isfinite(x) and math.isfinite(y)
                                 and info["fingerprint"] == p.fingerprint))
            try:
                p.predict(b"not an image", lm)
                results.append(check("predictor rejects junk", False))
            except gaze.GazeError:
                results.append(check("predictor rejects junk", True))
        else:
            print("SKIP predictor (gaze CLI binary not built)")

    sys.exit(0 if all(results) else 1)


if __name__ == "__main__":
    main()

"""Smoke test for the `ardir` extension module.

Build the library first:

    cargo build -p ardir-python --release

then run `python3 python/smoke_test.py`. The script copies the built
shared library next to a temp dir under the module name and imports it.
"""

import glob
import json
import math
import os
import shutil
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    candidates = []
    for profile in ("release", "debug"):
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libardir.so"))
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libardir.dylib"))
    if not candidates:
        sys.exit("libardir not found; run `cargo build -p ardir-python --release` first")
    lib = max(candidates, key=os.path.getmtime)
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "ardir.so"))
    sys.path.insert(0, tmp)
    import ardir

    return ardir


def main():
    ardir = load_module()

    data = ardir.toy_dataset(classes=4, size=8, train=64, test=32, seed=3)
    x = np.asarray(data["test"]["images"]).reshape(data["test"]["shape"])
    y = data["test"]["labels"]
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert data["hash"] == ardir.toy_dataset(classes=4, size=8, train=64, test=32, seed=3)["hash"]

    model = ardir.SmallCnn([4, 8, 8], [True, True, False], 4, seed=1)
    assert model.num_params > 0
    assert [s[0] for s in model.tap_shapes()] == [4, 8, 8]
    shape = x.shape
    flat = x.ravel().tolist()

    logits = np.asarray(model.logits(flat, shape)).reshape(shape[0], 4)
    assert np.all(np.isfinite(logits))

    eps = 0.1
    adv = np.asarray(ardir.pgd(model, flat, shape, y, eps, 0.025, 5, seed=7)).reshape(shape)
    assert np.abs(adv - x).max() <= eps and adv.min() >= 0.0 and adv.max() <= 1.0
    fg = np.asarray(ardir.fgsm(model, flat, shape, y, eps)).reshape(shape)
    assert np.abs(fg - x).max() <= eps

    p = ardir.softmax([1.0, 2.0, 3.0], 2.0)
    assert abs(sum(p) - 1.0) < 1e-12
    assert ardir.kl_divergence(p, p) == 0.0

    d = ardir.lpips_distance([3.0, 1.0], [1.0, 1.0], (1, 1, 2, 1))
    assert abs(d[0] - 0.25) < 1e-12

    teacher = ardir.SmallCnn([4, 8, 8], [True, True, False], 4, seed=2)
    terms = ardir.ardir_loss(model, teacher, flat, adv.ravel().tolist(), shape, y, beta=0.6)
    assert math.isfinite(terms["total"]) and len(terms["grad"]) == model.num_params
    assert ardir.model_lpips(model, model, flat, flat, shape) == [0.0] * shape[0]

    gap = ardir.gap_report(0.8528, 0.8094, 0.5927, 0.5229)
    assert abs(gap["Clean"]["gap"] - 0.0434) < 1e-4
    assert abs(gap["PGD"]["ratio"] - 0.8822) < 1e-4

    acc = ardir.evaluate(model, flat, shape, y, eps, 0.025, 5, attacks=["fgsm", "pgd"])
    assert 0.0 <= acc["PGD"] <= 1.0 and 0.0 <= acc["clean"] <= 1.0

    config = ardir.preset("toy-sat")
    out = tempfile.mkdtemp()
    config = config.replace('output_dir = "runs/toy-sat"', f'output_dir = "{out}"')
    config = config.replace("epochs = 30", "epochs = 1").replace("train = 1000", "train = 64")
    config = config.replace("test = 2000", "test = 32").replace('final_attacks = ["fgsm", "pgd", "pgd-mr"]', 'final_attacks = ["pgd"]')
    manifest = json.loads(ardir.train(config, 1))
    assert len(manifest["metrics"]) == 1 and manifest["best_epoch"] == 0

    print("ardir python smoke test: ok")


if __name__ == "__main__":
    main()

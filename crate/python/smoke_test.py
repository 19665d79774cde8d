"""Smoke test for the pgat_py extension module.

Uses an installed `pgat_py` if there is one, otherwise the library built by
`cargo build -p pgat-py --features extension-module --release`.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys


def load():
    try:
        import pgat_py

        return pgat_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libpgat_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("pgat_py", str(lib))
            spec = importlib.util.spec_from_file_location("pgat_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("pgat_py not found; build it with cargo build -p pgat-py --features extension-module --release")


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def main():
    pg = load()

    _, qt = pg.prompt_quality([0.2, 0.4, 0.6])
    assert close(qt, [0.2, 0.0, -0.2]), qt
    assert close(pg.quality_weights([0.0, math.log(2.0)], 1.0), [2 / 3, 1 / 3])
    w = pg.quality_weights([0.2, 0.4, 0.6], 1.0)
    assert abs(pg.group_loss(qt, w) - (-0.08)) <= 1e-9
    assert pg.consistency([[1.0, 2.0], [1.0, 2.0]]) == 0.0
    assert pg.dice([0, 0], [0, 0]) == 1.0
    assert len(pg.encode_prompt("all nuclei")) == 32
    assert pg.grad_check_trials(10) <= 1e-5
    try:
        pg.quality_weights([0.1, 0.2], 0.0)
        raise AssertionError("tau = 0 accepted")
    except ValueError:
        pass

    scene = pg.Scene(size=32, seed=3)
    image = scene.image()
    assert len(image) == 32 * 32 and 0.0 <= min(image) and max(image) <= 1.0
    t1 = scene.target("T1")
    for c in range(3):
        t2 = scene.target("T2", c)
        assert all(b <= a for a, b in zip(t1, t2))

    config = json.loads(pg.Model(size=32, channels=4).config_json())
    train = {
        "lr": 3e-3, "batch_size": 1, "epochs": 1, "k": 3, "seed": 0,
        "loss": {"tau": 1.0, "lambda": 0.1, "beta": 0.1, "dice_eps": 1.0,
                 "group_grad_mode": "w-differentiable", "cons_norm": "mean-per-pixel",
                 "consistency": "stop-grad-reference"},
        "model": config,
        "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01},
        "tasks": "t1", "tier_policy": {"kind": "mixed"}, "dataset": None, "checkpoint_every": 0,
    }
    model, summary = pg.train(4, json.dumps(train))
    summary = json.loads(summary)
    assert summary["steps"] == 4 and math.isfinite(summary["final_loss"])
    mask = model.segment(image, "all nuclei")
    assert len(mask) == 32 * 32 and set(mask) <= {0, 1}
    report = json.loads(pg.evaluate(model, 2))
    assert {t["tier"] for t in report["tiers"]} == {"low", "medium", "high"}
    print("python smoke test ok:", model.num_params, "parameters, final loss", round(summary["final_loss"], 4))


if __name__ == "__main__":
    main()

"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py). The desk-scale criteria (7-10) simulate a 10-day
32x32 dataset and train through the command-line entry point, so this file
takes tens of minutes on one core.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from pvnowcast.cli import EXIT_OK, main
from pvnowcast.datapipe import (
    fit_alpha,
    hdr_merge,
    inverse_log_transform,
    load_dataset,
    log_transform,
    make_samples,
    power_to_q,
    sky_intensity,
    solar_position,
    solid_angles,
    split_days,
    train_power,
)
from pvnowcast.evaluation import evaluate, skill_score
from pvnowcast.gradsuite import run_suite, summarize, tiny_batch
from pvnowcast.models import LossWeights, ModelConfig, batch_loss, build_model, tiny_config
from pvnowcast.tensor import backward, precision

RESULTS = {}

# Desk training settings shared by every desk run. The learning rates are
# below the library defaults: with an L1 loss Adam moves each weight by
# about lr per step, and at 3e-4 the 1024-wide image predictor jitters its
# output by more than the typical one-minute change (see README).
DESK_CONFIG = {
    "schema_version": 1,
    "epochs": 20,
    "batch_size": 16,
    "lr_encoder": 1e-4,
    "lr_other": 1e-5,
    "seed": 0,
    "precision": "f32",
}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    return ok


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t = time.perf_counter()
    assert main(["--out", str(root), "--seed", "0", "simulate", "--days", "10", "--resolution", "32"]) == EXIT_OK
    assert main(["--out", str(root), "preprocess", "--dataset", str(root / "dataset")]) == EXIT_OK
    cfg = root / "desk.json"
    cfg.write_text(json.dumps(DESK_CONFIG))
    print(f"desk dataset ready in {time.perf_counter() - t:.1f}s")
    return {"root": root, "config": cfg, "cache": root / "preprocessed", "runs": {}}


def desk_run(desk, name, *flags, root=None):
    """Train then evaluate on the test split through the CLI; cached per name."""
    if name in desk["runs"] and root is None:
        return desk["runs"][name]
    out = root or desk["root"]
    base = ["--config", str(desk["config"]), "--out", str(out)]
    t = time.perf_counter()
    assert main([*base, "train", "--dataset", str(desk["cache"]), "--name", name, *flags]) == EXIT_OK
    seconds = time.perf_counter() - t
    ck = out / "checkpoints" / name / "best"
    assert main([*base, "evaluate", "--checkpoint", str(ck), "--dataset", str(desk["cache"])]) == EXIT_OK
    run = {
        "seconds": seconds,
        "checkpoint": ck,
        "report": json.loads((out / "reports" / f"{name}_test.json").read_text()),
        "train": json.loads((out / "reports" / f"{name}_train.json").read_text()),
    }
    if root is None:
        desk["runs"][name] = run
    return run


def ss(run, cls="all"):
    c = run["report"]["classes"].get(cls)
    return None if c is None else c["ss_mae"]


# 1


def test_c01_skill_score_oracle():
    a = skill_score(60.7, 81.6)
    b = skill_score(140.5, 177.5)
    ok = abs(a - 25.5) <= 0.2 and abs(b - 20.8) <= 0.2
    record(1, ok, f"SS-MAE {a:.2f}% (ref 25.5), SS-RMSE {b:.2f}% (ref 20.8)")
    assert ok


# 2


def test_c02_gradient_suite():
    t = time.perf_counter()
    rows = summarize(run_suite(range(20)))
    seconds = time.perf_counter() - t
    failed = [r for r in rows if not r[4]]
    loose_ok = all(r[3] <= 1e-4 for r in rows)
    tight = [r for r in rows if r[3] <= 1e-6]
    ok = not failed and loose_ok and tight and seconds < 300
    worst = max(rows, key=lambda r: r[2] / r[3])
    probes, skipped = sum(r[5] for r in rows), sum(r[6] for r in rows)
    record(
        2,
        ok,
        f"{len(rows) - len(failed)}/{len(rows)} checks x 20 seeds in {seconds:.0f}s; "
        f"{len(tight)} at 1e-6; worst {worst[0]} {worst[2]:.1e} (limit {worst[3]:.0e}); "
        f"{probes} probes, {skipped} skipped at kinks",
    )
    assert ok, failed


# 3


def test_c03_persistence_equivalence(desk):
    _, records = load_dataset(desk["cache"])
    parts = split_days([r.day for r in records], seed=0)
    by_day = {r.day: r for r in records}
    alpha = fit_alpha(train_power([by_day[d] for d in parts["train"]]))
    test = make_samples([by_day[d] for d in parts["test"]], alpha)
    every = make_samples(records, alpha)
    worst = 0.0
    for kind in ("mlp", "cnn", "lstm", "lstm_full"):
        model = build_model(kind, ModelConfig(resolution=32), seed=3)
        for samples in (test, every.subset(np.arange(0, len(every), 7))):
            report, _ = evaluate(model, samples)
            for m in report.classes.values():
                worst = max(worst, abs(m.ss_mae), abs(m.ss_rmse))
    ok = worst == 0.0
    record(3, ok, f"4 kinds x 2 sample sets, max |SS| = {worst}")
    assert ok


# 4


def test_c04_transform_integrity(desk):
    p = np.geomspace(1.0, 2500.0, 200001)
    rel = float(np.max(np.abs(inverse_log_transform(log_transform(p)) - p) / p))
    _, records = load_dataset(desk["cache"])
    parts = split_days([r.day for r in records], seed=0)
    train_days = [r for r in records if r.day in parts["train"]]
    alpha = fit_alpha(train_power(train_days))
    q = power_to_q(train_power(train_days), alpha)
    ok = rel < 1e-6 and q.min() >= 0 and q.max() <= 1 and math.isclose(q.max(), 1.0)
    record(4, ok, f"round-trip max rel. error {rel:.1e}; training q in [{q.min():.3f}, {q.max():.3f}]")
    assert ok


# 5


def test_c05_geometry_oracles():
    sums = {h: solid_angles(h).sum() / (2 * np.pi) for h in (64, 128, 256)}
    s_uniform = sky_intensity(np.ones((64, 64)), solid_angles(64))
    times = np.array([11.0, 88.0, 176.0, 264.0])
    r = np.random.default_rng(0).uniform(1e-4, 0.99 / 264, (8, 8))
    merged = hdr_merge(times[:, None, None] * r[None])
    hdr_err = float(np.max(np.abs(merged - r)))
    ok = all(abs(v - 1) <= 0.01 for v in sums.values()) and abs(s_uniform - 1) <= 0.01 and hdr_err <= 1e-6
    record(
        5,
        ok,
        "sum(omega)/2pi " + ", ".join(f"H={h}: {v:.4f}" for h, v in sums.items())
        + f"; uniform s = {s_uniform:.4f}; HDR max error {hdr_err:.1e}",
    )
    assert ok


# 6


def _max_elevation(day_start, lat, lon):
    ts = day_start + np.arange(0, 86400, 30)
    pos = solar_position(ts, lat, lon)
    i = int(np.argmax(pos[:, 1]))
    return int(ts[i]), np.degrees(pos[i, 1])


def test_c06_solar_position():
    equinox = 1616198400  # 2021-03-20T00:00Z
    noon, el = _max_elevation(equinox, 0.0, 0.0)
    dawn = solar_position(noon - 6 * 3600, 0.0, 0.0)
    dawn_el, dawn_az = np.degrees(dawn.elevation), np.degrees(dawn.azimuth)
    _, kyoto = _max_elevation(1624233600 - 9 * 3600, 35.03, 135.78)  # 2021-06-21 local
    kyoto_ref = 90 - abs(35.03 - 23.44)
    errs = [abs(el - 90), abs(dawn_el), abs(dawn_az - 90), abs(kyoto - kyoto_ref)]
    ok = max(errs) <= 1.0
    record(
        6,
        ok,
        f"equinox noon el {el:.2f}; 06:00 el {dawn_el:.2f} az {dawn_az:.2f}; "
        f"Kyoto solstice noon el {kyoto:.2f} (ref {kyoto_ref:.2f})",
    )
    assert ok


# 7


def test_c07_desk_learning(desk):
    lstm = desk_run(desk, "lstm_x1", "--kind", "lstm", "--horizon", "1")
    mlp = desk_run(desk, "mlp_x1", "--kind", "mlp", "--horizon", "1")
    # context only: the MLP under the library default learning rates
    mlp_default = desk_run(desk, "mlp_x1_default_lr", "--kind", "mlp", "--lr-encoder", "1e-3", "--lr-other", "3e-4")
    a, b = ss(lstm, "partly"), ss(mlp, "partly")
    ok = a is not None and b is not None and a >= 10.0 and a > b
    record(
        7,
        ok,
        f"partly-cloudy test SS-MAE: LSTM {a:.2f}% (best epoch {lstm['train']['best_epoch']}, "
        f"{lstm['seconds'] / 60:.1f} min on 1 core), MLP {b:.2f}%; need LSTM >= 10 and > MLP "
        f"[MLP at default lr {ss(mlp_default, 'partly'):.2f}%, not gating]",
    )
    assert ok


# 8


def test_c08_multitask_training(desk):
    run = desk_run(desk, "lstm_full_x1", "--kind", "lstm_full", "--horizon", "1", "--epochs", "5")
    hist = run["train"]["history"]
    first, fifth = hist[0]["terms"], hist[4]["terms"]
    names = ["dp", "dtheta", "ds", "p", "theta", "image"]
    finite = all(math.isfinite(h["terms"][k]) for h in hist for k in names)
    decreasing = {k: fifth[k] < first[k] for k in names}
    cfg = tiny_config("lstm")
    with precision("f64"):
        plain = build_model("lstm", cfg, seed=11)
        full = build_model("lstm_full", cfg, seed=11)
        for p in plain.parameters() + full.parameters():
            if not np.any(p.data):
                p.data = np.random.default_rng(p.size).normal(0, 0.3, p.shape)
        batch = tiny_batch(full, np.random.default_rng(5))
        lp, _ = batch_loss(plain, batch)
        lf, _ = batch_loss(full, batch, LossWeights.zeros())
        backward(lp)
        backward(lf)
    grads = dict(full.named_parameters())
    bit_equal = all(grads[n].grad.tobytes() == p.grad.tobytes() for n, p in plain.named_parameters())
    ok = finite and all(decreasing.values()) and bit_equal
    trend = ", ".join(f"{k} {first[k]:.4g}->{fifth[k]:.4g}" for k in names)
    record(8, ok, f"finite={finite}; epoch 1->5: {trend}; lambda=0 grads bit-equal={bit_equal}")
    assert ok


# 9


def test_c09_horizon_degradation(desk):
    one = desk_run(desk, "lstm_x1", "--kind", "lstm", "--horizon", "1")
    ten = desk_run(desk, "lstm_x10", "--kind", "lstm", "--horizon", "10")
    a, b = ss(one), ss(ten)
    ok = b < a
    record(9, ok, f"test SS-MAE (all classes): 1-min {a:.2f}%, 10-min {b:.2f}%")
    assert ok


# 10


def test_c10_determinism(desk, tmp_path):
    files = {}
    for rep in ("a", "b"):
        out = tmp_path / rep
        run = desk_run(desk, "det", "--kind", "lstm", "--epochs", "1", root=out)
        ck = run["checkpoint"]
        files[rep] = {
            "manifest": (ck / "manifest.json").read_bytes(),
            "tensors": (ck / "tensors.bin").read_bytes(),
            "metrics": (out / "reports" / "det_test.json").read_bytes(),
        }
    same = {k: files["a"][k] == files["b"][k] for k in files["a"]}
    ok = all(same.values())
    size = len(files["a"]["tensors"])
    record(10, ok, f"two LSTM runs, seed 0, 1 thread: identical {same} ({size} tensor bytes)")
    assert ok


def criterion_lines():
    lines = []
    for n in range(1, 11):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            lines.append(f"criterion {n:2d}: NOT RUN")
    return lines


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

"""Acceptance criteria, one test per criterion.

Each test prints (and records for the terminal summary) a single line
``criterion N: PASS|FAIL <detail>`` before asserting.
"""

import math
import time

import numpy as np
import pytest

from cfcm.cli import main
from cfcm.convlstm import ConvLSTMCell, LSTMState, cell_step, gate_activations
from cfcm.data import SynthConfig, generate_synthetic
from cfcm.decoder import ModelConfig, build_model
from cfcm.gradcheck import END_TO_END_TOL, PRIMITIVE_TOL, run_suites
from cfcm.layers import EVAL
from cfcm.metrics import evaluate_model, surface_distances, surface_distances_bruteforce
from cfcm.tensor import Tensor
from cfcm.training import TrainConfig, evaluate_dice, fit, load_checkpoint, save_checkpoint

from .conftest import ACCEPTANCE_LINES

# final test dice of the seed-7 binary toy run, recorded when the fixture was first computed
BINARY_FIXTURE_DICE = 0.9189
FIXTURE_TOL = 0.02
TOY_BUDGET_S = 15 * 60


def report(n, passed, detail):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def toy_run(num_classes, decoder):
    ds = generate_synthetic(SynthConfig(count=320, image_size=64, num_classes=num_classes, seed=7))
    train, test = ds.subset(range(256)), ds.subset(range(256, 320))
    cfg = TrainConfig(batch_size=16, learning_rate=1e-3, epochs=30, seed=7, num_classes=num_classes,
                      width_mult="1/8", hidden=4, decoder_kind=decoder, in_channels=ds.images.shape[1])
    start = time.perf_counter()
    result = fit(cfg, train, test)
    elapsed = time.perf_counter() - start
    return cfg, result, test, evaluate_dice(result.model, test), elapsed


@pytest.fixture(scope="module")
def binary_run():
    return toy_run(1, "cfcm")


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_suites()
    elapsed = time.perf_counter() - start
    worst = {name: err for name, err, _, _ in results}
    primitives_ok = all(err < PRIMITIVE_TOL for name, err in worst.items() if name != "cfcm")
    e2e_ok = worst["cfcm"] < END_TO_END_TOL
    passed = primitives_ok and e2e_ok and elapsed < 120
    prim = max(err for name, err in worst.items() if name != "cfcm")
    report(1, passed, f"max primitive err {prim:.2e} (<1e-4), end-to-end {worst['cfcm']:.2e} (<1e-3), "
                      f"{elapsed:.1f}s (<120s)")


def test_criterion_2_convlstm_identities():
    f64 = np.float64
    rng = np.random.default_rng(0)
    cell = ConvLSTMCell(2, 3, seed=1, dtype=f64)
    cell.gate_conv.weight.data[:] = 0.0
    cell.gate_conv.bias.data[:] = 0.0
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    gates = gate_activations(cell, x, LSTMState.zeros(2, 3, 4, 4, dtype=f64))
    zero_ok = all((gates[k].data == 0.5).all() for k in "ifo") and (gates["g"].data == 0.0).all()

    cell = ConvLSTMCell(2, 3, seed=2, dtype=f64)
    h = Tensor(rng.standard_normal((2, 3, 4, 4)))
    cell.gate_conv.bias.data[3:6] = -1e4
    a = cell_step(cell, x, LSTMState(h, Tensor(rng.standard_normal((2, 3, 4, 4)))))
    b = cell_step(cell, x, LSTMState(h, Tensor(rng.standard_normal((2, 3, 4, 4)) * 100)))
    forget_ok = np.array_equal(a.cell.data, b.cell.data) and np.array_equal(a.hidden.data, b.hidden.data)

    cell.gate_conv.bias.data[0:3] = -1e4
    cell.gate_conv.bias.data[3:6] = 1e4
    c = Tensor(rng.standard_normal((2, 3, 4, 4)) * 5)
    memory_ok = np.array_equal(cell_step(cell, x, LSTMState(h, c)).cell.data, c.data)
    report(2, zero_ok and forget_ok and memory_ok,
           f"zero-cell gates {zero_ok}, forced forget {forget_ok}, forced memory {memory_ok}")


def test_criterion_3_shape_ladder():
    bad = []
    for size in (64, 96, 128):
        for depth in (18, 34, 50):
            model = build_model(ModelConfig(depth=depth, width_mult="1/8"))
            x = Tensor(np.random.default_rng(size).random((1, 1, size, size)).astype(np.float32))
            taps = model.encoder(x, EVAL)
            ladder = [t.shape[2:] for t in taps]
            want = [(size // s, size // s) for s in (32, 16, 8, 4)]
            logits = model.decoder(taps, EVAL)
            if ladder != want or logits.shape[2:] != (size, size):
                bad.append((size, depth, ladder, logits.shape))
    report(3, not bad, f"9 size/depth combinations, mismatches: {bad or 'none'}")


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    mismatches = order_violations = 0
    for _ in range(200):
        h, w = rng.integers(1, 17, size=2)
        a = rng.random((h, w)) < rng.uniform(0.05, 0.7)
        b = rng.random((h, w)) < rng.uniform(0.05, 0.7)
        a[rng.integers(h), rng.integers(w)] = True
        b[rng.integers(h), rng.integers(w)] = True
        fast = surface_distances(a, b)
        mismatches += fast != surface_distances_bruteforce(a, b)
        order_violations += not (fast.mad <= fast.rms <= fast.hd)
    sq_a = np.zeros((8, 8), bool)
    sq_b = np.zeros((8, 8), bool)
    sq_a[1:4, 1:4] = True
    sq_b[2:5, 2:5] = True
    hd = surface_distances(sq_a, sq_b).hd
    passed = mismatches == 0 and order_violations == 0 and hd == math.sqrt(2)
    report(4, passed, f"{mismatches} oracle mismatches / 200, {order_violations} ordering violations, "
                      f"shifted-square hd {hd!r}")


@pytest.mark.slow
def test_criterion_5_binary_toy(binary_run):
    _, _, _, dice, elapsed = binary_run
    passed = dice >= 0.90 and abs(dice - BINARY_FIXTURE_DICE) <= FIXTURE_TOL and elapsed < TOY_BUDGET_S
    report(5, passed, f"test dice {dice:.4f} (>=0.90, fixture {BINARY_FIXTURE_DICE}±{FIXTURE_TOL}), "
                      f"{elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_three_class_toy():
    _, _, _, dice, elapsed = toy_run(3, "cfcm")
    report(6, dice >= 0.80 and elapsed < TOY_BUDGET_S, f"mean foreground dice {dice:.4f} (>=0.80), {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_skip_baselines():
    scores = {dec: toy_run(1, dec)[3] for dec in ("skip_sum", "skip_concat")}
    passed = all(v >= 0.85 for v in scores.values())
    report(7, passed, ", ".join(f"{k} dice {v:.4f}" for k, v in scores.items()) + " (>=0.85 each)")


def test_criterion_8_cli_determinism(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--count", "48", "--seed", "8"]) == 0
    argv = ["train", "--out-dir", str(tmp_path), "--epochs", "3", "--lr", "1e-3", "--hidden", "4"]
    names = ("model.ckpt", "train_log.csv")
    assert main(argv) == 0
    first = [(tmp_path / n).read_bytes() for n in names]
    assert main(argv) == 0
    second = [(tmp_path / n).read_bytes() for n in names]
    report(8, first == second, f"checkpoint identical {first[0] == second[0]}, log identical {first[1] == second[1]}")


def test_criterion_9_checkpoint_round_trip(binary_run, tmp_path):
    cfg, result, test, _, _ = binary_run
    before = evaluate_model(result.model, test).to_csv()
    path = tmp_path / "toy.ckpt"
    save_checkpoint(result.model, result.optimizer, cfg, path)
    after = evaluate_model(load_checkpoint(path), test).to_csv()
    report(9, before == after, f"report identical {before == after} ({len(before.splitlines())} CSV lines)")

"""Acceptance criteria 1-8; each test prints one PASS/FAIL line.

The desk-scale pretraining runs behind criteria 4 and 5 share one
module-scoped fixture and take most of the suite's wall time.
"""

import struct
import time

import numpy as np
import pytest

from otml.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from otml.config import Config
from otml.exceptions import FormatError
from otml.gradcheck import run_gradcheck
from otml.pgm import decode_pgm, encode_pgm
from otml.phantoms import as_arrays, gen_phantom_dataset
from otml.probe import compute_auc, linear_probe
from otml.simplex import exact_ot_oracle
from otml.trainer import build_model, collapse_report, pretrain, save_state
from otml.transport import TransportProblem, build_cost, build_discrepancy, sinkhorn

CASES = 200


@pytest.fixture
def verdict(acceptance_lines):
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        acceptance_lines.append(line)
        print(line)
        return passed

    return record


def random_marginal(rng, d):
    w = rng.dirichlet(np.ones(d))
    w = np.maximum(w, 1e-6)
    return w / w.sum()


# -- 1 ------------------------------------------------------------------------------
def test_criterion_1_oracle_equivalence(verdict):
    started = time.perf_counter()
    worst_gap, worst_marginal = 0.0, 0.0
    for trial in range(100):
        rng = np.random.default_rng([2024, trial])
        d = int(rng.integers(2, 7))
        cost = rng.uniform(0, 2, (d, d))
        mu, nu = random_marginal(rng, d), random_marginal(rng, d)
        exact = exact_ot_oracle(cost, mu, nu).cost
        result = sinkhorn(TransportProblem(cost, mu, nu, 1e-3), tol=1e-7, mode="detached")
        worst_gap = max(worst_gap, abs(result.cost - exact) / (1 + exact))
        worst_marginal = max(worst_marginal, result.marginal_error)
    elapsed = time.perf_counter() - started
    passed = worst_gap <= 1e-2 and worst_marginal <= 1e-6 and elapsed < 10
    detail = f"max gap/(1+cost)={worst_gap:.2e} <= 1e-2, max marginal L1={worst_marginal:.2e} <= 1e-6, {elapsed:.1f}s < 10s"
    assert verdict(1, passed, detail)


# -- 2 ------------------------------------------------------------------------------
def test_criterion_2_gradient_integrity(verdict):
    results = run_gradcheck(seed=0)
    ops = [r for r in results if r.kind != "end2end"]
    end = next(r for r in results if r.kind == "end2end")
    passed = all(r.passed for r in results)
    detail = (
        f"{len(ops)} op/composite cases worst {max(r.max_rel_error for r in ops):.2e} <= 1e-4, "
        f"end-to-end {end.max_rel_error:.2e} <= 1e-3"
    )
    assert verdict(2, passed, detail)


# -- 3 ------------------------------------------------------------------------------
def _problem(seed):
    rng = np.random.default_rng([77, seed])
    d = int(rng.integers(2, 7))
    cost = rng.uniform(0, 2, (d, d))
    return rng, cost, random_marginal(rng, d), random_marginal(rng, d), float(rng.choice([0.05, 0.1, 0.5]))


def test_criterion_3_feasibility_and_invariants(verdict):
    failures = {}

    def check(name, ok):
        failures[name] = failures.get(name, 0) + (not ok)

    worst_transpose = 0.0
    for seed in range(CASES):
        rng, cost, mu, nu, eps = _problem(seed)
        base = sinkhorn(TransportProblem(cost, mu, nu, eps), tol=1e-12, mode="detached")
        plan = base.plan.data
        check("nonnegativity", bool(np.all(plan >= 0)))
        check("feasibility", base.marginal_error <= 1e-9)

        shift = float(rng.uniform(-3, 3))
        moved = sinkhorn(TransportProblem(cost + shift, mu, nu, eps), tol=1e-12, mode="detached")
        check("shift", abs(moved.cost - (base.cost + shift)) <= 1e-8 and np.allclose(moved.plan.data, plan, atol=1e-9))

        swapped = sinkhorn(TransportProblem(cost.T, nu, mu, eps), tol=1e-13, mode="detached")
        gap = float(np.max(np.abs(swapped.plan.data.T - plan)))
        worst_transpose = max(worst_transpose, gap)
        check("transpose", gap <= 1e-8)

        d, hw = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        z_s, z_t = rng.standard_normal((d, hw)), rng.standard_normal((d, hw))
        c = build_discrepancy(z_s, z_t).data
        m = build_cost(c).data
        check("cosine bounds", bool(np.all(np.abs(c) <= 1) and np.all((m >= 0) & (m <= 2))))
        p, q = rng.permutation(d), rng.permutation(d)
        check("permutation", np.array_equal(build_discrepancy(z_s[p], z_t[q]).data, c[np.ix_(p, q)]))

    passed = not any(failures.values())
    summary = ", ".join(f"{name} {CASES - bad}/{CASES}" for name, bad in failures.items())
    assert verdict(3, passed, f"{summary}; worst transpose gap {worst_transpose:.1e} <= 1e-8")


# -- 4 and 5 ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def desk_runs():
    """Seed-matched 2000-step runs on 2000 four-class phantoms plus a random-init baseline."""
    train = as_arrays(gen_phantom_dataset(2000, num_classes=4, h=32, w=32, seed=1))
    test = as_arrays(gen_phantom_dataset(500, num_classes=4, h=32, w=32, seed=2))
    full = Config()
    ablated = full.with_overrides({"model.beta": "0", "model.eta": "0", "augment.enabled": "false"})
    started = time.perf_counter()
    run_a = pretrain(full, train[0])
    run_b = pretrain(ablated, train[0])
    elapsed = time.perf_counter() - started
    random_init = build_model(full)
    return {
        "train": train,
        "test": test,
        "models": {"A": run_a.model, "B": run_b.model, "random": random_init},
        "probes": {name: linear_probe(m, train, test) for name, m in
                   (("A", run_a.model), ("B", run_b.model), ("random", random_init))},
        "std": {name: collapse_report(m, test[0])["feat_std"] for name, m in
                (("A", run_a.model), ("B", run_b.model))},
        "history": {"A": run_a.history, "B": run_b.history},
        "minutes": elapsed / 60,
    }


def test_criterion_4_anti_collapse(desk_runs, verdict):
    std, probes = desk_runs["std"], desk_runs["probes"]
    passed = std["A"] > std["B"] and probes["A"].auc >= probes["B"].auc
    detail = (
        f"feat std A={std['A']:.4f} > B={std['B']:.4f}, frozen AUC A={probes['A'].auc:.4f} >= B={probes['B'].auc:.4f}, "
        f"paired runs {desk_runs['minutes']:.1f} min"
    )
    assert verdict(4, passed, detail)


def test_criterion_5_representation_usefulness(desk_runs, verdict):
    trained, baseline = desk_runs["probes"]["A"].accuracy, desk_runs["probes"]["random"].accuracy
    margin = trained - baseline
    passed = margin >= 0.10
    detail = f"frozen accuracy pretrained={trained:.3f} vs random-init={baseline:.3f}, margin {100 * margin:.1f}pp >= 10pp"
    assert verdict(5, passed, detail)


# -- 6 ------------------------------------------------------------------------------
def _pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins) / (len(pos) * len(neg))


def test_criterion_6_auc_oracle(verdict):
    mismatches = 0
    for trial in range(1000):
        rng = np.random.default_rng([6, trial])
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        rng.shuffle(labels)
        # coarse scores force plenty of ties
        scores = rng.integers(0, int(rng.integers(2, 12)), n).astype(float)
        mismatches += compute_auc(scores, labels) != _pairwise_auc(scores, labels)
    assert verdict(6, mismatches == 0, f"{1000 - mismatches}/1000 instances match the all-pairs count exactly")


# -- 7 ------------------------------------------------------------------------------
def test_criterion_7_determinism(tmp_path, verdict):
    images = as_arrays(gen_phantom_dataset(128, 4, 32, 32, seed=3))[0]
    config = Config().with_overrides({"train.steps": "15", "train.batch_size": "16", "train.record_time": "false"})
    state_a = pretrain(config, images, out=tmp_path / "a" / "model.ckpt")
    pretrain(config, images, out=tmp_path / "b" / "model.ckpt")
    metrics_equal = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    save_state(state_a, tmp_path / "first.ckpt")
    loaded = load_checkpoint(tmp_path / "first.ckpt")
    save_checkpoint(tmp_path / "second.ckpt", loaded.tensors, loaded.step, loaded.config_text)
    file_equal = (tmp_path / "first.ckpt").read_bytes() == (tmp_path / "second.ckpt").read_bytes()
    state = state_a.model.state_dict()
    tensors_equal = all(loaded.tensors[k].tobytes() == v.tobytes() for k, v in state.items())
    passed = metrics_equal and file_equal and tensors_equal
    detail = f"metrics CSV identical={metrics_equal}, checkpoint bytes identical={file_equal}, tensors bitwise={tensors_equal}"
    assert verdict(7, passed, detail)


# -- 8 ------------------------------------------------------------------------------
def test_criterion_8_format_conformance(verdict):
    rng = np.random.default_rng(8)
    worst_steps = 0.0
    for trial in range(100):
        maxval = 255 if trial % 2 else 65535
        image = rng.uniform(0, 1, (1, int(rng.integers(1, 40)), int(rng.integers(1, 40))))
        worst_steps = max(worst_steps, np.max(np.abs(decode_pgm(encode_pgm(image, maxval)) - image)) * maxval)

    blob = encode_checkpoint({"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}, 5, "[train]\nsteps = 5\n")
    cases = [blob[:cut] for cut in range(len(blob))]
    cases.append(b"BADMAGIC" + blob[8:])
    cases.append(blob[:8] + struct.pack("<I", 2) + blob[12:])
    for _ in range(300):
        corrupted = bytearray(blob)
        for position in rng.integers(0, len(blob), int(rng.integers(1, 4))):
            corrupted[position] ^= int(rng.integers(1, 256))
        cases.append(bytes(corrupted))
    for _ in range(100):
        cases.append(rng.integers(0, 256, int(rng.integers(0, 64))).astype(np.uint8).tobytes())

    typed, untyped, accepted = 0, [], 0
    for data in cases:
        try:
            decode_checkpoint(data)
            accepted += 1
        except FormatError:
            typed += 1
        except Exception as exc:  # noqa: BLE001 - any other exception is a failure
            untyped.append(type(exc).__name__)
    truncations_typed = all(_raises_format_error(blob[:cut]) for cut in range(len(blob)))
    passed = worst_steps <= 1.0 and not untyped and truncations_typed
    detail = (
        f"PGM worst error {worst_steps:.3f} quantization steps <= 1; {len(cases)} fuzzed checkpoints: "
        f"{typed} typed errors, {accepted} decoded (payload-only flips), {len(untyped)} untyped"
    )
    assert verdict(8, passed, detail)


def _raises_format_error(data):
    try:
        decode_checkpoint(data)
    except FormatError:
        return True
    return False

"""Acceptance criteria 1-9. Each test records a PASS/FAIL line shown after the run."""

import itertools
import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE
from jale.complexity import analyze_segment, dct2d
from jale.core import HLS_BITRATES, EncodeRecord, LadderPlan, PlanEntry, Representation, ThreadPresetPair, default_hls_ladder
from jale.elimination import eliminate, retained_positions
from jale.forest import ForestParams, TrainingSet, forests_identical, load_model, predict_many, save_model, train_forest
from jale.harness import BudgetTrace, EncoderBackend, Segment, SimulatorBackend, generate_dataset, run_plan, synthetic_segment
from jale.metrics import RdCurve, bd_quality, bd_rate, delta_storage, delta_threads
from jale.selection import build_priority_table, model_inputs, plan_ladder, split_models, train_ladder_models
from oracles import dct_oracle, elimination_oracle, trapezoid_mean


@contextmanager
def criterion(key, title):
    line = f"[{key:>2}] {title}"
    try:
        yield
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE[key] = f"FAIL {line}: {msg[:160]}"
        print(ACCEPTANCE[key])
        raise
    ACCEPTANCE[key] = f"PASS {line}"
    print(ACCEPTANCE[key])


# -- 1 -----------------------------------------------------------------------------

LOOKUP = [
    (4, 5), (8, 5), (4, 4), (4, 3), (8, 4), (12, 5), (16, 5), (12, 4), (8, 3), (4, 2), (4, 1), (8, 2),
    (12, 3), (16, 4), (20, 5), (24, 5), (20, 4), (16, 3), (12, 2), (8, 1), (4, 0), (8, 0), (12, 1), (16, 2),
    (20, 3), (24, 4), (24, 3), (20, 2), (16, 1), (12, 0), (16, 0), (20, 1), (24, 2), (24, 1), (20, 0), (24, 0),
]


def test_1_priority_table():
    with criterion("1", "priority table reproduces the 36-pair lookup order, < 1 ms"):
        cfg = default_hls_ladder()
        table = build_priority_table(cfg.threads, cfg.presets)
        assert [(p.threads, p.preset) for p in table] == LOOKUP
        assert (table[0].threads, table[0].preset) == (4, 5)
        assert (table[2].threads, table[2].preset) == (4, 4)
        assert (table[35].threads, table[35].preset) == (24, 0)
        best = min(_timed(lambda: build_priority_table(cfg.threads, cfg.presets)) for _ in range(20))
        assert best < 1e-3, f"{best * 1e3:.3f} ms"


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# -- 2 and 3 -------------------------------------------------------------------------


def elimination_instances(n=10_000, seed=2024):
    rng = random.Random(seed)
    for _ in range(n):
        q = rng.randint(1, 12)
        vj = rng.choice((2, 4, 6))
        yield [rng.uniform(0, 100) for _ in range(q)], vj


def test_2_elimination_matches_pseudocode():
    with criterion("2", "elimination equals pseudocode transliteration on 10,000 instances, < 1 s"):
        t0 = time.perf_counter()
        mismatches = 0
        for v, vj in elimination_instances():
            got = [k + 1 for k in retained_positions(v, vj, 100 - vj)]
            mismatches += got != elimination_oracle(v, vj, 100 - vj)
        elapsed = time.perf_counter() - t0
        assert mismatches == 0, f"{mismatches} mismatches"
        assert [k + 1 for k in retained_positions([60, 63, 70, 94, 95], 6, 94)] == [1, 3, 4]
        assert [k + 1 for k in retained_positions([99, 50, 80], 6, 94)] == [1]
        assert [k + 1 for k in retained_positions([75.0] * 12, 6, 94)] == [1]
        assert elapsed < 1.0, f"{elapsed:.3f} s"


def test_3_elimination_structure():
    with criterion("3", "elimination structural properties on every instance"):
        for v, vj in elimination_instances():
            vt = 100 - vj
            r = retained_positions(v, vj, vt)
            assert r[0] == 0 and r == sorted(set(r))
            assert all(v[b] - v[a] >= vj for a, b in zip(r, r[1:]))
            capped = [k for k in r if v[k] >= vt]
            assert len(capped) <= 1 and (not capped or capped[0] == r[-1])
            mono = sorted(v)
            counts = [len(retained_positions(mono, j, 100 - j)) for j in (2, 4, 6)]
            assert counts[0] >= counts[1] >= counts[2], (mono, counts)
        # exhaustive nondecreasing sequences on a coarse grid, q <= 8
        grid = (10, 40, 70, 88, 92, 95, 97, 99)
        for q in range(1, 9):
            for v in itertools.combinations_with_replacement(grid, q):
                counts = [len(retained_positions(v, j, 100 - j)) for j in (2, 4, 6)]
                assert counts[0] >= counts[1] >= counts[2], (v, counts)


# -- 4 -----------------------------------------------------------------------------


def test_4_dct_features():
    with criterion("4", "DCT matches definition oracle (<= 1e-6), flat frames, scaling law (1e-9)"):
        rng = np.random.default_rng(4)
        err = 0.0
        for w, count in ((8, 100), (32, 10)):
            for _ in range(count):
                b = rng.uniform(0, 255, (w, w))
                err = max(err, float(np.max(np.abs(dct2d(b) - dct_oracle(b)))))
        assert err <= 1e-6, f"max abs error {err:.2e}"

        flat = analyze_segment([np.full((64, 96), 113.0)] * 3, 32)
        assert flat.texture_energy == 0 and flat.temporal_gradient == 0

        frames = [rng.uniform(0, 200, (64, 96)) for _ in range(4)]
        base = analyze_segment(frames, 16)
        for lam in (0.25, 1.7, 3.0):
            s = analyze_segment([lam * f for f in frames], 16)
            assert s.texture_energy == pytest.approx(lam * base.texture_energy, rel=1e-9)
            assert s.temporal_gradient == pytest.approx(lam * base.temporal_gradient, rel=1e-9)
            assert s.luminescence == pytest.approx(math.sqrt(lam) * base.luminescence, rel=1e-9)


# -- 5 -----------------------------------------------------------------------------


def test_5_bd_metrics():
    with criterion("5", "BD identity, doubling, shift, trapezoid oracle, antisymmetry"):
        ref = RdCurve((0.8, 1.9, 4.2, 8.8, 15.0), (33.0, 36.5, 39.0, 41.2, 42.5))
        assert abs(bd_rate(ref, ref)) <= 1e-9 and abs(bd_quality(ref, ref)) <= 1e-9
        doubled = RdCurve(tuple(2 * b for b in ref.bitrates), ref.qualities)
        assert abs(bd_rate(ref, doubled) - 100.0) <= 1e-6
        shifted = RdCurve(ref.bitrates, tuple(q + 2 for q in ref.qualities))
        assert abs(bd_quality(ref, shifted) - 2.0) <= 1e-9

        # log10 rate linear in quality: the interpolant is exact, the oracle integrates the true lines
        a = RdCurve(tuple(10 ** (-3.0 + 0.1 * q) for q in (30, 34, 38, 42)), (30, 34, 38, 42))
        b = RdCurve(tuple(10 ** (-3.2 + 0.105 * q) for q in (31, 35, 39, 44)), (31, 35, 39, 44))
        gap = trapezoid_mean(lambda q: (-3.2 + 0.105 * q) - (-3.0 + 0.1 * q), 31, 42)
        expected = (10**gap - 1) * 100
        assert abs(bd_rate(a, b) - expected) <= 1e-4 * abs(expected)
        # quality linear in log10 rate
        rates_a, rates_b = (0.5, 1.0, 2.0, 4.0), (0.7, 1.4, 2.8, 5.0)
        c = RdCurve(rates_a, tuple(35 + 12 * math.log10(r) for r in rates_a))
        d = RdCurve(rates_b, tuple(36 + 11 * math.log10(r) for r in rates_b))
        oracle = trapezoid_mean(lambda x: (36 + 11 * x) - (35 + 12 * x), math.log10(0.7), math.log10(4.0))
        assert abs(bd_quality(c, d) - oracle) <= 1e-3

        rng = np.random.default_rng(5)
        for _ in range(200):
            qs = np.sort(rng.uniform(25, 95, 6))
            if np.min(np.diff(qs)) < 1e-3:
                continue
            rates = np.cumprod(rng.uniform(1.2, 2.5, 6))
            x = RdCurve(tuple(rates), tuple(qs))
            y = RdCurve(tuple(rates * rng.uniform(0.6, 1.6) * np.linspace(1, rng.uniform(0.8, 1.3), 6)), tuple(qs))
            prod = (1 + bd_rate(x, y) / 100) * (1 + bd_rate(y, x) / 100)
            assert abs(prod - 1) <= 1e-6


# -- 6 -----------------------------------------------------------------------------


def test_6_forest_engine():
    with criterion("6", "forest determinism, bounded predictions, OOB R2 >= 0.9, round trip, < 60 s"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        X = rng.uniform(size=(5000, 4))
        y = 2 * X[:, 0] - 3 * X[:, 1] + 0.5 * X[:, 2] + rng.normal(0, 0.1, 5000)
        data = TrainingSet(X, y, ("a", "b", "c", "d"))
        params = ForestParams(n_estimators=100, max_depth=14, min_samples_split=2, min_samples_leaf=1)
        m1 = train_forest(data, params, seed=17, oob=True)
        m2 = train_forest(data, params, seed=17)
        m3 = train_forest(data, params, seed=17, n_jobs=4)
        assert forests_identical(m1, m2) and forests_identical(m1, m3)
        probes = rng.uniform(-1, 2, (10_000, 4))
        pred = predict_many(m1, probes)
        assert pred.min() >= y.min() and pred.max() <= y.max()
        assert m1.oob_score >= 0.9, f"OOB R2 {m1.oob_score:.4f}"
        again = load_model(save_model(m1))
        assert np.array_equal(predict_many(again, probes), pred)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60, f"{elapsed:.1f} s"


# -- 7 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e():
    t0 = time.perf_counter()
    cfg = default_hls_ladder()
    sim = SimulatorBackend(seed=7)
    train = [synthetic_segment(11, i) for i in range(40)]
    rows = generate_dataset(sim, train, cfg.ladder, cfg.threads, cfg.presets).rows
    models = train_ladder_models(rows, cfg.threads, cfg.presets, ForestParams(), seed=3)
    speed, quality = split_models(models)
    held = [synthetic_segment(99, i) for i in range(50)]
    plans = [plan_ladder(cfg, s.features, speed, quality, s.id) for s in held]
    return {"cfg": cfg, "sim": sim, "rows": rows, "speed": speed, "held": held, "plans": plans,
            "setup_seconds": time.perf_counter() - t0}


def test_7a_selection_is_earliest_model_feasible(e2e):
    with criterion("7a", "simulator E2E: every selected pair is the earliest model-feasible entry"):
        cfg, speed = e2e["cfg"], e2e["speed"]
        assert len(e2e["rows"]) >= 5000 and len(e2e["plans"]) == 50
        table = build_priority_table(cfg.threads, cfg.presets)
        for seg, plan in zip(e2e["held"], e2e["plans"]):
            for e in plan.entries:
                x = np.array(model_inputs(seg.features, e.representation.height, e.representation.bitrate))
                preds = [float(predict_many(speed[(p.threads, p.preset)], x)[0]) for p in table]
                first = next((k for k, s in enumerate(preds) if s >= cfg.target_speed), len(table) - 1)
                assert e.pair == table[first], (seg.id, e.representation.index)
                assert e.feasible == (preds[first] >= cfg.target_speed)


def test_7b_selected_pairs_meet_target(e2e):
    with criterion("7b", "simulator E2E: >= 95 % of selected pairs reach 30 fps in ground truth, < 10 min"):
        cfg, sim = e2e["cfg"], e2e["sim"]
        hits = total = 0
        for seg, plan in zip(e2e["held"], e2e["plans"]):
            for e in plan.entries:
                s = sim.true_speed(seg.features, e.representation.height, e.representation.bitrate,
                                   e.pair.threads, e.pair.preset)
                hits += s >= cfg.target_speed
                total += 1
        share = hits / total
        print(f"ground-truth hit rate {share:.3f} ({hits}/{total}); setup {e2e['setup_seconds']:.1f} s")
        assert share >= 0.95, f"{share:.3f}"
        assert e2e["setup_seconds"] < 600


def storage_delta(plan, jnd):
    kept = eliminate(plan, jnd, 100 - jnd).retained
    return delta_storage([e.representation.bitrate for e in kept], [e.representation.bitrate for e in plan.entries])


def test_7c_storage_saving_ordered_by_jnd(e2e):
    with criterion("7c", "simulator E2E: dS(6) <= dS(4) <= dS(2) <= 0 on every monotone segment"):
        bad, checked, means = [], 0, {2: [], 4: [], 6: []}
        for plan in e2e["plans"]:
            v = [e.predicted_vmaf for e in plan.entries]
            if any(b < a for a, b in zip(v, v[1:])):
                continue
            checked += 1
            d = {j: storage_delta(plan, j) for j in (2, 4, 6)}
            for j in d:
                means[j].append(d[j])
            if not d[6] <= d[4] <= d[2] <= 0:
                bad.append((plan.segment_id, d[6], d[4], d[2]))
        avg = {j: math.fsum(means[j]) / len(means[j]) for j in means if means[j]}
        print(f"monotone segments {checked}, violations {len(bad)}; mean dS: "
              + ", ".join(f"jnd {j}: {100 * avg[j]:.2f} %" for j in sorted(avg)))
        for sid, d6, d4, d2 in bad[:5]:
            print(f"  {sid}: dS(6)={d6:.4f} dS(4)={d4:.4f} dS(2)={d2:.4f}")
        assert checked > 0
        assert not bad, f"{len(bad)} of {checked} monotone segments violate the ordering"


# -- 8 -----------------------------------------------------------------------------


class JitterBackend(EncoderBackend):
    def __init__(self, seed):
        self.rng = random.Random(seed)

    def encode(self, segment, rep, pair):
        time.sleep(self.rng.random() * 2e-4)
        return EncodeRecord(segment.id, rep, pair, rep.bitrate, 30.0, 40.0, 80.0, 0.0)


def test_8_budget_safety():
    with criterion("8", "run_plan never exceeds max(N, largest entry) over 1,000 random plans, < 30 s"):
        t0 = time.perf_counter()
        rng = random.Random(8)
        seg = Segment("s", None)
        backend = JitterBackend(8)
        for _ in range(1000):
            q = rng.randint(1, 12)
            threads = [rng.choice((4, 8, 12, 16, 20, 24, 32)) for _ in range(q)]
            total = rng.choice((8, 16, 24, 48, 96))
            entries = tuple(
                PlanEntry(Representation(360 + k, 0.1 * (k + 1), k + 1), ThreadPresetPair(n, 0), 30.0, 50.0)
                for k, n in enumerate(threads)
            )
            trace = BudgetTrace()
            out = run_plan(backend, LadderPlan(entries, total), seg, total, trace)
            assert trace.max_in_flight <= max(total, max(threads)), (threads, total, trace.max_in_flight)
            assert [r.representation.index for r in out] == list(range(1, q + 1))
            assert trace.in_flight == 0
        elapsed = time.perf_counter() - t0
        assert elapsed < 30, f"{elapsed:.1f} s"


# -- 9 -----------------------------------------------------------------------------


def test_9_resource_deltas():
    with criterion("9", "storage and thread delta worked examples within 1e-12"):
        assert abs(delta_storage(HLS_BITRATES, HLS_BITRATES)) <= 1e-12
        assert abs(delta_storage([1.0, 2.0], [3.0, 3.0]) + 0.5) <= 1e-12
        expected = 3.145 / math.fsum(HLS_BITRATES) - 1
        assert abs(delta_storage([0.145, 0.600, 2.400], HLS_BITRATES) - expected) <= 1e-12
        assert abs(delta_threads([4] * 12, [8] * 12) + 0.5) <= 1e-12
        assert abs(delta_threads([4, 4, 8], [8, 8, 8, 8]) + 0.5) <= 1e-12

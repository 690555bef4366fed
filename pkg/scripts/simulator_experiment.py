"""Train on simulator data, plan held-out segments, and compare against the default scheme.

Prints one report table per JND setting, plus the ground-truth speed hit rate.

    python3 scripts/simulator_experiment.py --train 40 --test 50
"""

import argparse
import time

from jale.cli import REFERENCE_PAIR, segment_report
from jale.core import default_hls_ladder
from jale.elimination import eliminate
from jale.forest import ForestParams
from jale.harness import Segment, SimulatorBackend, generate_dataset, synthetic_segment
from jale.metrics import mean_report
from jale.selection import fixed_plan, plan_ladder, split_models, train_ladder_models


def encode_all(sim, seg, plan):
    return [sim.encode(seg, e.representation, e.pair).to_dict() | {"retained": e.retained} for e in plan.entries]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=40, help="training segments")
    ap.add_argument("--test", type=int, default=50, help="held-out segments")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-estimators", type=int, default=100)
    args = ap.parse_args()

    cfg = default_hls_ladder()
    sim = SimulatorBackend(seed=args.seed)
    t0 = time.perf_counter()
    train = [synthetic_segment(args.seed + 1, i) for i in range(args.train)]
    rows = generate_dataset(sim, train, cfg.ladder, cfg.threads, cfg.presets).rows
    params = ForestParams(n_estimators=args.n_estimators)
    speed, quality = split_models(train_ladder_models(rows, cfg.threads, cfg.presets, params, args.seed))
    print(f"{len(rows)} training rows, 42 models in {time.perf_counter() - t0:.1f} s")

    held = [synthetic_segment(args.seed + 2, i) for i in range(args.test)]
    plans = [plan_ladder(cfg, s.features, speed, quality, s.id) for s in held]

    hits = sum(
        sim.true_speed(s.features, e.representation.height, e.representation.bitrate, e.pair.threads, e.pair.preset)
        >= cfg.target_speed
        for s, p in zip(held, plans)
        for e in p.entries
    )
    print(f"selected pairs reaching {cfg.target_speed:g} fps in ground truth: {hits / (12 * len(held)):.1%}")

    refs = {s.id: encode_all(sim, s, fixed_plan(cfg, REFERENCE_PAIR, s.id, s.features)) for s in held}
    for jnd in (2, 4, 6):
        reports = []
        for seg, plan in zip(held, plans):
            plan = eliminate(plan, jnd, 100 - jnd)
            reports.append(segment_report(encode_all(sim, Segment(seg.id, seg.features), plan), refs[seg.id]))
        print(f"\nJND {jnd} (cap {100 - jnd})")
        print(mean_report(reports).table())


if __name__ == "__main__":
    main()

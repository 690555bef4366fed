"""Time forest training and prediction on the synthetic linear-plus-noise task."""

import argparse
import time

import numpy as np

from jale.forest import ForestParams, TrainingSet, predict_many, train_forest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=5000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    X = rng.uniform(size=(args.rows, 5))
    y = 2 * X[:, 0] - 3 * X[:, 1] + 0.5 * X[:, 2] + rng.normal(0, 0.1, args.rows)
    data = TrainingSet(X, y, tuple("abcde"))

    train_forest(TrainingSet(X[:50], y[:50], data.feature_names), ForestParams(n_estimators=2))  # compile
    t0 = time.perf_counter()
    model = train_forest(data, ForestParams(), seed=args.seed, n_jobs=args.jobs, oob=True)
    t1 = time.perf_counter()
    predict_many(model, rng.uniform(size=(10_000, 5)))
    t2 = time.perf_counter()
    depth = max(t.depth() for t in model.trees)
    print(f"train {t1 - t0:.2f} s, predict 1e4 rows {1e3 * (t2 - t1):.1f} ms, OOB R2 {model.oob_score:.4f}, "
          f"max depth {depth}")


if __name__ == "__main__":
    main()

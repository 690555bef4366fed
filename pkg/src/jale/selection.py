"""Thread/preset priority table and per-rung configuration selection."""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import JaleConfig, JaleError, LadderPlan, PlanEntry, SegmentFeatures, ThreadPresetPair
from .forest import (
    SPEED_FEATURES,
    ForestModel,
    ForestParams,
    ModelScope,
    TrainingSet,
    load_model,
    predict_many,
    save_model,
    train_forest,
)


class MissingModelError(JaleError):
    pass


def build_priority_table(threads: Sequence[int], presets: Sequence[int]) -> list[ThreadPresetPair]:
    """Boustrophedon anti-diagonal walk over the threads x presets grid.

    ``threads`` ascend; ``presets`` run slowest first. Cells are grouped by
    ``i + j`` (i = thread index, j = preset index); even diagonals are walked
    with ``i`` ascending, odd ones with ``i`` descending.
    """
    if not threads or not presets:
        raise ValueError("thread and preset sets must be non-empty")
    nt, npr = len(threads), len(presets)
    table = []
    for d in range(nt + npr - 1):
        lo, hi = max(0, d - npr + 1), min(d, nt - 1)
        rows = range(lo, hi + 1) if d % 2 == 0 else range(hi, lo - 1, -1)
        table.extend(ThreadPresetPair(threads[i], presets[d - i]) for i in rows)
    return table


def select_pair(
    table: Sequence[ThreadPresetPair],
    speed_of: Callable[[ThreadPresetPair], float],
    target_speed: float,
) -> tuple[ThreadPresetPair, bool, int]:
    """First pair whose predicted speed reaches the target.

    Returns ``(pair, feasible, position)``; when nothing qualifies the last
    entry is returned with ``feasible=False``.
    """
    for k, pair in enumerate(table):
        if speed_of(pair) >= target_speed:
            return pair, True, k
    return table[-1], False, len(table) - 1


def model_inputs(features: SegmentFeatures, height: int, bitrate: float) -> list[float]:
    return [*features.as_vector(), float(height), float(bitrate)]


def plan_ladder(
    config: JaleConfig,
    features: SegmentFeatures,
    speed_models: Mapping[tuple[int, int], ForestModel],
    quality_models: Mapping[int, ForestModel],
    segment_id: str = "",
) -> LadderPlan:
    """Pick (threads, preset) per rung; every entry starts out retained."""
    table = build_priority_table(config.threads, config.presets)
    for pair in table:
        if (pair.threads, pair.preset) not in speed_models:
            raise MissingModelError(f"no speed model for {pair}")
    for p in config.presets:
        if p not in quality_models:
            raise MissingModelError(f"no quality model for preset {p}")

    X = np.array([model_inputs(features, r.height, r.bitrate) for r in config.ladder])
    # one batched call per model; rows are rungs
    speeds = {(pr.threads, pr.preset): predict_many(speed_models[(pr.threads, pr.preset)], X) for pr in table}

    entries = []
    for t, rep in enumerate(config.ladder):
        pair, feasible, _ = select_pair(table, lambda pr: speeds[(pr.threads, pr.preset)][t], config.target_speed)
        vmaf = float(predict_many(quality_models[pair.preset], X[t])[0])
        entries.append(PlanEntry(rep, pair, float(speeds[(pair.threads, pair.preset)][t]), vmaf, True, feasible))
    return LadderPlan(tuple(entries), config.total_threads, segment_id, features)


def fixed_plan(config: JaleConfig, pair: ThreadPresetPair, segment_id: str = "", features=None) -> LadderPlan:
    """Every rung at one configuration; the reference scheme uses (8, ultrafast)."""
    entries = tuple(PlanEntry(rep, pair, float("nan"), float("nan"), True, True) for rep in config.ladder)
    return LadderPlan(entries, config.total_threads, segment_id, features)


def model_seed(seed: int, scope: ModelScope) -> int:
    return zlib.crc32(f"{seed}:{scope.filename}".encode())


def train_ladder_models(
    rows: Sequence[Mapping],
    threads: Sequence[int],
    presets: Sequence[int],
    params: ForestParams | None = None,
    seed: int = 0,
    kinds: Sequence[str] = ("speed", "quality"),
) -> dict[ModelScope, ForestModel]:
    """One speed model per (threads, preset) and one quality model per preset.

    ``rows`` are dataset records (E_Y, h, L_Y, r, b, n, p, speed, vmaf, ...).
    Rows without a VMAF value are skipped for quality models.
    """
    params = params or ForestParams()
    models: dict[ModelScope, ForestModel] = {}
    if "speed" in kinds:
        for n in threads:
            for p in presets:
                sel = [r for r in rows if r["n"] == n and r["p"] == p]
                scope = ModelScope("speed", p, n)
                data = TrainingSet.from_rows([([r[k] for k in SPEED_FEATURES], r["speed"]) for r in sel],
                                             SPEED_FEATURES, "speed")
                models[scope] = train_forest(data, params, model_seed(seed, scope), scope)
    if "quality" in kinds:
        for p in presets:
            sel = [r for r in rows if r["p"] == p and r["vmaf"] is not None]
            scope = ModelScope("quality", p)
            data = TrainingSet.from_rows([([r[k] for k in SPEED_FEATURES], r["vmaf"]) for r in sel],
                                         SPEED_FEATURES, "vmaf")
            models[scope] = train_forest(data, params, model_seed(seed, scope), scope)
    return models


def split_models(models: Mapping[ModelScope, ForestModel]):
    """``(speed_models, quality_models)`` keyed the way :func:`plan_ladder` expects."""
    speed = {(s.threads, s.preset): m for s, m in models.items() if s.kind == "speed"}
    quality = {s.preset: m for s, m in models.items() if s.kind == "quality"}
    return speed, quality


def save_model_dir(models: Mapping[ModelScope, ForestModel], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for scope in sorted(models, key=lambda s: (s.kind, s.preset, s.threads or 0)):
        path = directory / scope.filename
        save_model(models[scope], path)
        paths.append(path)
    return paths


def load_model_dir(directory: str | Path) -> dict[ModelScope, ForestModel]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingModelError(f"model directory {directory} does not exist")
    models = {}
    for path in sorted(directory.glob("*.json")):
        if not path.name.startswith(("speed_", "quality_")):
            continue
        m = load_model(path)
        if m.scope is None:
            raise MissingModelError(f"{path.name} carries no scope tag")
        models[m.scope] = m
    return models

"""JND-aware low-latency encoding ladder planner."""

from .complexity import analyze_segment, block_texture_energy, dct2d
from .core import (
    EncodeRecord,
    JaleConfig,
    LadderPlan,
    PlanEntry,
    Representation,
    SegmentFeatures,
    ThreadPresetPair,
    default_hls_ladder,
    dump_config,
    load_config,
)
from .elimination import eliminate, retained_positions
from .forest import ForestModel, ForestParams, TrainingSet, kfold_split, load_model, predict, save_model, train_forest
from .metrics import RdCurve, bd_quality, bd_rate, delta_storage, delta_threads
from .selection import build_priority_table, plan_ladder, select_pair

__version__ = "0.1.0"

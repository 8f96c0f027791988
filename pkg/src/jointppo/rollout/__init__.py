from .buffer import Batch, RolloutBuffer, TransitionRecord
from .engine import (
    METRIC_COLUMNS,
    EnvironmentFault,
    EnvPool,
    EpisodeStats,
    EvalResult,
    MetricsLog,
    RunResult,
    agent_order,
    build_policy,
    collect,
    evaluate,
    load_policy,
    run,
    train_on_batch,
    train_phase,
)
from .schedule import LrSchedule

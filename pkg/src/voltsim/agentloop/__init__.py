"""Planner/controller orchestration: vocabulary, plans, episodes."""
from .vocab import (  # noqa: F401
    BOS,
    EOS,
    PLAN_MAX_LEN,
    RESUME,
    SEP,
    Vocab,
    build_plan_corpus,
    plan_prompt,
    satisfied_prefix,
)
from .planning import (  # noqa: F401
    PlanStats,
    PlantError,
    plan,
    plan_accuracy,
    plan_cases,
    plant_outliers,
    select_plant_channel,
)
from .episode import (  # noqa: F401
    PROTECTIONS,
    EpisodeConfig,
    EpisodeTrace,
    ModelBundle,
    run_episode,
    save_trace,
)
from .training import (  # noqa: F401
    CONTROLLER_SPEC,
    PLANNER_SPEC,
    collect_noisy_demos,
    collect_policy_demos,
    evaluate_success,
    train_controller,
    train_planner,
)

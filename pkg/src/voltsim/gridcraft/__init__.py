"""Deterministic desk-scale crafting gridworld with a scripted expert."""
from .tasks import (  # noqa: F401
    PROMPT_DIM,
    Subtask,
    TaskDef,
    all_subtask_uids,
    biome_defaults,
    craft_recipes,
    parse_subtask,
    prompt_embedding,
    task_names,
    tasks,
)
from .world import (  # noqa: F401
    ACTIONS,
    A_CRAFT,
    A_INTERACT,
    A_NO_OP,
    CODE_SPAN,
    DIR_VECS,
    MOVE_ACTIONS,
    N_ACTIONS,
    TILE_NAMES,
    VIEW_RADIUS,
    GenerationError,
    World,
    generate_world,
    observe,
    step,
    subtask_target_mask,
)
from .expert import (  # noqa: F401
    ExpertStuckError,
    collect_demos,
    distance_field,
    expert_policy,
    read_trace_bin,
    rollout_expert,
    write_trace_bin,
)

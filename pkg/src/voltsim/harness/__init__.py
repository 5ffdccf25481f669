from .stats import (  # noqa: F401
    Z95,
    clopper_pearson,
    diff_interval,
    spearman,
    wilson_interval,
)
from .campaign import (  # noqa: F401
    CSV_COLUMNS,
    DEFAULT_BER_GRID,
    DEFAULT_VOLTAGE_GRID,
    CampaignReport,
    CampaignSpec,
    CellResult,
    ConfigError,
    MissingArtifactError,
    compare_error_models,
    emit_report,
    run_campaign,
    run_cell,
    world_seed_for,
)

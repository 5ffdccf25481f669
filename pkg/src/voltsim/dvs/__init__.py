"""Autonomy-adaptive voltage scaling: entropy, policies, energy accounting."""
from .scaling import (  # noqa: F401
    NOMINAL_VOLTAGE,
    UNITS,
    EnergyLedger,
    LdoModel,
    LedgerError,
    VoltagePolicy,
    constant_policy,
    effective_voltage,
    entropy,
    load_policy,
    save_policy,
    select_voltage,
)
from .pipeline import (  # noqa: F401
    build_entropy_dataset,
    generate_policies,
    load_entropy_dataset,
    phase_separation,
    policy_search,
    predict_batch,
    save_entropy_dataset,
    train_predictor,
)

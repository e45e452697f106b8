from .config import RunConfig, load_config, load_scenario, parse_config, scenario_path
from .runner import (
    ATTACKS,
    FlowRun,
    RunTranscript,
    audit_export,
    audit_verify,
    conservation_report,
    explorer_query,
    payout_violations,
    run_attack,
    run_flow,
)
from .system import Kernel

__all__ = [
    "RunConfig", "load_config", "load_scenario", "parse_config", "scenario_path", "ATTACKS", "FlowRun", "RunTranscript",
    "audit_export", "audit_verify", "conservation_report", "explorer_query", "payout_violations",
    "run_attack", "run_flow", "Kernel",
]

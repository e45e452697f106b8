"""Run configuration: load, validate, normalize."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..agents import BEHAVIORS
from ..core import Amount
from ..errors import ConfigInvalid
from ..identity import PROOF_KINDS
from ..orchestration import TaskRequest
from ..settlement.chain import DEFAULT_RAILS, RailConfig
from ..tiers import Tier

DEFAULT_CONTRACT = {
    "required_proof_kinds": ["NotaryReceiptExecutor", "NotaryReceiptModel", "NotaryReceiptTool",
                             "AJwtIntegrity", "TelemetryHash"],
    "min_notary_witnesses": 1,
    "extra_predicates": ["output-matches-cart", "within-budget", "reconcile-amounts"],
}


@dataclass
class AgentSpec:
    manifest: dict  # AgentManifest record; owner_pk may be omitted (generated at run time)
    behavior: str = "honest"
    contract: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONTRACT))

    def to_record(self) -> dict:
        return {"manifest": self.manifest, "behavior": self.behavior, "contract": self.contract}


@dataclass
class RunConfig:
    seed: int
    rails: list
    agents: list
    task: TaskRequest
    quote_items: list
    tier_overrides: dict | None = None
    validators: dict = field(default_factory=lambda: {"n": 4, "f": 1, "byzantine_mask": []})
    notaries: int = 3
    challenge: bool = False
    escrow_timeout: int = 60
    challenge_window: int = 10
    name: str = "custom"

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "rails": [r.to_record() for r in self.rails],
            "agents": [a.to_record() for a in self.agents],
            "task": self.task.to_record(),
            "quote": {"items": self.quote_items},
            "tier_overrides": self.tier_overrides,
            "validators": self.validators,
            "notaries": self.notaries,
            "challenge": self.challenge,
            "escrow_timeout": self.escrow_timeout,
            "challenge_window": self.challenge_window,
        }

    @property
    def forced_tier(self) -> Tier | None:
        t = (self.tier_overrides or {}).get("tier")
        return None if t is None else Tier(t)

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.seed = seed
        return out


def _need(rec: dict, key: str, where: str):
    if not isinstance(rec, dict) or key not in rec:
        raise ConfigInvalid(f"{where}: missing {key!r}")
    return rec[key]


def _items(raw) -> list:
    if not isinstance(raw, list) or not raw:
        raise ConfigInvalid("quote.items must be a non-empty list")
    out = []
    for i, item in enumerate(raw):
        sku = _need(item, "sku", f"quote.items[{i}]")
        try:
            price = Amount.from_record(_need(item, "price", f"quote.items[{i}]"))
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigInvalid(f"quote.items[{i}].price: {exc}") from None
        if price.minor_units <= 0:
            raise ConfigInvalid(f"quote.items[{i}].price must be positive")
        out.append({"sku": sku, "description": item.get("description", ""), "price": price.minor_units})
    return out


def parse_config(raw: dict) -> RunConfig:
    """Validate a JSON-shaped config; every problem surfaces as ConfigInvalid."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object")
    seed = _need(raw, "seed", "config")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigInvalid("seed must be an integer")

    try:
        rails = [RailConfig.from_record(r) for r in raw.get("rails") or [r.to_record() for r in DEFAULT_RAILS]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"rails: {exc}") from None
    rail_ids = [r.rail_id for r in rails]
    if len(set(rail_ids)) != len(rail_ids) or len({r.chain_id for r in rails}) != len(rails):
        raise ConfigInvalid("rail_id and chain_id must be unique")

    agents = []
    for i, a in enumerate(_need(raw, "agents", "config")):
        m = _need(a, "manifest", f"agents[{i}]")
        for key in ("agent_id", "domain_name", "capabilities", "declared_cost", "declared_success_rate"):
            _need(m, key, f"agents[{i}].manifest")
        behavior = a.get("behavior", "honest")
        if behavior not in BEHAVIORS:
            raise ConfigInvalid(f"agents[{i}].behavior {behavior!r} not in {BEHAVIORS}")
        contract = a.get("contract") or copy.deepcopy(DEFAULT_CONTRACT)
        unknown = set(contract.get("required_proof_kinds", [])) - PROOF_KINDS
        if unknown or not contract.get("required_proof_kinds"):
            raise ConfigInvalid(f"agents[{i}].contract proof kinds invalid: {sorted(unknown)}")
        agents.append(AgentSpec(dict(m), behavior, contract))
    if not agents:
        raise ConfigInvalid("at least one agent is required")
    ids = [a.manifest["agent_id"] for a in agents]
    if len(set(ids)) != len(ids):
        raise ConfigInvalid("duplicate agent_id")

    try:
        task = TaskRequest.from_record(_need(raw, "task", "config"))
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"task: {exc}") from None
    if task.rail_preference is not None and task.rail_preference not in rail_ids:
        raise ConfigInvalid(f"task.rail_preference {task.rail_preference!r} is not a configured rail")

    quote = _need(raw, "quote", "config")
    items = _items(_need(quote, "items", "quote"))

    v = raw.get("validators") or {"n": 4, "f": 1, "byzantine_mask": []}
    n, f = _need(v, "n", "validators"), _need(v, "f", "validators")
    if not isinstance(n, int) or not isinstance(f, int) or f < 0 or n != 3 * f + 1:
        raise ConfigInvalid(f"validators need n = 3f+1, got n={n} f={f}")
    mask = list(v.get("byzantine_mask", []))
    if any(not isinstance(x, int) or not 0 <= x < n for x in mask) or len(set(mask)) != len(mask):
        raise ConfigInvalid("byzantine_mask must hold distinct validator indices")

    overrides = raw.get("tier_overrides")
    if overrides is not None:
        t = overrides.get("tier") if isinstance(overrides, dict) else None
        if t not in (None, "Tier1", "Tier2", "Tier3"):
            raise ConfigInvalid(f"tier_overrides.tier {t!r} unknown")

    notaries = raw.get("notaries", 3)
    if not isinstance(notaries, int) or notaries < 2:
        raise ConfigInvalid("notaries must be an integer >= 2")
    for key in ("escrow_timeout", "challenge_window"):
        if key in raw and (not isinstance(raw[key], int) or raw[key] < 1):
            raise ConfigInvalid(f"{key} must be a positive integer")

    return RunConfig(
        seed=seed, rails=rails, agents=agents, task=task, quote_items=items,
        tier_overrides=overrides,
        validators={"n": n, "f": f, "byzantine_mask": sorted(mask)},
        notaries=notaries,
        challenge=bool(raw.get("challenge", False)),
        escrow_timeout=raw.get("escrow_timeout", 60),
        challenge_window=raw.get("challenge_window", 10),
        name=raw.get("name", "custom"),
    )


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    if seed is not None:
        raw["seed"] = seed
    return parse_config(raw)


def scenario_path(name: str) -> Path:
    return Path(__file__).with_name("scenarios") / f"{name}.json"


def load_scenario(name: str, **overrides) -> RunConfig:
    """One of the shipped scenarios (``ecommerce`` or ``portfolio``) with top-level overrides."""
    raw = json.loads(scenario_path(name).read_text())
    raw.update(overrides)
    return parse_config(raw)

"""Scripted service agents with misbehavior knobs.

No model inference happens here: each agent replays a deterministic script
of model/tool exchanges whose shape depends on its behavior flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import Amount, canonical_serialize

BEHAVIORS = ("honest", "wrong_output", "over_budget", "non_responsive", "injection_compromised")


@dataclass
class AgentRun:
    output: dict | None
    exchanges: list = field(default_factory=list)  # (kind, request bytes, response bytes)
    telemetry: list = field(default_factory=list)  # (step_label, latency_ms, tokens, cost units)


def agent_code(manifest_record: dict) -> bytes:
    """Bytes an honest enclave would measure for this agent."""
    return canonical_serialize({
        "agent_id": manifest_record["agent_id"],
        "system_prompt": manifest_record["system_prompt"],
        "tool_config": manifest_record["tool_config"],
        "version": manifest_record["version"],
    })


class ScriptedServiceAgent:
    def __init__(self, manifest, behavior: str = "honest"):
        if behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {behavior!r}")
        self.manifest = manifest
        self.behavior = behavior

    @property
    def agent_id(self) -> str:
        return self.manifest.agent_id

    def registered_code(self) -> bytes:
        return agent_code(self.manifest.to_record())

    def runtime_code(self) -> bytes:
        code = self.registered_code()
        if self.behavior == "injection_compromised":
            code += b"\n# injected: exfiltrate credentials before checkout"
        return code

    def acknowledge(self, envelope_bytes: bytes) -> bytes:
        return canonical_serialize({"agent_id": self.agent_id, "ack": True, "envelope_bytes": len(envelope_bytes)})

    def run(self, task: dict, rng, full_evidence: bool = True) -> AgentRun:
        """Execute ``task`` = {items, budget_cap, intent_text, ...}."""
        if self.behavior == "non_responsive":
            return AgentRun(output=None)

        items = [dict(i) for i in task["items"]]
        if self.behavior == "wrong_output" and items:
            items[0]["sku"] = "SUBSTITUTE-" + items[0]["sku"]
        run = AgentRun(output=None)
        budget = task["budget_cap"]
        steps = ["plan", "execute"] if full_evidence else ["api-call"]
        base_cost = max(1, budget // 100)
        for label in steps:
            latency = 20 + rng.randrange(180)
            tokens = 100 + rng.randrange(900)
            run.telemetry.append((label, latency, tokens, base_cost))
        if self.behavior == "over_budget":
            label, latency, tokens, _ = run.telemetry[-1]
            run.telemetry[-1] = (label, latency, tokens, budget + 1)

        if full_evidence:
            prompt = canonical_serialize({"intent": task["intent_text"], "system": self.manifest.system_prompt})
            plan = canonical_serialize({"plan": [i["sku"] for i in items]})
            run.exchanges.append(("Model", prompt, plan))
            call = canonical_serialize({"tool": (self.manifest.tool_config or ["checkout"])[0], "items": items})
            confirm = canonical_serialize({"order_status": "confirmed", "items": [i["sku"] for i in items]})
            run.exchanges.append(("Tool", call, confirm))
        else:
            call = canonical_serialize({"api": "charge", "items": items})
            run.exchanges.append(("Api", call, canonical_serialize({"status": "ok"})))

        run.output = {
            "status": "completed",
            "items": [i["sku"] for i in items],
            "total": sum(Amount.from_record(i["price"]).minor_units for i in items),
        }
        return run

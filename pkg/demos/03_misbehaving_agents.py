"""
What happens when the agent misbehaves
======================================

Each scripted misbehavior is caught by a different check, and the buyer gets
the escrow back minus the rail fee.
"""

import json

from tesspay.gateway import parse_config, run_flow, scenario_path

base = json.loads(scenario_path("ecommerce").read_text())

for behavior in ("honest", "wrong_output", "over_budget", "non_responsive", "injection_compromised"):
    raw = json.loads(json.dumps(base))
    for agent in raw["agents"]:
        agent["behavior"] = behavior
    raw["escrow_timeout"] = 30
    t = run_flow(parse_config(raw))
    why = t.record["outcome"].get("reasons") or [t.record["outcome"].get("failure", "")]
    print(f"{behavior:<22} {t.final_status:<9} {why[0] if why else ''}")

# Too many faulty validators: no certificate, so nothing can anchor.
raw = json.loads(json.dumps(base))
raw["validators"]["byzantine_mask"] = [0, 1]
t = run_flow(parse_config(raw))
print("2 of 4 validators faulty", t.final_status, t.record["outcome"].get("failure"))

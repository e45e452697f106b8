"""
High-value rebalancing and the challenge window
===============================================

A 1,750 dollar portfolio trade lands in the top tier: two notary witnesses,
enclave attestation, deeper finality and a challenge window before payout.
"""

from tesspay.gateway import load_scenario, run_flow

t = run_flow(load_scenario("portfolio"))
print("tier", t.record["tier"], "status", t.final_status)
print("proofs", t.record["required_proofs"])

# when did the escrow move, and why
rec = next(iter(t.kernel.settlement.escrows.values()))
for tick, event, status in rec.history:
    print(f"  tick {tick:>3}  {event:<24} -> {status}")

# Same run, but someone files an anomaly report inside the window.
t2 = run_flow(load_scenario("portfolio", challenge=True))
print("with a challenge:", t2.final_status)

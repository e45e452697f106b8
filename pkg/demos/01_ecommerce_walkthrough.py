"""
A shopping task, one phase at a time
====================================

Alice asks for running shoes. We follow the money from the intent mandate
to the payout on the simulated rail and print what each phase leaves behind.
"""

from tesspay.gateway import load_scenario
from tesspay.gateway.runner import FlowRun

cfg = load_scenario("ecommerce")
flow = FlowRun(cfg)

# Discovery, mandates, token and escrow. The deposit is broadcast but not yet final.
flow.prepare()
print("routed to      ", flow.agent_id)
print("tier           ", flow.tier)
print("required proofs", sorted(flow.required))
print("amount         ", flow.mandates.amount.minor_units, "minor units on", flow.rail_id)
print("escrow         ", flow.escrow.status)

# Blocks accrue until the deposit is deep enough to count as final.
flow.fund_until_open()
print("escrow after funding", flow.escrow.status, "at tick", flow.k.clock.now)

# The agent only runs now, against an open escrow. Its evidence is sealed into a PoTE.
anchored = flow.execute_and_verify()
print("PoTE anchored", anchored, flow.outcome.get("pote_root", "")[:16])

# Payout happens only because the root is anchored.
flow.settle_or_refund()
print("final", flow.escrow.status, flow.outcome["reconcile"])

# Balances on the rail: payer, escrow, and the agent that did the work
rail = flow.k.settlement.rail(flow.rail_id)
s = flow.k.settlement
print("payer ", rail.balance(s.wallets.address_of(flow.payer_ref)))
print("escrow", rail.balance(flow.escrow.escrow_address))
print("agent ", rail.balance(s.agent_address(flow.agent_id)))
print("fees  ", rail.fees_collected)

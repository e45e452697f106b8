"""
Four attacks against the payment path
=====================================

Each driver plays the attacker and reports what stopped it.
"""

from tesspay.gateway import ATTACKS, run_attack

for name in ATTACKS:
    rep = run_attack(name, seed=0)
    print(f"{name:<18} blocked={rep['blocked']}  by {rep['mechanism']}")
    for k, v in rep["evidence"].items():
        print(f"    {k}: {v}")

"""Command-line entry point.

    tesspay run-flow --config F [--seed N]
    tesspay attack <name> [--seed N]
    tesspay tier --amount N
    tesspay audit verify --file F
    tesspay explorer tx --rail R --tx T [--config F]
    tesspay serve --port P

Exit code 0 iff the run ends SETTLED (or, for attacks, blocked).
"""

from __future__ import annotations

import argparse
import sys

from ..core import canonical_text
from ..errors import TessPayError
from .api import serve
from .config import load_config, scenario_path
from .runner import ATTACKS, audit_export, audit_verify, explorer_query, run_attack, run_flow, tier_report


def _config(path, seed):
    if path in ("ecommerce", "portfolio"):
        path = scenario_path(path)
    return load_config(path, seed)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="tesspay", description="verify-then-pay simulation kernel")
    sub = p.add_subparsers(dest="cmd", required=True)

    rf = sub.add_parser("run-flow", help="run one scenario config end to end")
    rf.add_argument("--config", required=True, help="config file, or 'ecommerce' / 'portfolio'")
    rf.add_argument("--seed", type=int)
    rf.add_argument("--audit-out", help="also export the audit ledger (JSON Lines) here")
    rf.add_argument("--transcript", action="store_true", help="print the full transcript")

    at = sub.add_parser("attack", help="run a threat scenario")
    at.add_argument("name", choices=ATTACKS)
    at.add_argument("--seed", type=int, default=0)

    ti = sub.add_parser("tier", help="classify an amount in minor units")
    ti.add_argument("--amount", type=int, required=True)

    au = sub.add_parser("audit", help="audit ledger tools")
    au_sub = au.add_subparsers(dest="audit_cmd", required=True)
    av = au_sub.add_parser("verify")
    av.add_argument("--file", required=True)

    ex = sub.add_parser("explorer", help="explorer queries against a fresh run")
    ex_sub = ex.add_subparsers(dest="explorer_cmd", required=True)
    et = ex_sub.add_parser("tx")
    et.add_argument("--rail", required=True)
    et.add_argument("--tx", required=True)
    et.add_argument("--config", default="ecommerce")
    et.add_argument("--seed", type=int)

    sv = sub.add_parser("serve", help="HTTP JSON API")
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--host", default="127.0.0.1")

    args = p.parse_args(argv)
    try:
        return _run(args)
    except TessPayError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:
    if args.cmd == "run-flow":
        t = run_flow(_config(args.config, args.seed))
        if args.audit_out:
            audit_export(t.kernel, args.audit_out)
        if args.transcript:
            print(t.to_bytes().decode())
        else:
            r = t.record
            print(canonical_text({
                "workflow_id": r["ids"].get("workflow_id"), "escrow_id": r["ids"].get("escrow_id"),
                "agent_id": r["agent_id"], "tier": r["tier"], "required_proofs": r["required_proofs"],
                "outcome": r["outcome"], "audit_head": r["audit_head"], "transcript_digest": t.digest,
            }))
        return 0 if t.settled else 1
    if args.cmd == "attack":
        report = run_attack(args.name, args.seed)
        print(canonical_text(report))
        return 0 if report["blocked"] else 1
    if args.cmd == "tier":
        print(canonical_text(tier_report(args.amount)))
        return 0
    if args.cmd == "audit":
        ok = audit_verify(args.file)
        print("true" if ok else "false")
        return 0 if ok else 1
    if args.cmd == "explorer":
        t = run_flow(_config(args.config, args.seed))
        hits = explorer_query(t.kernel, {"rail_id": args.rail, "tx_id": args.tx})
        print(canonical_text(hits))
        return 0 if hits else 1
    if args.cmd == "serve":
        print(f"listening on http://{args.host}:{args.port}")
        serve(args.port, args.host)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())

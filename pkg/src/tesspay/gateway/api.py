"""HTTP JSON front end. Every mutation funnels through one worker; reads snapshot state."""

from __future__ import annotations

import json
import queue
import re
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qsl

from ..core import canonical_serialize
from ..errors import (
    ConfigInvalid,
    IllegalTransition,
    NotFound,
    PoTEMissing,
    TessPayError,
    UnknownEscrow,
    UnknownWorkflow,
    WrongState,
)
from ..settlement import EscrowEvent
from .config import load_scenario, parse_config
from .runner import ATTACKS, audit_export, audit_verify, explorer_query, run_attack, run_flow

STATUS_OF = (
    (IllegalTransition, 409),
    (WrongState, 409),
    (PoTEMissing, 412),
    (UnknownEscrow, 404),
    (UnknownWorkflow, 404),
    (NotFound, 404),
    (ConfigInvalid, 400),
    (TessPayError, 422),
)


def status_for(exc: Exception) -> int:
    for cls, code in STATUS_OF:
        if isinstance(exc, cls):
            return code
    return 500


class Gateway:
    """Run registry plus a single worker thread that owns all mutation."""

    def __init__(self):
        self.runs: dict = {}  # run_id -> {"status", "transcript"?, "error"?}
        self._lock = threading.Lock()
        self._jobs: queue.Queue = queue.Queue()
        self._next = 0
        self._worker = threading.Thread(target=self._work, daemon=True)
        self._worker.start()

    def _work(self):
        while True:
            run_id, fn = self._jobs.get()
            try:
                result = fn()
                with self._lock:
                    self.runs[run_id].update(status="done", result=result)
            except Exception as exc:  # reported through GET /runs/{id}
                with self._lock:
                    self.runs[run_id].update(status="failed", error=f"{type(exc).__name__}: {exc}")
            finally:
                self._jobs.task_done()

    def submit(self, fn) -> str:
        with self._lock:
            self._next += 1
            run_id = f"run-{self._next:04d}"
            self.runs[run_id] = {"status": "queued"}
        self._jobs.put((run_id, fn))
        return run_id

    def call(self, fn):
        """Run ``fn`` on the worker and wait for it; exceptions propagate to the caller."""
        box = {}

        def job():
            try:
                box["value"] = fn()
            except Exception as exc:
                box["error"] = exc

        run_id = self.submit(job)
        self._jobs.join()
        with self._lock:
            self.runs.pop(run_id, None)
        if "error" in box:
            raise box["error"]
        return box.get("value")

    def transcripts(self) -> list:
        with self._lock:
            return [r["result"] for r in self.runs.values()
                    if r["status"] == "done" and hasattr(r.get("result"), "kernel")]

    # identical seeds reproduce identical ids, so the newest run wins
    def find_escrow(self, escrow_id: str):
        for t in reversed(self.transcripts()):
            rec = t.kernel.settlement.escrows.get(escrow_id)
            if rec is not None:
                return t.kernel, rec
        raise UnknownEscrow(escrow_id)

    def find_workflow(self, workflow_id: str):
        for t in reversed(self.transcripts()):
            wf = t.kernel.facilitator.workflows.get(workflow_id)
            if wf is not None:
                return t.kernel, wf
        raise UnknownWorkflow(workflow_id)


def _run_view(run: dict) -> dict:
    out = {"status": run["status"]}
    if "error" in run:
        out["error"] = run["error"]
    res = run.get("result")
    if res is not None and hasattr(res, "record"):
        out["transcript_digest"] = res.digest
        out["workflow_id"] = res.record["ids"].get("workflow_id")
        out["escrow_id"] = res.record["ids"].get("escrow_id")
        out["escrow_status"] = res.final_status
    return out


def make_handler(gw: Gateway):
    class Handler(BaseHTTPRequestHandler):
        server_version = "tesspay/0.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, code: int, body) -> None:
            data = canonical_serialize(body)
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict:
            n = int(self.headers.get("Content-Length") or 0)
            if not n:
                return {}
            try:
                return json.loads(self.rfile.read(n))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"body is not JSON: {exc}") from None

        def _dispatch(self, method: str) -> None:
            path, _, query = self.path.partition("?")
            params = dict(parse_qsl(query))
            try:
                for pattern, verb, fn in ROUTES:
                    m = re.fullmatch(pattern, path)
                    if m and verb == method:
                        code, body = fn(self, *m.groups(), params=params)
                        return self._send(code, body)
                self._send(404, {"error": "NotFound", "detail": path})
            except Exception as exc:
                self._send(status_for(exc), {"error": type(exc).__name__, "detail": str(exc)})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        # -- routes ---------------------------------------------------------
        def post_task(self, params):
            raw = self._body()
            cfg = load_scenario(raw.pop("scenario")) if "scenario" in raw and len(raw) == 1 else parse_config(raw)
            run_id = gw.submit(lambda: run_flow(cfg))
            return 202, {"run_id": run_id, "status": "queued"}

        def get_run(self, run_id, params):
            with gw._lock:
                run = gw.runs.get(run_id)
                if run is None:
                    raise NotFound(run_id)
                return 200, _run_view(run)

        def get_escrow(self, escrow_id, params):
            _, rec = gw.find_escrow(escrow_id)
            return 200, rec.to_record()

        def post_escrow_event(self, escrow_id, event, params):
            kernel, _ = gw.find_escrow(escrow_id)
            try:
                ev = EscrowEvent(event)
            except ValueError:
                raise NotFound(f"event {event}") from None
            new = gw.call(lambda: kernel.settlement.transition_escrow(escrow_id, ev))
            return 200, {"escrow_id": escrow_id, "status": new.value}

        def post_escrow_settle(self, escrow_id, params):
            kernel, _ = gw.find_escrow(escrow_id)
            tx_id = gw.call(lambda: kernel.settlement.settle(escrow_id))
            return 200, {"escrow_id": escrow_id, "tx_id": tx_id}

        def get_workflow(self, workflow_id, params):
            _, wf = gw.find_workflow(workflow_id)
            return 200, wf.to_record()

        def post_attack(self, scenario, params):
            if scenario not in ATTACKS:
                raise NotFound(f"attack {scenario}")
            seed = int(params.get("seed", 0))
            return 200, gw.call(lambda: run_attack(scenario, seed))

        def get_explorer(self, params):
            out = []
            for t in gw.transcripts():
                out.extend(explorer_query(t.kernel, params))
            return 200, out

        def get_audit_verify(self, params):
            results = {}
            for t in gw.transcripts():
                with tempfile.TemporaryDirectory() as d:
                    p = audit_export(t.kernel, Path(d) / "audit.jsonl")
                    results[t.record["ids"]["workflow_id"]] = audit_verify(p)
            return 200, {"verified": all(results.values()), "runs": results}

    ROUTES = (
        (r"/tasks", "POST", Handler.post_task),
        (r"/runs/([\w-]+)", "GET", Handler.get_run),
        (r"/escrows/([\w-]+)", "GET", Handler.get_escrow),
        (r"/escrows/([\w-]+)/settle", "POST", Handler.post_escrow_settle),
        (r"/escrows/([\w-]+)/events/(\w+)", "POST", Handler.post_escrow_event),
        (r"/workflows/([\w-]+)", "GET", Handler.get_workflow),
        (r"/attacks/(\w+)", "POST", Handler.post_attack),
        (r"/explorer", "GET", Handler.get_explorer),
        (r"/audit/verify", "GET", Handler.get_audit_verify),
    )
    return Handler


def make_server(port: int = 8080, host: str = "127.0.0.1"):
    gw = Gateway()
    server = ThreadingHTTPServer((host, port), make_handler(gw))
    server.gateway = gw
    return server


def serve(port: int = 8080, host: str = "127.0.0.1") -> None:
    server = make_server(port, host)
    try:
        server.serve_forever()
    finally:
        server.server_close()

"""
Driving the kernel over HTTP
============================

Start the JSON gateway on a free port, submit a task and poke at the result.
"""

import json
import threading
import time
import urllib.error
import urllib.request

from tesspay.gateway.api import make_server

server = make_server(0)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{server.server_address[1]}"


def call(method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(base + path, data=data, method=method)
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


code, body = call("POST", "/tasks", {"scenario": "ecommerce"})
print(code, body)
run_id = body["run_id"]
while True:
    code, run = call("GET", f"/runs/{run_id}")
    if run["status"] != "queued":
        break
    time.sleep(0.05)
print(run)

print(call("GET", f"/escrows/{run['escrow_id']}")[1]["status"])
print(call("GET", f"/explorer?escrow_id={run['escrow_id']}")[1])
# a settled escrow cannot time out
print(call("POST", f"/escrows/{run['escrow_id']}/events/Timeout"))
print(call("GET", "/audit/verify")[1])

server.shutdown()

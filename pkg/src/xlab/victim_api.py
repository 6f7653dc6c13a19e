"""The deployed victim: a hard-label (or soft-label) prediction service with a query budget.

The same semantics are offered in-process (``VictimEndpoint``) and over
HTTP (``serve`` plus ``RemoteClient``). Budget is charged per sample and is
reserved atomically before inference, so concurrent callers can never
oversell it; an oversized batch is rejected whole.

Wire protocol (UTF-8 JSON)::

    POST /v1/predict  {"inputs": [[x, ...], ...]}
        200 {"labels": [k, ...]}             hard mode
        200 {"probs": [[p, ...], ...]}       soft mode
        429 {"error": "budget_exhausted", "remaining": n}
        400 {"error": "bad_dimension"} | {"error": "bad_request"}
    GET /v1/info
        200 {"num_classes": K, "input_dim": d, "label_mode": "hard",
             "remaining_budget": n | null}
"""

from __future__ import annotations

import http.client
import json
import logging
import math
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

import numpy as np

from .errors import BudgetExhausted, ConfigError, NumericInputError, ShapeError, StateError, TransportError
from .modelzoo import ComposedModel, predict
from .numcore import as_matrix

logger = logging.getLogger(__name__)

LABEL_MODES = ("hard", "soft")


class QueryLedger:
    """Per-sample budget accounting. ``budget == 0`` means unlimited."""

    def __init__(self, budget: int = 0):
        if budget < 0:
            raise ConfigError("budget must be nonnegative")
        self.budget = int(budget)
        self._spent = 0
        self._lock = threading.Lock()

    @property
    def spent(self) -> int:
        return self._spent

    @property
    def remaining(self) -> int | None:
        if self.budget == 0:
            return None
        with self._lock:
            return self.budget - self._spent

    def reserve(self, n: int) -> None:
        with self._lock:
            if self.budget and self._spent + n > self.budget:
                raise BudgetExhausted(self.budget - self._spent, n)
            self._spent += n

    def refund(self, n: int) -> None:
        with self._lock:
            self._spent -= n


class VictimEndpoint:
    """In-process black-box wrapper around a trained model."""

    def __init__(self, model: ComposedModel, label_mode: str = "hard", budget: int = 0, endpoint_id: str | None = None):
        if label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {label_mode!r}")
        self._model = model
        self.label_mode = label_mode
        self.ledger = QueryLedger(budget)
        self.endpoint_id = endpoint_id or uuid.uuid4().hex[:12]

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    @property
    def input_dim(self) -> int:
        return self._model.input_dim

    def info(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "label_mode": self.label_mode,
            "remaining_budget": self.ledger.remaining,
        }

    def remaining(self) -> int | None:
        return self.ledger.remaining

    def query(self, batch) -> np.ndarray:
        x = as_matrix(batch, "batch")
        if x.shape[0] == 0:
            raise ShapeError("empty query batch")
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"batch has {x.shape[1]} columns, endpoint expects {self.input_dim}")
        n = x.shape[0]
        self.ledger.reserve(n)
        try:
            return predict(self._model, x, self.label_mode)
        except Exception:
            self.ledger.refund(n)
            raise


def deploy(model: ComposedModel, label_mode: str = "hard", budget: int = 0, endpoint_id: str | None = None) -> VictimEndpoint:
    if not model.trained:
        raise StateError("only trained models can be deployed")
    return VictimEndpoint(model, label_mode, budget, endpoint_id)


# -- JSON with 17 significant digits ---------------------------------------------


def _encode(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(bool(obj) if isinstance(obj, np.bool_) else obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            raise NumericInputError("cannot serialise a non-finite real")
        text = format(value, ".17g")
        # keep a float marker so integral values (and -0.0) decode as floats
        return text if any(c in text for c in ".en") else text + ".0"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj) -> bytes:
    return _encode(obj).encode("utf-8")


# -- server -----------------------------------------------------------------


def _make_handler(endpoint: VictimEndpoint):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "xlab-victim/1"

        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status, payload):
            body = dumps(payload)
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Connection", "close")
            self.end_headers()
            self.wfile.write(body)
            self.close_connection = True

        def do_GET(self):
            if self.path == "/v1/info":
                self._send(200, endpoint.info())
            else:
                self._send(404, {"error": "not_found"})

        def do_POST(self):
            if self.path != "/v1/predict":
                self._send(404, {"error": "not_found"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                request = json.loads(self.rfile.read(length).decode("utf-8"))
                rows = request["inputs"]
                if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
                    raise ValueError("inputs must be a list of rows")
            except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                self._send(400, {"error": "bad_request"})
                return
            if not rows or len({len(r) for r in rows}) != 1 or len(rows[0]) != endpoint.input_dim:
                self._send(400, {"error": "bad_dimension"})
                return
            try:
                batch = np.array(rows, dtype=np.float64)
                result = endpoint.query(batch)
            except BudgetExhausted as exc:
                self._send(429, {"error": "budget_exhausted", "remaining": exc.remaining})
                return
            except ShapeError:
                self._send(400, {"error": "bad_dimension"})
                return
            except (ValueError, TypeError):
                self._send(400, {"error": "bad_request"})
                return
            if endpoint.label_mode == "hard":
                self._send(200, {"labels": [int(v) for v in result]})
            else:
                self._send(200, {"probs": result})

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128


class VictimServer:
    """Background HTTP server for one endpoint. Use as a context manager or call ``close``."""

    def __init__(self, endpoint: VictimEndpoint, address=("127.0.0.1", 0)):
        handler = _make_handler(endpoint)
        self._httpd = _Server(tuple(address), handler)
        self.endpoint = endpoint
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return host, port

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "VictimServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="victim-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def close(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(endpoint: VictimEndpoint, address=("127.0.0.1", 0)) -> VictimServer:
    """Start serving ``endpoint`` in a background thread and return the running server."""
    return VictimServer(endpoint, address).start()


class RemoteClient:
    """Query client for a remote victim; same interface and errors as ``VictimEndpoint``."""

    def __init__(self, address, timeout: float = 30.0):
        if isinstance(address, str):
            parts = urlsplit(address if "//" in address else f"http://{address}")
            if not parts.hostname or not parts.port:
                raise ConfigError(f"cannot parse endpoint address {address!r}")
            self.host, self.port = parts.hostname, parts.port
        else:
            self.host, self.port = address[0], int(address[1])
        self.timeout = timeout
        self._info = None

    def _request(self, method, path, body=None):
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            headers = {"Content-Type": "application/json"} if body is not None else {}
            conn.request(method, path, body=body, headers=headers)
            resp = conn.getresponse()
            raw = resp.read()
            status = resp.status
        except (OSError, http.client.HTTPException) as exc:
            raise TransportError(f"{method} {path} failed: {exc}") from exc
        finally:
            conn.close()
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TransportError(f"unparseable response to {method} {path}") from exc
        return status, payload

    def info(self) -> dict:
        status, payload = self._request("GET", "/v1/info")
        if status != 200:
            raise TransportError(f"info request failed with HTTP {status}")
        self._info = payload
        return payload

    @property
    def num_classes(self) -> int:
        return (self._info or self.info())["num_classes"]

    @property
    def input_dim(self) -> int:
        return (self._info or self.info())["input_dim"]

    def remaining(self) -> int | None:
        return self.info()["remaining_budget"]

    def query(self, batch) -> np.ndarray:
        x = as_matrix(batch, "batch")
        if x.shape[0] == 0:
            raise ShapeError("empty query batch")
        status, payload = self._request("POST", "/v1/predict", dumps({"inputs": x}))
        if status == 200:
            if "labels" in payload:
                return np.asarray(payload["labels"], dtype=np.int64)
            return np.asarray(payload["probs"], dtype=np.float64)
        err = payload.get("error") if isinstance(payload, dict) else None
        if status == 429 and err == "budget_exhausted":
            raise BudgetExhausted(payload.get("remaining"), x.shape[0])
        if status == 400 and err == "bad_dimension":
            raise ShapeError("victim rejected the batch dimension")
        raise TransportError(f"unexpected HTTP {status}: {payload!r}")

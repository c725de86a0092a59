"""JSON prediction API and a small threaded HTTP server around it."""

from __future__ import annotations

import hmac
import json
import logging
import os
import threading
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .inference import (
    InferenceError,
    PredictOptions,
    SchemaError,
    UnsupportedTask,
    predict,
)
from .model import ModelParams
from .trainer import load_trained

log = logging.getLogger(__name__)

TOKEN_ENV = "TABDESK_API_TOKEN"
CHECKPOINT_ENV = "TABDESK_CHECKPOINT"
DEFAULT_INTERVALS = (0.5, 0.9)
MAX_MEMBERS = 64


class RequestError(Exception):
    """Carries an HTTP status and a structured error document."""

    def __init__(self, status: int, kind: str, message: str, field: str | None = None, columns=None):
        super().__init__(message)
        self.status = status
        self.doc = {"error": {"type": kind, "message": message}}
        if field is not None:
            self.doc["error"]["field"] = field
        if columns:
            self.doc["error"]["columns"] = list(columns)


def _bad(message, field, columns=None):
    return RequestError(400, "validation", message, field, columns)


# ---------------------------------------------------------------------------
# model snapshot


def default_checkpoint() -> Path:
    env = os.environ.get(CHECKPOINT_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("tabdesk") / "data" / "desk_model.tdck"))


@dataclass(frozen=True)
class Snapshot:
    params: ModelParams
    version: str


class ModelHolder:
    """Immutable snapshots swapped atomically; requests read whichever snapshot is current."""

    def __init__(self, params: ModelParams, version: str | None = None):
        self._lock = threading.Lock()
        self._snap = Snapshot(params, version or params.fingerprint()[:12])

    @classmethod
    def from_checkpoint(cls, path=None) -> ModelHolder:
        path = Path(path) if path is not None else default_checkpoint()
        if not path.exists():
            raise FileNotFoundError(f"no model checkpoint at {path}; train one with `tabdesk train`")
        return cls(load_trained(path, np.float64))

    @property
    def snapshot(self) -> Snapshot:
        with self._lock:
            return self._snap

    def reload(self, params: ModelParams, version: str | None = None):
        snap = Snapshot(params, version or params.fingerprint()[:12])
        with self._lock:
            self._snap = snap


# ---------------------------------------------------------------------------
# request handling


@dataclass(frozen=True)
class ParsedRequest:
    task: str
    target: str
    train: pd.DataFrame
    y: list
    test: pd.DataFrame
    options: PredictOptions
    intervals: tuple
    request_id: object = None


def _table(body: dict, name: str) -> tuple[list, list]:
    part = body.get(name)
    if not isinstance(part, dict):
        raise _bad(f"{name} must be an object with columns and data", name)
    cols, data = part.get("columns"), part.get("data")
    if not isinstance(cols, list) or not cols or not all(isinstance(c, str) for c in cols):
        raise _bad(f"{name}.columns must be a nonempty list of strings", f"{name}.columns")
    if len(set(cols)) != len(cols):
        raise _bad(f"{name}.columns has duplicates", f"{name}.columns")
    if not isinstance(data, list) or not data:
        raise _bad(f"{name}.data must be a nonempty list of rows", f"{name}.data")
    for i, row in enumerate(data):
        if not isinstance(row, list):
            raise _bad(f"{name}.data[{i}] must be a list", f"{name}.data[{i}]")
        if len(row) != len(cols):
            raise _bad(f"{name}.data[{i}] has {len(row)} values for {len(cols)} columns", f"{name}.data[{i}]")
        for j, v in enumerate(row):
            if not (v is None or isinstance(v, (int, float, str, bool))):
                raise _bad(f"{name}.data[{i}][{j}] must be a scalar", f"{name}.data[{i}][{j}]")
    return cols, data


def parse_request(body) -> ParsedRequest:
    if not isinstance(body, dict):
        raise _bad("request body must be a JSON object", "")
    task = body.get("task")
    if task is None:
        raise _bad("task is required", "task")
    if task not in ("classification", "regression"):
        raise _bad("task must be 'classification' or 'regression'", "task")
    target = body.get("target_column")
    if not isinstance(target, str) or not target:
        raise _bad("target_column is required", "target_column")
    tr_cols, tr_data = _table(body, "train")
    te_cols, te_data = _table(body, "test")
    if target not in tr_cols:
        raise _bad(f"target_column {target!r} is not a train column", "target_column")
    features = [c for c in tr_cols if c != target]
    if not features:
        raise _bad("train needs at least one feature column", "train.columns")
    test_features = [c for c in te_cols if c != target]
    if set(features) != set(test_features):
        bad = sorted(set(features) ^ set(test_features))
        raise RequestError(400, "schema", f"train/test feature columns differ: {bad}", "test.columns", bad)
    train = pd.DataFrame(tr_data, columns=tr_cols)
    y = train.pop(target).tolist()
    if any(v is None for v in y):
        raise _bad("target values must not be null", f"train.data[*][{tr_cols.index(target)}]")
    test = pd.DataFrame(te_data, columns=te_cols).loc[:, features]
    train = train.infer_objects()
    test = test.infer_objects()
    opts = body.get("options") or {}
    if not isinstance(opts, dict):
        raise _bad("options must be an object", "options")
    members = opts.get("ensemble_size", PredictOptions.n_members)
    chunk = opts.get("chunk_size", PredictOptions.chunk_size)
    seed = opts.get("seed", 0)
    intervals = opts.get("interval_levels", list(DEFAULT_INTERVALS))
    if not isinstance(members, int) or isinstance(members, bool) or not 1 <= members <= MAX_MEMBERS:
        raise _bad(f"options.ensemble_size must be an integer in [1, {MAX_MEMBERS}]", "options.ensemble_size")
    if not isinstance(chunk, int) or isinstance(chunk, bool) or chunk < 2:
        raise _bad("options.chunk_size must be an integer >= 2", "options.chunk_size")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise _bad("options.seed must be a non-negative integer", "options.seed")
    if not isinstance(intervals, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and 0 < v < 1 for v in intervals
    ):
        raise _bad("options.interval_levels must be a list of numbers in (0, 1)", "options.interval_levels")
    options = PredictOptions(n_members=members, chunk_size=chunk, seed=seed)
    return ParsedRequest(task, target, train, y, test, options, tuple(float(v) for v in intervals),
                         body.get("request_id"))


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def build_response(req: ParsedRequest, snapshot: Snapshot) -> dict:
    res = predict(snapshot.params, req.train, req.y, req.test, req.task, req.options)
    doc = {
        "task": req.task,
        "target_column": req.target,
        "predictions": [_plain(v) for v in res.predictions.tolist()],
        "probabilities": None,
        "classes": None,
        "quantile_summary": None,
        "model_version": snapshot.version,
        "member_count": res.member_count,
    }
    if req.request_id is not None:
        doc["request_id"] = req.request_id
    if res.probabilities is not None:
        doc["probabilities"] = res.probabilities.tolist()
        doc["classes"] = [_plain(c) for c in res.classes]
    else:
        s = res.summary(req.intervals)
        doc["quantile_summary"] = {
            "mean": s["mean"].tolist(),
            "median": s["median"].tolist(),
            "variance": s["variance"].tolist(),
            "intervals": {f"{lvl:g}": np.stack([lo, hi], axis=-1).tolist() for lvl, (lo, hi) in s["intervals"].items()},
        }
    return doc


def handle_predict(body, holder: ModelHolder | Snapshot) -> tuple[int, dict]:
    """Validate and answer one predict request. Returns (HTTP status, JSON document)."""
    snapshot = holder.snapshot if isinstance(holder, ModelHolder) else holder
    try:
        req = parse_request(body)
        return 200, build_response(req, snapshot)
    except RequestError as exc:
        return exc.status, exc.doc
    except UnsupportedTask as exc:
        return 422, {"error": {"type": "unsupported", "message": str(exc)}}
    except SchemaError as exc:
        return 400, RequestError(400, "schema", str(exc), None, exc.columns).doc
    except InferenceError as exc:
        return 400, {"error": {"type": "validation", "message": str(exc)}}
    except Exception:
        log.exception("predict failed")
        return 500, {"error": {"type": "internal", "message": "internal error while predicting"}}


# ---------------------------------------------------------------------------
# HTTP


class PredictHandler(BaseHTTPRequestHandler):
    holder: ModelHolder = None
    token: str | None = None
    protocol_version = "HTTP/1.1"

    def _send(self, status: int, doc: dict):
        raw = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _authorized(self) -> bool:
        if self.token is None:
            return True
        header = self.headers.get("Authorization", "")
        scheme, _, value = header.partition(" ")
        return scheme.lower() == "bearer" and hmac.compare_digest(value.strip().encode(), self.token.encode())

    def do_POST(self):
        if self.path.rstrip("/") != "/api/v1/predict":
            self._send(404, {"error": {"type": "not_found", "message": f"no route {self.path}"}})
            return
        if not self._authorized():
            self._send(401, {"error": {"type": "unauthorized", "message": "missing or invalid bearer token"}})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"null")
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": {"type": "validation", "message": "body is not valid JSON", "field": ""}})
            return
        status, doc = handle_predict(body, self.holder)
        self._send(status, doc)

    def do_GET(self):
        if self.path.rstrip("/") == "/api/v1/health":
            self._send(200, {"status": "ok", "model_version": self.holder.snapshot.version})
        else:
            self._send(HTTPStatus.NOT_FOUND, {"error": {"type": "not_found", "message": f"no route {self.path}"}})

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)


def make_server(holder: ModelHolder, host: str = "127.0.0.1", port: int = 8000, token: str | None = None) -> ThreadingHTTPServer:
    handler = type("BoundPredictHandler", (PredictHandler,), {"holder": holder, "token": token})
    return ThreadingHTTPServer((host, port), handler)

"""Newline-delimited JSON service mode for the EO and the serving layer.

Each connection reads one JSON object per line and writes exactly one JSON
response line per request, in order. :class:`EOService` and
:class:`RecsService` are the in-process bindings; the socket servers only add
framing around their ``handle`` methods.

Errors never close the connection. They come back as
``{"ok": false, "error": "<ErrorName>", "message": "..."}``.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from typing import Any, Callable, Mapping

from embserve.engine import SearchEngine
from embserve.errors import EmbServeError
from embserve.orchestrator import EmbeddingsOrchestrator
from embserve.serving import ServingLayer, UserRequest
from embserve.store import EmbeddingTypeId, EntityId
from embserve.trainer import ModelKind

log = logging.getLogger(__name__)


class BadRequest(EmbServeError, ValueError):
    """The request line is not a well-formed request for the named op."""


def _weights(raw: Any, what: str) -> dict[str, float]:
    if not isinstance(raw, Mapping):
        raise BadRequest(f"{what} must be an object of id -> weight")
    return {str(k): float(v) for k, v in raw.items()}


def _int(req: Mapping[str, Any], key: str) -> int:
    value = req.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise BadRequest(f"{key} must be an integer")
    return value


def _error(exc: Exception) -> dict:
    code = exc.code if isinstance(exc, EmbServeError) else "BadRequest"
    return {"ok": False, "error": code, "message": str(exc)}


def _vector_response(tf: int, vec, misses=None) -> dict:
    out: dict[str, Any] = {"ok": True, "tf": tf, "vec": list(vec)}
    if misses is not None:
        out["misses"] = [str(m) for m in misses]
    return out


class _Service:
    ops: dict[str, Callable[[Any, Mapping[str, Any]], dict]] = {}

    def __init__(self, eo: EmbeddingsOrchestrator) -> None:
        self.eo = eo

    def _type(self, req: Mapping[str, Any]) -> EmbeddingTypeId:
        t = req.get("type")
        if not isinstance(t, Mapping) or "algo" not in t or "config" not in t:
            raise BadRequest('type must look like {"algo": .., "config": ..}')
        return self.eo.resolve_type(str(t["algo"]), str(t["config"]))

    def handle(self, req: Any) -> dict:
        """Answer one decoded request. Never raises."""
        try:
            if not isinstance(req, Mapping):
                raise BadRequest("request must be a JSON object")
            op = self.ops.get(req.get("op"))
            if op is None:
                raise BadRequest(f"unknown op {req.get('op')!r}")
            return op(self, req)
        except (EmbServeError, TypeError, ValueError) as exc:
            return _error(exc)

    def handle_line(self, line: str | bytes) -> str:
        try:
            req = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            resp = {"ok": False, "error": "MalformedLine", "message": str(exc)}
        else:
            resp = self.handle(req)
        return json.dumps(resp, sort_keys=True, separators=(",", ":"))


class EOService(_Service):
    """In-process binding of the EO line protocol."""

    def _get_user_embedding(self, req):
        type_id = self._type(req)
        kind = self.eo.model_kind(type_id)
        if kind is ModelKind.DIRECT_DIRECT:
            if "user_id" not in req:
                raise BadRequest("this type resolves users by user_id")
            key: Any = EntityId.user(str(req["user_id"]))
        else:
            if "attrs" not in req:
                raise BadRequest("this type resolves users from attrs")
            weights = _weights(req["attrs"], "attrs")
            # Indirect-Direct users are built from consumed items, the others from attributes
            make = EntityId.item if kind is ModelKind.INDIRECT_DIRECT else EntityId.attribute
            key = {make(a): w for a, w in weights.items()}
        resp = self.eo.get_user_embedding(type_id, key)
        if resp is None:
            return {"ok": True, "absent": True}
        return _vector_response(resp.version.time_frame, resp.vector)

    def _get_entity_embedding(self, req):
        type_id = self._type(req)
        entity = EntityId(str(req.get("kind")), str(req.get("id")))
        vec = self.eo.get_entity_embedding(type_id, type_id.version(_int(req, "tf")), entity)
        if vec is None:
            return {"ok": True, "absent": True}
        return _vector_response(_int(req, "tf"), vec)

    def _aggregate(self, req):
        type_id = self._type(req)
        tf = _int(req, "tf")
        attrs = {EntityId.attribute(a): w for a, w in _weights(req.get("attrs"), "attrs").items()}
        agg = self.eo.aggregate_embedding(type_id, type_id.version(tf), attrs)
        if agg.vector is None:
            return {"ok": True, "absent": True, "misses": [m.id for m in agg.misses]}
        out = _vector_response(tf, agg.vector)
        out["misses"] = [m.id for m in agg.misses]
        return out

    def _states(self, type_id: EmbeddingTypeId, states) -> dict:
        return {
            "ok": True,
            "latest": states.latest.time_frame if states.latest is not None else None,
            "in_use": states.in_use.time_frame if states.in_use is not None else None,
        }

    def _get_states(self, req):
        type_id = self._type(req)
        return self._states(type_id, self.eo.get_states(type_id))

    def _set_in_use(self, req):
        type_id = self._type(req)
        return self._states(type_id, self.eo.set_version_in_use(type_id, type_id.version(_int(req, "tf"))))

    def _poll(self, req):
        type_id = self._type(req)
        self.eo.poll(type_id)
        return self._states(type_id, self.eo.get_states(type_id))

    ops = {
        "get_user_embedding": _get_user_embedding,
        "get_entity_embedding": _get_entity_embedding,
        "aggregate": _aggregate,
        "get_states": _get_states,
        "set_in_use": _set_in_use,
        "poll": _poll,
    }


class RecsService(_Service):
    """In-process binding of the recommend line protocol."""

    def __init__(self, serving: ServingLayer) -> None:
        super().__init__(serving.eo)
        self.serving = serving

    def _recommend(self, req):
        type_id = self._type(req)
        k = req.get("k", 10)
        if isinstance(k, bool) or not isinstance(k, int):
            raise BadRequest("k must be an integer")
        request = UserRequest(
            user_id=str(req.get("user_id", "")),
            user_attributes=_weights(req.get("attrs", {}), "attrs"),
            user_geo=str(req.get("geo", "")),
            publisher_id=str(req.get("publisher", "")),
            k=k,
            consumed_items=_weights(req.get("consumed", {}), "consumed"),
        )
        results = self.serving.recommend(request, type_id)
        return {"ok": True, "results": [r.to_json() for r in results]}

    ops = {"recommend": _recommend}


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: _Service = self.server.service  # type: ignore[attr-defined]
        for raw in self.rfile:
            if not raw.strip():
                continue
            self.wfile.write(service.handle_line(raw).encode("utf-8") + b"\n")
            self.wfile.flush()


class LineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: _Service) -> None:
        super().__init__(address, _LineHandler)
        self.service = service

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="line-server", daemon=True)
        thread.start()
        return thread


def serve_eo(eo: EmbeddingsOrchestrator, host: str = "127.0.0.1", port: int = 0) -> LineServer:
    return LineServer((host, port), EOService(eo))


def serve_recs(
    eo: EmbeddingsOrchestrator, engine: SearchEngine, serving: ServingLayer | None = None,
    host: str = "127.0.0.1", port: int = 0,
) -> LineServer:
    return LineServer((host, port), RecsService(serving or ServingLayer(eo, engine)))

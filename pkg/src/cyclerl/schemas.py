"""Published JSON schemas (report files and the teleop wire protocol)."""
from __future__ import annotations

import json
from importlib import resources


def _load(name: str) -> dict:
    ref = resources.files("cyclerl") / "schemas" / name
    return json.loads(ref.read_text())


def report_schema() -> dict:
    return _load("report.schema.json")


def wire_schema() -> dict:
    return _load("wire.schema.json")


def client_message_schema() -> dict:
    s = wire_schema()
    return {"$defs": s["$defs"], **s["$defs"]["client_message"]}


def server_message_schema() -> dict:
    s = wire_schema()
    return {"$defs": s["$defs"], **s["$defs"]["server_message"]}

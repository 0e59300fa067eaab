"""Newline-delimited JSON wire protocol over stdin/stdout.

On startup the server emits one hello line declaring its manifest; it then
answers each run request in order with a signal or an error message. One
request is in flight at a time; the process is single-threaded and declares
``serial: true``.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class SimManifest:
    l: int
    channels: tuple[str, ...]
    horizon: int
    serial: bool = True

    def hello(self) -> dict:
        return {
            "type": "hello",
            "l": self.l,
            "channels": list(self.channels),
            "horizon": self.horizon,
            "serial": self.serial,
        }


def serve(manifest: SimManifest, run: Callable[[np.ndarray], np.ndarray],
          stdin=None, stdout=None) -> None:
    """Answer requests until EOF. ``run`` maps a length-l vector to a
    (horizon, channels) array; any exception it raises becomes an error
    response rather than a crash."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def emit(message: dict):
        stdout.write(json.dumps(message) + "\n")
        stdout.flush()

    emit(manifest.hello())
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        req_id = -1
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            req_id = int(request.get("id", -1))
            if request.get("type") != "run":
                raise ValueError(f"unknown request type {request.get('type')!r}")
            w = np.asarray(request["w"], dtype=float)
            if w.shape != (manifest.l,):
                raise ValueError(f"expected {manifest.l} uncertainty values, got {w.shape}")
            y = np.asarray(run(w), dtype=float)
            if y.shape != (manifest.horizon, len(manifest.channels)):
                raise ValueError(f"simulator produced shape {y.shape}")
            emit({"type": "signal", "id": req_id, "y": [[float(v) for v in row] for row in y]})
        except Exception as exc:  # protocol requires an error message, not a crash
            emit({"type": "error", "id": req_id, "message": str(exc)})

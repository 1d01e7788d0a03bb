"""Line-delimited wire protocol for attaching an external masked scorer.

On connect both sides exchange a versioned header line, then the client
sends one JSON object per line::

    {"tokens": [...], "masks": [...], "fills": [[...], ...]}

``fills`` holds one piece-id row per query, aligned with ``masks``. The
server answers ``{"log_probs": [[...], ...]}`` (same shape as ``fills``) or
``{"error": "..."}``. Works over any socket or pipe pair.
"""

from __future__ import annotations

import json
import socket

import numpy as np

from .errors import ConfigError
from .expand import MaskedScorer

HEADER = "refilter-scorer/1"


def serve_connection(scorer: MaskedScorer, rfile, wfile) -> None:
    """Answer requests on an open text stream pair until EOF."""
    client = rfile.readline().strip()
    if client != HEADER:
        wfile.write(json.dumps({"error": f"bad header {client!r}"}) + "\n")
        wfile.flush()
        return
    wfile.write(HEADER + " ok\n")
    wfile.flush()
    for line in rfile:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            fills = np.asarray(req["fills"], dtype=np.int64)
            out = scorer.fill_log_probs(req["tokens"], req["masks"], fills)
            resp = {"log_probs": out.tolist()}
        except Exception as exc:  # report, keep serving
            resp = {"error": str(exc)}
        wfile.write(json.dumps(resp) + "\n")
        wfile.flush()


def serve_socket(scorer: MaskedScorer, sock: socket.socket) -> None:
    with sock.makefile("r", encoding="utf-8") as rfile, sock.makefile(
        "w", encoding="utf-8"
    ) as wfile:
        serve_connection(scorer, rfile, wfile)


class ExternalScorer(MaskedScorer):
    """Masked scorer backed by a remote process speaking the line protocol."""

    def __init__(self, rfile, wfile):
        self._rfile = rfile
        self._wfile = wfile
        self._wfile.write(HEADER + "\n")
        self._wfile.flush()
        ack = self._rfile.readline().strip()
        if ack != HEADER + " ok":
            raise ConfigError(f"scorer handshake failed: {ack!r}")

    @classmethod
    def connect(cls, address: str) -> "ExternalScorer":
        """``host:port`` TCP or a unix socket path."""
        if ":" in address:
            host, port = address.rsplit(":", 1)
            sock = socket.create_connection((host, int(port)))
        else:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(address)
        rfile = sock.makefile("r", encoding="utf-8")
        wfile = sock.makefile("w", encoding="utf-8")
        return cls(rfile, wfile)

    def position_log_probs(self, token_ids, mask_positions) -> np.ndarray:
        raise NotImplementedError("remote scorers answer fill queries only")

    def fill_log_probs(self, token_ids, mask_positions, fills) -> np.ndarray:
        req = {
            "tokens": [int(t) for t in token_ids],
            "masks": [int(m) for m in mask_positions],
            "fills": np.asarray(fills, dtype=np.int64).tolist(),
        }
        self._wfile.write(json.dumps(req) + "\n")
        self._wfile.flush()
        line = self._rfile.readline()
        if not line:
            raise ConfigError("scorer connection closed")
        resp = json.loads(line)
        if "error" in resp:
            raise ConfigError(f"scorer error: {resp['error']}")
        return np.asarray(resp["log_probs"], dtype=np.float64)

"""Newline-delimited JSON protocol for remote environment and policy use.

One TCP connection is one session.  The server greets with a handshake
line, then answers one JSON reply per JSON request:

    {"cmd": "reset", "seed": 7}          -> {"obs": {...}, "penetration": p}
    {"cmd": "step", "actions": {id: a}}  -> {"obs": {...}, "reward": r,
                                             "dones": {...}, "info": {...}}
    {"cmd": "close"}                     -> {"ok": true}

Malformed input gets {"error": msg} and the session survives.  A policy
server speaks the same framing with a single verb:

    {"cmd": "act", "obs": {id: [...]}}   -> {"actions": {id: a}}
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from pathlib import Path
from typing import Dict, Optional

from .env import BottleneckEnv, EpisodeConfig

PROTOCOL_VERSION = 1


def send_line(sock: socket.socket, payload: dict) -> None:
    sock.sendall((json.dumps(payload) + "\n").encode())


class LineReader:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = b""

    def readline(self) -> Optional[bytes]:
        while b"\n" not in self.buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line


class _EnvHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: EnvServer = self.server
        env = BottleneckEnv(server.cfg)
        log = None
        if server.log_dir is not None:
            server.log_dir.mkdir(parents=True, exist_ok=True)
            log = (server.log_dir / f"session-{self.client_address[1]}.jsonl").open("w")
        send_line(self.request, {
            "protocol": "lanedrop-env",
            "version": PROTOCOL_VERSION,
            "state_space": server.cfg.state_space,
            "obs_dim": server.cfg.observation_size(),
        })
        reader = LineReader(self.request)
        try:
            while True:
                line = reader.readline()
                if line is None:
                    break
                try:
                    msg = json.loads(line)
                    cmd = msg["cmd"]
                    if cmd == "reset":
                        obs = env.reset(int(msg.get("seed", 0)))
                        reply = {"obs": obs, "penetration": env.penetration}
                    elif cmd == "step":
                        actions = msg.get("actions") or {}
                        obs, reward, dones, info = env.step(actions)
                        reply = {"obs": obs, "reward": reward,
                                 "dones": dones, "info": info}
                    elif cmd == "close":
                        send_line(self.request, {"ok": True})
                        break
                    else:
                        reply = {"error": f"unknown command {cmd!r}"}
                except (KeyError, ValueError, TypeError, RuntimeError,
                        json.JSONDecodeError) as exc:
                    reply = {"error": str(exc)}
                send_line(self.request, reply)
                if log is not None and "error" not in reply:
                    log.write(json.dumps({"request": json.loads(line), "reply": reply}) + "\n")
        finally:
            if log is not None:
                log.close()
            env.close()


class EnvServer(socketserver.ThreadingTCPServer):
    """Hosts independent environment sessions, one per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, cfg: EpisodeConfig, log_dir: Optional[str] = None):
        super().__init__(address, _EnvHandler)
        self.cfg = cfg
        self.log_dir = Path(log_dir) if log_dir else None

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(cfg: EpisodeConfig, host: str = "127.0.0.1", port: int = 0,
          log_dir: Optional[str] = None, ready=None) -> None:
    """Run the environment server until interrupted."""
    with EnvServer((host, port), cfg, log_dir) as server:
        if ready is not None:
            ready(server.port)
        else:
            print(f"listening on {host}:{server.port}", flush=True)
        server.serve_forever()


class EnvClient:
    """Blocking client for the environment protocol."""

    def __init__(self, host: str, port: int, timeout: float = 120.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.reader = LineReader(self.sock)
        self.hello = self._recv()
        if self.hello.get("protocol") != "lanedrop-env":
            raise ConnectionError(f"unexpected handshake: {self.hello}")

    def _recv(self) -> dict:
        line = self.reader.readline()
        if line is None:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def _call(self, msg: dict) -> dict:
        send_line(self.sock, msg)
        reply = self._recv()
        if "error" in reply:
            raise RuntimeError(reply["error"])
        return reply

    def reset(self, seed: int = 0) -> dict:
        return self._call({"cmd": "reset", "seed": seed})

    def step(self, actions: Dict[str, float]) -> dict:
        return self._call({"cmd": "step", "actions": actions})

    def close(self) -> None:
        try:
            send_line(self.sock, {"cmd": "close"})
            self.reader.readline()
        except OSError:
            pass
        self.sock.close()


class PolicyClient:
    """Client for an external action server (evaluate --mode policy)."""

    def __init__(self, endpoint: str, timeout: float = 120.0):
        host, _, port = endpoint.rpartition(":")
        try:
            self.sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                                 timeout=timeout)
        except OSError as exc:
            raise ConnectionError(f"policy endpoint {endpoint} unreachable: {exc}")
        self.reader = LineReader(self.sock)
        hello = json.loads(self.reader.readline() or b"{}")
        if hello.get("protocol") != "lanedrop-policy":
            raise ConnectionError(f"unexpected policy handshake: {hello}")

    def act(self, obs: Dict[str, list]) -> Dict[str, float]:
        send_line(self.sock, {"cmd": "act", "obs": obs})
        reply = json.loads(self.reader.readline() or b"{}")
        if "error" in reply:
            raise RuntimeError(reply["error"])
        return {str(k): float(v) for k, v in reply.get("actions", {}).items()}

    def close(self) -> None:
        self.sock.close()

"""Remote-agent wire protocol.

Each message is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON. A session is ``HELLO`` (both ways), then strictly alternating
``OBS``/``ACT`` pairs tagged with the step number, then ``BYE``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import socket
import socketserver
import struct
import threading
import time

from .agents import DISCRETE_ACTIONS, Agent, AgentError, AgentInterface
from .sensing import StackedObservation, stacked_from_wire, stacked_to_wire
from .vehicle import (FULL_BRAKE, ActuatorDynamic, Continuous, LaneFollowing, Trajectory,
                      TrajectoryPoint)

log = logging.getLogger(__name__)

VERSION = 1
HEADER = struct.Struct(">I")
MAX_MESSAGE = 16 * 1024 * 1024
DEFAULT_TIMEOUT_MS = 1000
CONNECT_ATTEMPTS = 3


class ProtocolError(RuntimeError):
    pass


def timeout_seconds() -> float:
    raw = os.environ.get("AGENT_TIMEOUT_MS")
    ms = float(raw) if raw else DEFAULT_TIMEOUT_MS
    return ms / 1000.0


# --- framing -----------------------------------------------------------------

def pack_message(msg: dict) -> bytes:
    body = json.dumps(msg, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, msg: dict):
    sock.sendall(pack_message(msg))


def recv_message(sock: socket.socket) -> dict:
    (n,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if n > MAX_MESSAGE:
        raise ProtocolError(f"message of {n} bytes exceeds limit")
    try:
        msg = json.loads(_recv_exact(sock, n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"undecodable message: {e}") from None
    if not isinstance(msg, dict) or "type" not in msg:
        raise ProtocolError("message without a type")
    return msg


# --- action codec ----------------------------------------------------------------

def encode_action(action) -> dict:
    if isinstance(action, str):
        return {"kind": "Discrete", "action": action}
    if isinstance(action, LaneFollowing):
        return {"kind": "LaneFollowing", "target_speed": action.target_speed,
                "lane_change": action.lane_change}
    if isinstance(action, Continuous):
        return {"kind": "Continuous", "throttle": action.throttle, "brake": action.brake,
                "steering": action.steering}
    if isinstance(action, ActuatorDynamic):
        return {"kind": "ActuatorDynamic", "throttle": action.throttle, "brake": action.brake,
                "steering_rate": action.steering_rate}
    if isinstance(action, Trajectory):
        return {"kind": "Trajectory",
                "points": [[p.x, p.y, p.heading, p.speed, p.time] for p in action.points]}
    raise TypeError(f"cannot encode action {action!r}")


def _num(d: dict, key: str, lo: float = -math.inf, hi: float = math.inf) -> float:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ProtocolError(f"action field {key!r} must be a finite number")
    if not lo <= v <= hi:
        raise ProtocolError(f"action field {key!r}={v} out of range [{lo}, {hi}]")
    return float(v)


def decode_action(d) -> object:
    """Decode and range-check an action payload."""
    if not isinstance(d, dict):
        raise ProtocolError("action must be an object")
    kind = d.get("kind")
    if kind == "Discrete":
        if d.get("action") not in DISCRETE_ACTIONS:
            raise ProtocolError(f"unknown discrete action {d.get('action')!r}")
        return d["action"]
    if kind == "LaneFollowing":
        lc = d.get("lane_change")
        if isinstance(lc, bool) or lc not in (-1, 0, 1):
            raise ProtocolError("lane_change must be -1, 0 or 1")
        return LaneFollowing(_num(d, "target_speed", 0.0), int(lc))
    if kind == "Continuous":
        return Continuous(_num(d, "throttle", 0.0, 1.0), _num(d, "brake", 0.0, 1.0),
                          _num(d, "steering", -1.0, 1.0))
    if kind == "ActuatorDynamic":
        return ActuatorDynamic(_num(d, "throttle", 0.0, 1.0), _num(d, "brake", 0.0, 1.0),
                               _num(d, "steering_rate"))
    if kind == "Trajectory":
        pts = d.get("points")
        if not isinstance(pts, list) or not pts:
            raise ProtocolError("trajectory needs at least one point")
        out = []
        for p in pts:
            if not isinstance(p, list) or len(p) != 5:
                raise ProtocolError("trajectory point must be [x, y, heading, speed, time]")
            vals = [_num({"v": v}, "v") for v in p]
            out.append(TrajectoryPoint(*vals))
        try:
            return Trajectory(tuple(out))
        except ValueError as e:
            raise ProtocolError(str(e)) from None
    raise ProtocolError(f"unknown action kind {kind!r}")


def fallback_action(interface: AgentInterface):
    """In-range substitute used when a remote agent fails to answer."""
    return "slow_down" if interface.action_space == "Discrete4" else FULL_BRAKE


# --- client side -------------------------------------------------------------------

class Session:
    """Client end of one remote-agent connection."""

    def __init__(self, host: str, port: int, name: str = "remote", timeout: float | None = None,
                 attempts: int = CONNECT_ATTEMPTS):
        self.name = name
        self.timeout = timeout_seconds() if timeout is None else timeout
        self.protocol_errors = 0
        self.timeouts = 0
        last = None
        for k in range(attempts):
            try:
                self.sock = socket.create_connection((host, port), timeout=max(self.timeout, 1.0))
                break
            except OSError as e:
                last = e
                log.warning("connect to %s:%d failed (attempt %d/%d): %s", host, port, k + 1,
                            attempts, e)
                time.sleep(0.1 * 2 ** k)
        else:
            raise AgentError(f"cannot reach agent {name!r} at {host}:{port}: {last}")
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_message(self.sock, {"type": "HELLO", "version": VERSION, "agent": name})
        reply = recv_message(self.sock)
        if reply.get("type") != "HELLO" or reply.get("version") != VERSION:
            raise AgentError(f"agent {name!r} answered HELLO with {reply!r}")
        self.interface = AgentInterface(action_space=reply.get("action_space", "LaneFollowing"))
        self.step = 0

    def close(self):
        try:
            send_message(self.sock, {"type": "BYE"})
        except OSError:
            pass
        self.sock.close()


def remote_exchange(session: Session, obs: StackedObservation):
    """Send one observation, wait for the matching action.

    Returns ``(action, substitution)`` where ``substitution`` is ``None``,
    ``"timeout"`` or ``"malformed"``; on failure ``action`` is the braking
    fallback. Replies left over from an earlier timed-out step are discarded.
    """
    session.step += 1
    step = session.step
    deadline = time.monotonic() + session.timeout
    try:
        session.sock.settimeout(session.timeout)
        send_message(session.sock, {"type": "OBS", "step": step, "obs": stacked_to_wire(obs)})
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                raise socket.timeout()
            session.sock.settimeout(left)
            msg = recv_message(session.sock)
            if msg.get("type") == "ACT" and isinstance(msg.get("step"), int) and msg["step"] < step:
                continue
            if msg.get("type") != "ACT" or msg.get("step") != step:
                raise ProtocolError(f"unexpected reply {msg.get('type')!r} for step {step}")
            return decode_action(msg.get("action")), None
    except socket.timeout:
        session.timeouts += 1
        log.warning("agent %s timed out at step %d", session.name, step)
        return fallback_action(session.interface), "timeout"
    except ProtocolError as e:
        session.protocol_errors += 1
        log.warning("agent %s sent a bad reply at step %d: %s", session.name, step, e)
        return fallback_action(session.interface), "malformed"


class RemoteAgent(Agent):
    """Agent proxy for a policy served over the wire protocol."""

    def __init__(self, host: str, port: int, name: str = "remote", timeout: float | None = None):
        self.session = Session(host, port, name, timeout)
        self.interface = self.session.interface
        self.last_substitution = None

    def act(self, obs):
        action, self.last_substitution = remote_exchange(self.session, obs)
        return action

    def close(self):
        self.session.close()


# --- server side ------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        agent = None
        try:
            while True:
                try:
                    msg = recv_message(sock)
                except (ConnectionError, OSError):
                    return
                kind = msg["type"]
                if kind == "HELLO":
                    agent = server.factory()
                    send_message(sock, {"type": "HELLO", "version": VERSION,
                                        "action_space": agent.interface.action_space})
                elif kind == "OBS":
                    if agent is None:
                        raise ProtocolError("OBS before HELLO")
                    action = agent.act(stacked_from_wire(msg["obs"]))
                    if server.delay:
                        time.sleep(server.delay)
                    send_message(sock, {"type": "ACT", "step": msg["step"],
                                        "action": encode_action(action)})
                elif kind == "BYE":
                    return
                else:
                    raise ProtocolError(f"unknown message type {kind!r}")
        except (ProtocolError, OSError) as e:
            log.warning("session from %s ended: %s", self.client_address, e)
        finally:
            if agent is not None:
                agent.close()


class AgentServer(socketserver.ThreadingTCPServer):
    """Serve an agent factory; one fresh agent per connection.

    ``delay`` (seconds) is slept before each reply, which lets tests drive
    the client's timeout path.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, factory, host: str = "127.0.0.1", port: int = 0, delay: float = 0.0):
        super().__init__((host, port), _Handler)
        self.factory = factory
        self.delay = delay
        self._thread = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "AgentServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

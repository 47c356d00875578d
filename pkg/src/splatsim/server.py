"""Length-prefixed JSON protocol over TCP for external trainers.

Framing: a 4-byte big-endian unsigned payload length, then a UTF-8 JSON object
with a "type" field. Strict request/reply per connection; every connection
gets its own isolated environment instance.

Message flow:
  -> {"type": "hello", "version": 1}
  <- {"type": "hello_ok", "version": 1, "obs_spec": {...}}
  -> {"type": "reset", "seed": 0}
  <- {"type": "obs", "vector": [...], "image_b64": "...", "width": w, "height": h}
  -> {"type": "step", "action": {"throttle": t, "steer": s, "brake": b}}
  <- {"type": "transition", "reward": r, "terminated": b, "truncated": b,
      "obs": {...}, "clamped": b, "outcome": str|null}
  -> {"type": "render"}
  <- {"type": "frame", "image_b64": "...", "width": w, "height": h}
  -> {"type": "close"}
  <- {"type": "bye"}

Errors reply {"type": "error", "code": ..., "message": ...}; the connection
stays open except after framing violations (oversized or truncated frames),
where the stream can no longer be trusted.

Images travel as base64 of raw RGB8 rows (width * height * 3 bytes).
"""

from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import struct
import threading

import numpy as np

from .env import DrivingEnv
from .errors import EpisodeFinished
from .physics import Controls
from .render import framebuffer_bytes

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


def send_message(sock: socket.socket, payload: dict) -> None:
    data = json.dumps(payload).encode("utf-8")
    sock.sendall(_LEN.pack(len(data)) + data)


def recv_exactly(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> dict:
    header = recv_exactly(sock, 4)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    payload = recv_exactly(sock, length)
    return json.loads(payload.decode("utf-8"))


class _Session:
    """Per-connection protocol state machine."""

    def __init__(self, env_factory):
        self.env_factory = env_factory
        self.env: DrivingEnv | None = None
        self.state = "awaiting_hello"

    def _obs_payload(self, obs) -> dict:
        payload: dict = {}
        if obs.vector is not None:
            payload["vector"] = [float(v) for v in obs.vector]
        if obs.image is not None:
            data = np.rint(np.clip(obs.image, 0.0, 1.0) * 255.0).astype(np.uint8)
            payload["image_b64"] = base64.b64encode(data.tobytes()).decode("ascii")
            payload["height"], payload["width"] = obs.image.shape[:2]
        return payload

    def handle(self, msg: dict) -> dict:
        if not isinstance(msg, dict) or "type" not in msg:
            return {"type": "error", "code": "bad_message",
                    "message": "payload must be an object with a 'type' field"}
        mtype = msg["type"]

        if mtype == "hello":
            version = msg.get("version")
            if version != PROTOCOL_VERSION:
                return {"type": "error", "code": "bad_version",
                        "message": f"server speaks version {PROTOCOL_VERSION}"}
            if self.env is None:
                self.env = self.env_factory()
            self.state = "idle"
            return {"type": "hello_ok", "version": PROTOCOL_VERSION,
                    "obs_spec": self.env.obs_spec}

        if self.state == "awaiting_hello":
            return {"type": "error", "code": "no_hello",
                    "message": "send hello first"}

        if mtype == "reset":
            seed = msg.get("seed")
            if seed is not None and not isinstance(seed, int):
                return {"type": "error", "code": "bad_message",
                        "message": "seed must be an integer"}
            obs = self.env.reset(seed=seed)
            self.state = "in_episode"
            return {"type": "obs", **self._obs_payload(obs)}

        if mtype == "step":
            if self.state != "in_episode":
                return {"type": "error", "code": "no_episode",
                        "message": "reset before stepping"}
            action = msg.get("action")
            if not isinstance(action, dict):
                return {"type": "error", "code": "bad_message",
                        "message": "step needs an 'action' object"}
            try:
                controls = Controls(
                    throttle=float(action.get("throttle", 0.0)),
                    steer=float(action.get("steer", 0.0)),
                    brake=float(action.get("brake", 0.0)),
                )
            except (TypeError, ValueError):
                return {"type": "error", "code": "bad_message",
                        "message": "action fields must be numbers"}
            try:
                obs, reward, terminated, truncated, info = self.env.step(controls)
            except EpisodeFinished:
                return {"type": "error", "code": "no_episode",
                        "message": "episode already finished"}
            if terminated or truncated:
                self.state = "idle"
            return {
                "type": "transition",
                "reward": reward,
                "terminated": terminated,
                "truncated": truncated,
                "obs": self._obs_payload(obs),
                "clamped": info["clamped"],
                "outcome": info["outcome"],
            }

        if mtype == "render":
            if self.env.state is None:
                return {"type": "error", "code": "no_episode",
                        "message": "reset before rendering"}
            fb = self.env.render_observation(
                self.env.render_settings.width, self.env.render_settings.height
            )
            return {
                "type": "frame",
                "image_b64": base64.b64encode(framebuffer_bytes(fb)).decode("ascii"),
                "width": fb.width,
                "height": fb.height,
            }

        if mtype == "close":
            return {"type": "bye"}

        return {"type": "error", "code": "bad_type",
                "message": f"unknown message type {mtype!r}"}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = _Session(self.server.env_factory)
        peer = self.client_address
        log.info("session opened: %s", peer)
        sock = self.request
        try:
            while True:
                try:
                    msg = recv_message(sock)
                except ConnectionError:
                    break
                except ValueError as e:
                    # framing violation: report and drop the connection
                    send_message(sock, {"type": "error", "code": "bad_frame",
                                        "message": str(e)})
                    break
                except json.JSONDecodeError as e:
                    send_message(sock, {"type": "error", "code": "bad_message",
                                        "message": f"invalid JSON: {e}"})
                    continue
                except UnicodeDecodeError:
                    send_message(sock, {"type": "error", "code": "bad_message",
                                        "message": "payload is not UTF-8"})
                    continue
                try:
                    reply = session.handle(msg)
                except Exception as e:  # defensive: protocol errors must not kill the server
                    log.exception("internal error handling %r", msg.get("type"))
                    reply = {"type": "error", "code": "internal", "message": str(e)}
                send_message(sock, reply)
                if reply.get("type") == "bye":
                    break
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            log.info("session closed: %s", peer)


class SimServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bind_address, env_factory):
        self.env_factory = env_factory
        super().__init__(bind_address, _Handler)


def serve(bind_address: tuple[str, int], env_factory) -> SimServer:
    """Start the server in the calling thread's control; returns after bind.

    The accept loop runs on a daemon thread; call .shutdown() to stop.
    """
    server = SimServer(bind_address, env_factory)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    log.info("listening on %s:%d", *server.server_address)
    return server


def serve_forever(bind_address: tuple[str, int], env_factory) -> None:
    """Blocking variant used by the CLI; Ctrl-C shuts down."""
    server = SimServer(bind_address, env_factory)
    log.info("listening on %s:%d", *server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()

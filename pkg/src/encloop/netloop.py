"""Three-role networked deployment of the encrypted loop.

The plant (client) connects to its configured peer, which is either the
controller (server) directly or a man-in-the-middle attacker proxy that
terminates both connections and relays frames, tampering with the ciphertext
payloads in flight. The protocol is strictly lock-step: one measurement
frame out, one control frame back, per time step.

Frame layout (little-endian): u32 payload length, u8 message type, payload.

This is a simulator: all roles reconstruct the key context from the shared
configuration, and the attacker proxy restricts itself to the public
(encrypt/add) capability when modifying payloads.
"""

from __future__ import annotations

import json
import logging
import socket
import struct

import numpy as np

from . import attack, control, verify
from .backend import context_create, deserialize_ciphertext, serialize_ciphertext, pad_slots
from .scenario import ScenarioConfig, build_verifier

__all__ = [
    "MSG_ENC_Y", "MSG_ENC_U", "MSG_HELLO", "MSG_BYE", "MSG_ABORT",
    "FrameError", "frame_encode", "frame_decode", "send_frame", "recv_frame",
    "run_plant", "run_controller", "run_attacker",
]

log = logging.getLogger(__name__)

MSG_ENC_Y = 0x01
MSG_ENC_U = 0x02
MSG_HELLO = 0x03
MSG_BYE = 0x04
MSG_ABORT = 0x05
_VALID_TYPES = {MSG_ENC_Y, MSG_ENC_U, MSG_HELLO, MSG_BYE, MSG_ABORT}

MAX_PAYLOAD = 2 ** 31


class FrameError(ValueError):
    pass


def frame_encode(msg_type: int, payload: bytes = b"") -> bytes:
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown message type {msg_type:#x}")
    if len(payload) > MAX_PAYLOAD:
        raise FrameError("payload too large")
    return struct.pack("<IB", len(payload), msg_type) + payload


def frame_decode(data: bytes) -> tuple[int, bytes, int]:
    """Decode one frame from the head of ``data``; returns (type, payload,
    bytes consumed). Raises FrameError on truncation or a bad type."""
    if len(data) < 5:
        raise FrameError(f"truncated header: {len(data)} bytes")
    length, msg_type = struct.unpack_from("<IB", data, 0)
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown message type {msg_type:#x}")
    if len(data) < 5 + length:
        raise FrameError(f"truncated payload: declared {length}, "
                         f"available {len(data) - 5}")
    return msg_type, data[5:5 + length], 5 + length


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        buf += chunk
    return buf


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b""):
    sock.sendall(frame_encode(msg_type, payload))


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 5)
    length, msg_type = struct.unpack("<IB", header)
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown message type {msg_type:#x}")
    payload = _recv_exact(sock, length) if length else b""
    return msg_type, payload


def _listen(addr: tuple[str, int]) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(addr)
    srv.listen(1)
    return srv


# -- roles ---------------------------------------------------------------------

def run_plant(connect: tuple[str, int], cfg: ScenarioConfig) -> control.SimTrace:
    """Plant client: drives the physical state, ships measurements, applies
    the received control actions. With verification enabled it encodes every
    outgoing block, decodes every response, and aborts on the first rejected
    one."""
    model, ctrl = cfg.model, cfg.controller
    ctx = context_create(cfg.backend)
    enc_dim = verify.lift_affine(-ctrl.K, ctrl.u0, 1)[0].shape[0]
    verifier = build_verifier(cfg) if cfg.scenario == "verified_attack" else None

    trace = control.SimTrace()
    x = cfg.x0.copy()
    with socket.create_connection(connect) as sock:
        send_frame(sock, MSG_HELLO, json.dumps(cfg.to_dict()).encode())
        for k in range(-cfg.pre_roll, cfg.steps):
            y = model.C @ x
            if verifier is None:
                w = verify.lifted_input(y, ctrl.u0, enc_dim)
                tag = None
            else:
                block = verify.lifted_input(y, ctrl.u0, verifier.block_dim)
                w, tag = verify.ecd(verifier, block)
            c = ctx.encrypt(pad_slots(w, ctx.config.slot_count))
            send_frame(sock, MSG_ENC_Y, serialize_ciphertext(c))
            msg_type, payload = recv_frame(sock)
            if msg_type != MSG_ENC_U:
                raise FrameError(f"expected control frame, got type {msg_type:#x}")
            u_cipher = deserialize_ciphertext(ctx, payload)
            z = ctx.decrypt(u_cipher)
            if verifier is None:
                u = z[: model.m]
                verdict = "n/a"
            else:
                eps = max(verifier.threshold, 8.0 * u_cipher.noise_bound)
                outcome = verify.dcd(verifier, tag, z[: verifier.encoded_dim],
                                     threshold=eps)
                if outcome.bottom:
                    trace.append(k, x, np.zeros(model.m), y, np.zeros(model.m), y,
                                 "bottom")
                    send_frame(sock, MSG_ABORT, json.dumps({"step": k}).encode())
                    send_frame(sock, MSG_BYE)
                    return trace
                u = outcome.payload[: model.m]
                verdict = "ok"
            trace.append(k, x, u, y, u, y, verdict)
            x = model.A @ x + model.B @ u
        send_frame(sock, MSG_BYE)
    return trace


def run_controller(listen: tuple[str, int], ready=None) -> dict:
    """Controller server: builds the encrypted lifted controller from the
    HELLO configuration, then answers one control frame per measurement
    frame. Returns its own view of the exchange: decrypted received inputs
    and emitted outputs (simulation introspection)."""
    srv = _listen(listen)
    if ready is not None:
        ready.set()
    result = {"y_c": [], "u_c": [], "aborted": False}
    try:
        conn, _ = srv.accept()
    finally:
        srv.close()
    with conn:
        try:
            msg_type, payload = recv_frame(conn)
            if msg_type != MSG_HELLO:
                raise FrameError("expected HELLO as the first frame")
            cfg = ScenarioConfig.from_dict(json.loads(payload.decode()))
            ctx = context_create(cfg.backend)
            expansion = cfg.expansion if cfg.scenario == "verified_attack" else 1
            enc_ctrl, block_dim = control.encrypt_controller(ctx, cfg.controller,
                                                             expansion)
            while True:
                msg_type, payload = recv_frame(conn)
                if msg_type == MSG_BYE:
                    break
                if msg_type == MSG_ABORT:
                    result["aborted"] = True
                    continue
                if msg_type != MSG_ENC_Y:
                    raise FrameError(f"unexpected frame type {msg_type:#x}")
                y_cipher = deserialize_ciphertext(ctx, payload)
                u_cipher = control.controller_eval_encrypted(enc_ctrl, y_cipher)
                result["y_c"].append(ctx.decrypt(y_cipher)[: cfg.model.p])
                result["u_c"].append(ctx.decrypt(u_cipher)[: cfg.model.m])
                send_frame(conn, MSG_ENC_U, serialize_ciphertext(u_cipher))
        except (FrameError, ValueError, ConnectionError, json.JSONDecodeError) as exc:
            log.warning("controller: rejected input: %s", exc)
            result["error"] = str(exc)
    return result


def run_attacker(listen: tuple[str, int], upstream: tuple[str, int],
                 ready=None) -> dict:
    """Attacker proxy: terminates the plant connection, relays to the
    controller, and tampers with ciphertext frames per the attack plan found
    in the relayed HELLO. Only the public capability (encrypt, homomorphic
    add) touches the payloads."""
    srv = _listen(listen)
    if ready is not None:
        ready.set()
    stats = {"relayed": 0, "tampered": 0}
    try:
        plant_conn, _ = srv.accept()
    finally:
        srv.close()
    with plant_conn, socket.create_connection(upstream) as up:
        try:
            msg_type, payload = recv_frame(plant_conn)
            if msg_type != MSG_HELLO:
                raise FrameError("expected HELLO as the first frame")
            cfg = ScenarioConfig.from_dict(json.loads(payload.decode()))
            ctx = context_create(cfg.backend)
            pub = ctx.public_context()
            attacker = _build_proxy_attacker(cfg, ctx, pub)
            send_frame(up, MSG_HELLO, payload)

            k = -cfg.pre_roll
            while True:
                msg_type, payload = recv_frame(plant_conn)
                if msg_type in (MSG_BYE, MSG_ABORT):
                    send_frame(up, msg_type, payload)
                    if msg_type == MSG_BYE:
                        break
                    continue
                if msg_type != MSG_ENC_Y:
                    raise FrameError(f"unexpected frame type {msg_type:#x}")
                c = deserialize_ciphertext(pub, payload)
                if attacker is not None and k >= 0:
                    tampered = attacker.tamper_measurement(k, c)
                    if tampered is not c:
                        stats["tampered"] += 1
                    c = tampered
                send_frame(up, MSG_ENC_Y, serialize_ciphertext(c))
                msg_type, payload = recv_frame(up)
                if msg_type != MSG_ENC_U:
                    raise FrameError(f"unexpected upstream frame {msg_type:#x}")
                c = deserialize_ciphertext(pub, payload)
                if attacker is not None and k >= 0:
                    c = attacker.tamper_control(k, c)
                send_frame(plant_conn, MSG_ENC_U, serialize_ciphertext(c))
                stats["relayed"] += 1
                k += 1
        except (FrameError, ValueError, ConnectionError, json.JSONDecodeError) as exc:
            log.warning("attacker: relay stopped: %s", exc)
            stats["error"] = str(exc)
    return stats


def _build_proxy_attacker(cfg: ScenarioConfig, ctx, pub):
    if cfg.attack_plan is None:
        return None
    if cfg.scenario == "verified_attack":
        block_dim = verify.lift_affine(-cfg.controller.K, cfg.controller.u0,
                                       1)[0].shape[0]
        return attack.GuessingAttacker(cfg.model, cfg.attack_plan, pub,
                                       expansion=cfg.expansion, block_dim=block_dim,
                                       rng=np.random.default_rng(cfg.seed + 1))
    enc_model = None
    if cfg.attack_plan.variant == "enc_model":
        enc_model = attack.build_enc_model(pub, cfg.model)
    return attack.CovertAttacker(cfg.model, cfg.attack_plan, ctx=pub,
                                 enc_model=enc_model)

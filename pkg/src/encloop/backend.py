"""Simulated packed (SIMD) homomorphic-encryption backend.

This is a functional simulator, not a cryptosystem: ciphertexts carry their
slot values in the clear and "encryption" only gates access behind an API.
What it does model faithfully is the *interface* of a leveled arithmetic HE
scheme with ciphertext packing: slotwise add/sub/mul (ciphertext-ciphertext
and ciphertext-plaintext), negation, circular slot rotation, a multiplicative
depth budget, and an optional per-operation Gaussian noise term mimicking
approximate arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BackendConfig",
    "KeyContext",
    "PackedCiphertext",
    "DepthExhausted",
    "KeyMismatch",
    "context_create",
    "hom_add",
    "hom_sub",
    "hom_neg",
    "hom_mul",
    "rotate",
    "pad_slots",
    "serialize_ciphertext",
    "deserialize_ciphertext",
]


class DepthExhausted(RuntimeError):
    """Raised when a multiplication would exceed the level budget."""


class KeyMismatch(ValueError):
    """Raised when ciphertexts from different key contexts are mixed."""


@dataclass(frozen=True)
class BackendConfig:
    slot_count: int
    noise_std: float = 0.0
    max_depth: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.slot_count < 1 or (self.slot_count & (self.slot_count - 1)) != 0:
            raise ValueError(f"slot_count must be a power of two, got {self.slot_count}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")


@dataclass
class PackedCiphertext:
    """One SIMD ciphertext. Slot values are private to the backend."""

    _slots: np.ndarray
    level: int
    noise_bound: float
    key_id: int
    ops_applied: int
    _ctx: "KeyContext" = field(repr=False)


class KeyContext:
    """Holds the backend config, a deterministic PRNG stream, and op counters.

    ``public_context()`` returns a view that can encrypt and operate on
    ciphertexts but not decrypt them, modeling a party holding only the
    public key.
    """

    def __init__(self, config: BackendConfig, key_id: int, has_secret_key: bool = True,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.key_id = key_id
        self.has_secret_key = has_secret_key
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.op_counts = {"add": 0, "mul": 0, "rot": 0, "enc": 0, "dec": 0}

    def public_context(self) -> "KeyContext":
        pub = KeyContext(self.config, self.key_id, has_secret_key=False,
                         rng=np.random.default_rng([self.config.seed, 0x5EC0]))
        return pub

    # -- core API ---------------------------------------------------------

    def encrypt(self, slots) -> PackedCiphertext:
        m = np.asarray(slots, dtype=float)
        if m.shape != (self.config.slot_count,):
            raise ValueError(
                f"plaintext length {m.shape} does not match slot_count {self.config.slot_count}")
        self.op_counts["enc"] += 1
        return PackedCiphertext(
            _slots=self._noisy(m.copy()),
            level=0,
            noise_bound=self.config.noise_std,
            key_id=self.key_id,
            ops_applied=0,
            _ctx=self,
        )

    def decrypt(self, c: PackedCiphertext) -> np.ndarray:
        if not self.has_secret_key:
            raise KeyMismatch("this context holds no secret key")
        if c.key_id != self.key_id:
            raise KeyMismatch("ciphertext was created under a different key")
        self.op_counts["dec"] += 1
        return c._slots.copy()

    def _noisy(self, slots: np.ndarray) -> np.ndarray:
        if self.config.noise_std > 0:
            slots = slots + self.rng.normal(0.0, self.config.noise_std, slots.shape)
        return slots


def context_create(config: BackendConfig) -> KeyContext:
    """Create a key context. The key tag is derived from the seed so that two
    processes configured identically interoperate (needed by the networked
    deployment)."""
    key_id = (config.seed * 0x9E3779B97F4A7C15 + 0xD1B54A32D192ED03) & 0xFFFFFFFFFFFFFFFF
    return KeyContext(config, key_id)


# -- homomorphic operations -------------------------------------------------

def _as_operands(a: PackedCiphertext, b):
    """Return (ctx, a_slots, b_slots, b_level, b_bound) handling plaintext b."""
    ctx = a._ctx
    if isinstance(b, PackedCiphertext):
        if b.key_id != a.key_id:
            raise KeyMismatch("operands were created under different keys")
        return ctx, a._slots, b._slots, b.level, b.noise_bound, b.ops_applied
    m = np.asarray(b, dtype=float)
    if m.shape != a._slots.shape:
        raise ValueError(f"plaintext operand shape {m.shape} does not match slots")
    return ctx, a._slots, m, 0, 0.0, 0


def _result(ctx, slots, level, noise_bound, ops_applied) -> PackedCiphertext:
    if level > ctx.config.max_depth:
        raise DepthExhausted(
            f"operation requires level {level} but max_depth is {ctx.config.max_depth}")
    return PackedCiphertext(
        _slots=ctx._noisy(slots),
        level=level,
        noise_bound=noise_bound + ctx.config.noise_std,
        key_id=ctx.key_id,
        ops_applied=ops_applied,
        _ctx=ctx,
    )


def hom_add(a: PackedCiphertext, b) -> PackedCiphertext:
    """Slotwise addition; second operand may be a plaintext vector."""
    ctx, sa, sb, lev_b, nb_b, ops_b = _as_operands(a, b)
    ctx.op_counts["add"] += 1
    return _result(ctx, sa + sb, max(a.level, lev_b), a.noise_bound + nb_b,
                   max(a.ops_applied, ops_b) + 1)


def hom_sub(a: PackedCiphertext, b) -> PackedCiphertext:
    ctx, sa, sb, lev_b, nb_b, ops_b = _as_operands(a, b)
    ctx.op_counts["add"] += 1
    return _result(ctx, sa - sb, max(a.level, lev_b), a.noise_bound + nb_b,
                   max(a.ops_applied, ops_b) + 1)


def hom_neg(a: PackedCiphertext) -> PackedCiphertext:
    ctx = a._ctx
    ctx.op_counts["add"] += 1
    return _result(ctx, -a._slots, a.level, a.noise_bound, a.ops_applied + 1)


def hom_mul(a: PackedCiphertext, b) -> PackedCiphertext:
    """Slotwise product. Consumes one multiplicative level; raises
    DepthExhausted when the budget would be exceeded (no bootstrapping)."""
    ctx, sa, sb, lev_b, nb_b, ops_b = _as_operands(a, b)
    ctx.op_counts["mul"] += 1
    # First-order noise propagation: each operand's noise scaled by the
    # other's magnitude, plus the fresh operation noise.
    bound = (a.noise_bound * float(np.max(np.abs(sb), initial=0.0))
             + nb_b * float(np.max(np.abs(sa), initial=0.0)))
    return _result(ctx, sa * sb, max(a.level, lev_b) + 1, bound,
                   max(a.ops_applied, ops_b) + 1)


def rotate(a: PackedCiphertext, i: int) -> PackedCiphertext:
    """Circular left rotation: result slot j holds input slot (j+i) mod d."""
    ctx = a._ctx
    i = i % ctx.config.slot_count
    ctx.op_counts["rot"] += 1
    return _result(ctx, np.roll(a._slots, -i), a.level, a.noise_bound, a.ops_applied + 1)


# -- helpers ----------------------------------------------------------------

def pad_slots(values, slot_count: int) -> np.ndarray:
    """Zero-pad a vector to the full slot width."""
    v = np.asarray(values, dtype=float).ravel()
    if len(v) > slot_count:
        raise ValueError(f"vector of length {len(v)} exceeds slot_count {slot_count}")
    out = np.zeros(slot_count)
    out[: len(v)] = v
    return out


# -- wire format --------------------------------------------------------------
# little-endian: u32 slot_count, u32 level, u64 key_id,
# slot_count f64 slot values, f64 noise_bound.

def serialize_ciphertext(c: PackedCiphertext) -> bytes:
    n = len(c._slots)
    return (struct.pack("<IIQ", n, c.level, c.key_id)
            + struct.pack(f"<{n}d", *c._slots)
            + struct.pack("<d", c.noise_bound))


def deserialize_ciphertext(ctx: KeyContext, data: bytes) -> PackedCiphertext:
    if len(data) < 16:
        raise ValueError("ciphertext blob too short")
    n, level, key_id = struct.unpack_from("<IIQ", data, 0)
    expected = 16 + 8 * n + 8
    if len(data) != expected:
        raise ValueError(f"ciphertext blob has {len(data)} bytes, expected {expected}")
    if n != ctx.config.slot_count:
        raise ValueError(f"slot_count {n} does not match context {ctx.config.slot_count}")
    if key_id != ctx.key_id:
        raise KeyMismatch("serialized ciphertext carries a foreign key tag")
    slots = np.array(struct.unpack_from(f"<{n}d", data, 16))
    (noise_bound,) = struct.unpack_from("<d", data, 16 + 8 * n)
    return PackedCiphertext(_slots=slots, level=level, noise_bound=noise_bound,
                            key_id=key_id, ops_applied=0, _ctx=ctx)

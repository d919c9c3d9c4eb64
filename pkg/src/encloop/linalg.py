"""Encrypted linear algebra via the diagonal method.

A square matrix S is represented by the (encrypted) tuple of its wrapping
diagonals S_i[j] = S[j, (i+j) mod d]. Matrix-vector products then reduce to
slotwise multiplies against rotated copies of the vector:

    S v = sum_i  S_i * rot_i(v)

and matrix-matrix products to the analogous recombination of diagonals.
Banded matrices store only the diagonals with wrapped index in [-band, band];
the missing diagonals are implicitly zero and are skipped, not materialized.

All logical dimensions are padded up to the backend slot count, so every
vector occupies one full ciphertext and rotations wrap consistently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import KeyContext, PackedCiphertext, hom_add, hom_mul, hom_neg, rotate

__all__ = [
    "DiagMatrixCipher",
    "extract_wrapping_diagonals",
    "wrapping_diagonal",
    "pad_to_pow2",
    "next_pow2",
    "encrypt_matrix",
    "decrypt_matrix",
    "enc_matvec",
    "enc_matmat",
    "enc_matrix_power",
    "enc_transpose",
    "enc_pinv_newton_schulz",
]


@dataclass
class DiagMatrixCipher:
    """Matrix encrypted as a tuple of wrapping-diagonal ciphertexts.

    ``diagonals`` maps the wrapped diagonal index (0 <= i < dim) to its
    ciphertext; absent indices are implicitly zero. ``band`` is set when the
    stored indices are exactly the wrapped range [-band, band].
    """

    dim: int
    diagonals: dict[int, PackedCiphertext]
    band: int | None = None

    @property
    def level(self) -> int:
        return max((c.level for c in self.diagonals.values()), default=0)


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def pad_to_pow2(obj, target: int):
    """Zero-pad a vector or matrix to the given power-of-two size."""
    if target < 1 or (target & (target - 1)) != 0:
        raise ValueError(f"target {target} is not a power of two")
    a = np.asarray(obj, dtype=float)
    if a.ndim == 1:
        if len(a) > target:
            raise ValueError(f"vector of length {len(a)} exceeds target {target}")
        out = np.zeros(target)
        out[: len(a)] = a
        return out
    if a.ndim == 2:
        r, c = a.shape
        if r > target or c > target:
            raise ValueError(f"matrix of shape {a.shape} exceeds target {target}")
        out = np.zeros((target, target))
        out[:r, :c] = a
        return out
    raise ValueError("expected a vector or a matrix")


def wrapping_diagonal(S, i: int, dim: int | None = None) -> np.ndarray:
    """The i-th wrapping diagonal of S at logical dimension ``dim``, without
    materializing the padded matrix (S may be rectangular)."""
    S = np.asarray(S, dtype=float)
    rows, cols = S.shape
    d = dim if dim is not None else rows
    if rows > d or cols > d:
        raise ValueError("matrix exceeds the requested dimension")
    out = np.zeros(d)
    j = np.arange(min(rows, d))
    col = (i + j) % d
    mask = col < cols
    out[j[mask]] = S[j[mask], col[mask]]
    return out


def extract_wrapping_diagonals(S) -> list[np.ndarray]:
    """All d wrapping diagonals of a square power-of-two matrix."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    d = S.shape[0]
    if d & (d - 1):
        raise ValueError(f"dimension {d} is not a power of two")
    return [wrapping_diagonal(S, i) for i in range(d)]


def _band_indices(band: int, dim: int) -> list[int]:
    if band < 0 or 2 * band + 1 > dim:
        raise ValueError(f"band {band} out of range for dimension {dim}")
    return sorted({i % dim for i in range(-band, band + 1)})


def _minimal_band(S, dim: int) -> int | None:
    """Smallest beta such that all nonzero wrapped diagonals lie in
    [-beta, beta], or None if no band smaller than dense exists."""
    beta = 0
    for i in range(dim):
        if np.any(wrapping_diagonal(S, i, dim) != 0):
            beta = max(beta, min(i, dim - i))
    return beta if 2 * beta + 1 < dim else None


def encrypt_matrix(ctx: KeyContext, S, band: int | str | None = None) -> DiagMatrixCipher:
    """Encrypt a matrix as its wrapping diagonals, padded to the slot count.

    ``band=beta`` stores only the 2*beta+1 diagonals with wrapped index in
    [-beta, beta] and rejects matrices with nonzero entries outside that
    band. ``band="auto"`` detects the minimal band.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2:
        raise ValueError("expected a matrix")
    dim = ctx.config.slot_count
    if S.shape[0] > dim or S.shape[1] > dim:
        raise ValueError(f"matrix of shape {S.shape} exceeds slot_count {dim}")
    if band == "auto":
        band = _minimal_band(S, dim)
    if band is None:
        indices = range(dim)
    else:
        indices = _band_indices(band, dim)
        allowed = set(indices)
        for i in range(dim):
            if i not in allowed and np.any(wrapping_diagonal(S, i, dim) != 0):
                raise ValueError(
                    f"matrix has a nonzero wrapped diagonal {i} outside band {band}")
    diagonals = {i: ctx.encrypt(wrapping_diagonal(S, i, dim)) for i in indices}
    return DiagMatrixCipher(dim=dim, diagonals=diagonals, band=band)


def decrypt_matrix(ctx: KeyContext, M: DiagMatrixCipher) -> np.ndarray:
    """Reassemble the plaintext matrix from decrypted diagonals (test aid)."""
    d = M.dim
    S = np.zeros((d, d))
    j = np.arange(d)
    for i, c in M.diagonals.items():
        S[j, (i + j) % d] = ctx.decrypt(c)
    return S


def enc_matvec(S: DiagMatrixCipher, v: PackedCiphertext) -> PackedCiphertext:
    """Encrypted matrix-vector product; consumes exactly one level and
    performs one slotwise multiply per stored diagonal."""
    if S.dim != v._ctx.config.slot_count:
        raise ValueError(f"matrix dim {S.dim} does not match ciphertext slots")
    acc = None
    for i, diag in S.diagonals.items():
        term = hom_mul(diag, rotate(v, i))
        acc = term if acc is None else hom_add(acc, term)
    if acc is None:  # all-zero (empty) matrix
        acc = hom_mul(v, np.zeros(S.dim))
    return acc


def enc_matmat(S: DiagMatrixCipher, T: DiagMatrixCipher) -> DiagMatrixCipher:
    """Encrypted matrix-matrix product in diagonal form; one level deep."""
    if S.dim != T.dim:
        raise ValueError(f"dimension mismatch: {S.dim} vs {T.dim}")
    d = S.dim
    out: dict[int, PackedCiphertext] = {}
    for i, Si in S.diagonals.items():
        for j, Tj in T.diagonals.items():
            k = (i + j) % d
            term = hom_mul(Si, rotate(Tj, i))
            out[k] = hom_add(out[k], term) if k in out else term
    band = None
    if S.band is not None and T.band is not None and 2 * (S.band + T.band) + 1 <= d:
        band = S.band + T.band
    return DiagMatrixCipher(dim=d, diagonals=out, band=band)


def enc_matrix_power(S: DiagMatrixCipher, n: int) -> DiagMatrixCipher:
    """S^n by square-and-multiply (depth ~ ceil(log2 n))."""
    if n < 1:
        raise ValueError("exponent must be a positive integer")
    result = None
    base = S
    while n:
        if n & 1:
            result = base if result is None else enc_matmat(result, base)
        n >>= 1
        if n:
            base = enc_matmat(base, base)
    return result


def enc_transpose(S: DiagMatrixCipher) -> DiagMatrixCipher:
    """Transpose in diagonal form: (S^T)_i = rot_i(S_{-i}); rotations only."""
    d = S.dim
    out = {}
    for i, c in S.diagonals.items():
        k = (d - i) % d
        out[k] = rotate(c, k)
    return DiagMatrixCipher(dim=d, diagonals=out, band=S.band)


def enc_pinv_newton_schulz(ctx: KeyContext, S: DiagMatrixCipher, scale: float,
                           iterations: int = 12) -> DiagMatrixCipher:
    """Approximate Moore-Penrose inverse of an encrypted matrix.

    Newton-Schulz iteration X <- X (2I - S X) starting from X0 = scale * S^T.
    ``scale`` must be a public constant in (0, 2 / sigma_max(S)^2); the caller
    supplies it since the backend cannot compute spectral norms under
    encryption. Each iteration costs two encrypted matrix products.
    """
    d = S.dim
    two_eye = 2.0 * np.eye(d)
    St = enc_transpose(S)
    X = DiagMatrixCipher(
        dim=d,
        diagonals={i: hom_mul(c, np.full(d, scale)) for i, c in St.diagonals.items()},
        band=St.band,
    )
    for _ in range(iterations):
        SX = enc_matmat(S, X)
        # R = 2I - S X, computed diagonal-wise against the plaintext identity
        R_diags = {}
        j = np.arange(d)
        for i, c in SX.diagonals.items():
            eye_diag = two_eye[j, (i + j) % d]
            R_diags[i] = hom_add(hom_neg(c), eye_diag)
        R = DiagMatrixCipher(dim=d, diagonals=R_diags, band=SX.band)
        X = enc_matmat(X, R)
    return X

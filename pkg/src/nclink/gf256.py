"""GF(2^8) arithmetic used by the coder and the decoder.

Reduction polynomial is x^8+x^4+x^3+x^2+1 (0x11D). Log/antilog tables back
the scalar ops; a full 256x256 product table backs the vector ops so that
row operations run as single numpy indexing passes.
"""

import numpy as np

POLY = 0x11D

_EXP = [0] * 512
_LOG = [0] * 256


def _init_tables():
    x = 1
    for i in range(255):
        _EXP[i] = x
        _LOG[x] = i
        x <<= 1
        if x & 0x100:
            x ^= POLY
    for i in range(255, 512):
        _EXP[i] = _EXP[i - 255]


_init_tables()

EXP = np.array(_EXP, dtype=np.uint8)
LOG = np.array(_LOG, dtype=np.uint8)

# MUL[a, b] = a*b in GF(2^8); row 0 and column 0 are zero.
MUL = np.zeros((256, 256), dtype=np.uint8)
_nz = np.arange(1, 256)
_log = np.array(_LOG)
MUL[1:, 1:] = EXP[(_log[_nz][:, None] + _log[_nz][None, :]) % 255]

INV = np.zeros(256, dtype=np.uint8)
INV[_nz] = EXP[(255 - _log[_nz]) % 255]


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    return int(MUL[a, b])


def gf_inv(a: int) -> int:
    """Multiplicative inverse; zero has none."""
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(2^8)")
    return int(INV[a])


def vec_scale(vec: np.ndarray, c: int) -> np.ndarray:
    """c * vec elementwise."""
    return MUL[c][vec]


def vec_axpy(dst, src, c: int) -> np.ndarray:
    """dst + c*src elementwise over GF(2^8).

    Accepts bytes-like or uint8 arrays of equal length; returns a new array.
    """
    d = np.frombuffer(bytes(dst), dtype=np.uint8) if not isinstance(dst, np.ndarray) else dst
    s = np.frombuffer(bytes(src), dtype=np.uint8) if not isinstance(src, np.ndarray) else src
    if d.shape != s.shape:
        raise ValueError(f"length mismatch: {d.shape} vs {s.shape}")
    return d ^ MUL[c][s]

"""Negacyclic number-theoretic transforms over word-sized prime fields.

Implements the forward/inverse NTT for Z_q[X]/(X^N + 1) with q prime,
q = 1 (mod 2N), vectorised over stacks of rows so residue-number-system
polynomials (k primes x N coefficients, with any batch dims in front)
transform in one call. Products a*b with a, b < 2^31 stay inside int64,
so reduction uses an exact float-reciprocal quotient estimate instead of
integer division.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for n < 3.3e24."""
    if n < 2:
        return False
    for b in _MR_BASES:
        if n % b == 0:
            return n == b
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for b in _MR_BASES:
        x = pow(b, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bits: int, poly_degree: int, count: int) -> tuple[int, ...]:
    """The `count` smallest primes above 2^bits congruent to 1 mod 2N."""
    if bits > 30:
        raise ParameterError("primes above 30 bits break the int64 kernels")
    two_n = 2 * poly_degree
    out: list[int] = []
    c = (1 << bits) + 1
    while len(out) < count:
        if c % two_n == 1 and is_prime(c):
            out.append(c)
        c += 2
    return tuple(out)


def primitive_2n_root(q: int, n: int) -> int:
    """Smallest-generator primitive 2n-th root of unity mod q."""
    if (q - 1) % (2 * n) != 0:
        raise ParameterError(f"{q} is not NTT-friendly for degree {n}")
    for g in range(2, 1 << 20):
        cand = pow(g, (q - 1) // (2 * n), q)
        if pow(cand, n, q) == q - 1:
            return cand
    raise ParameterError(f"no 2n-th root found mod {q}")


def _bit_reverse(i: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def _mulmod(a: np.ndarray, b, q, qinv) -> np.ndarray:
    # exact for 0 <= a < 2^31.5 and 0 <= b < 2^30: a*b fits int64; the
    # truncated float quotient is off by at most one and gets corrected
    prod = a * b
    quot = (a * qinv * b).astype(np.int64)
    r = prod - quot * q
    r += (r < 0) * q
    r -= (r >= q) * q
    return r


class NttPlan:
    """Precomputed tables for a stack of row moduli (one prime per row).

    Transforms act on arrays of shape (..., k, N) where row i of the last
    two axes is a polynomial mod moduli[i]; leading axes are batch.
    """

    def __init__(self, moduli: tuple[int, ...], n: int):
        if n & (n - 1) or n < 2:
            raise ParameterError("poly degree must be a power of two >= 2")
        self.n = n
        self.moduli = tuple(moduli)
        lg = n.bit_length() - 1
        rev = [_bit_reverse(i, lg) for i in range(n)]
        psi_rows, ipsi_rows, ninv = [], [], []
        for q in moduli:
            psi = primitive_2n_root(q, n)
            ipsi = pow(psi, -1, q)
            pows = [1] * n
            ipows = [1] * n
            for i in range(1, n):
                pows[i] = pows[i - 1] * psi % q
                ipows[i] = ipows[i - 1] * ipsi % q
            psi_rows.append([pows[r] for r in rev])
            ipsi_rows.append([ipows[r] for r in rev])
            ninv.append(pow(n, -1, q))
        self.psi = np.array(psi_rows, dtype=np.int64)
        self.ipsi = np.array(ipsi_rows, dtype=np.int64)
        self.ninv = np.array(ninv, dtype=np.int64)[:, None]
        self.q_col = np.array(moduli, dtype=np.int64)[:, None]
        self.qinv_col = 1.0 / self.q_col

    def forward(self, rows: np.ndarray) -> np.ndarray:
        """Coefficient order in, bit-reversed evaluation order out."""
        rows = np.ascontiguousarray(rows, dtype=np.int64).copy()
        *lead, k, n = rows.shape
        if k != len(self.moduli) or n != self.n:
            raise ParameterError("array shape does not match plan")
        q, qinv = self.q_col[:, :, None], self.qinv_col[:, :, None]
        t, m = n, 1
        while m < n:
            t //= 2
            s = self.psi[:, m : 2 * m, None]
            blk = rows.reshape(*lead, k, m, 2, t)
            u = blk[..., 0, :].copy()
            v = _mulmod(blk[..., 1, :], s, q, qinv)
            add = u + v
            add -= (add >= q) * q
            sub = u - v
            sub += (sub < 0) * q
            blk[..., 0, :] = add
            blk[..., 1, :] = sub
            m *= 2
        return rows

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        rows = np.ascontiguousarray(rows, dtype=np.int64).copy()
        *lead, k, n = rows.shape
        if k != len(self.moduli) or n != self.n:
            raise ParameterError("array shape does not match plan")
        q, qinv = self.q_col[:, :, None], self.qinv_col[:, :, None]
        t, m = 1, n
        while m > 1:
            h = m // 2
            s = self.ipsi[:, h:m, None]
            blk = rows.reshape(*lead, k, h, 2, t)
            u = blk[..., 0, :].copy()
            v = blk[..., 1, :].copy()
            add = u + v
            add -= (add >= q) * q
            blk[..., 0, :] = add
            blk[..., 1, :] = _mulmod(u - v + q, s, q, qinv)
            t *= 2
            m = h
        return _mulmod(rows, self.ninv, self.q_col, self.qinv_col)

    def mul_pointwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _mulmod(a, b, self.q_col, self.qinv_col)

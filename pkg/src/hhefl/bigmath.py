"""Exact big-integer kernels bridging RNS polynomials and Z.

The ciphertext modulus Q is a product of word-sized primes; polynomials
normally live as residue stacks. Multiplication and decryption need exact
integer arithmetic, done here via CRT lifting and Kronecker-substitution
negacyclic products on gmpy2 big integers.
"""

from __future__ import annotations

import numpy as np
import gmpy2

_LIMB_BITS = 32


class RnsCodec:
    """Conversions between residue stacks mod (q_1..q_k) and integers [0, Q)."""

    def __init__(self, moduli: tuple[int, ...]):
        self.moduli = tuple(moduli)
        q = 1
        for m in moduli:
            q *= m
        self.q_product = q
        self.q_bits = q.bit_length()
        self.n_limbs = -(-self.q_bits // _LIMB_BITS)
        self.limb_bytes = self.n_limbs * (_LIMB_BITS // 8)
        self._lagrange = []
        for m in moduli:
            mi = q // m
            self._lagrange.append(gmpy2.mpz(mi * pow(mi % m, -1, m)))
        self._q_mpz = gmpy2.mpz(q)
        # unrolled CRT recombination, built once per modulus chain
        k = len(moduli)
        terms = " + ".join(f"c[{j}] * L{j}" for j in range(k))
        names = {f"L{j}": self._lagrange[j] for j in range(k)}
        src = f"def _lift(cols, q):\n    return [({terms}) % q for c in cols]\n"
        scope = dict(names)
        exec(src, scope)  # noqa: S102 - fixed template over trusted values
        self._lift_fn = scope["_lift"]
        # 2^(32*i) mod q_j, for limb recombination without big ints
        self._limb_pows = np.array(
            [[pow(2, _LIMB_BITS * i, m) for i in range(self.n_limbs)] for m in moduli],
            dtype=np.int64,
        )
        self._mods_col = np.array(moduli, dtype=np.int64)[:, None, None]

    def lift(self, residues: np.ndarray) -> list:
        """Residue stack (k, N) -> list of N gmpy2 ints in [0, Q)."""
        cols = list(zip(*[row.tolist() for row in residues]))
        return self._lift_fn(cols, self._q_mpz)

    def to_limbs(self, values) -> np.ndarray:
        """Ints in [0, Q) -> (N, n_limbs) array of 32-bit limbs."""
        w = self.limb_bytes
        raw = b"".join(int(v).to_bytes(w, "little") for v in values)
        return (
            np.frombuffer(raw, dtype="<u4").astype(np.int64).reshape(len(values), self.n_limbs)
        )

    def limbs_to_residues(self, limbs: np.ndarray) -> np.ndarray:
        """(N, n_limbs) limb array -> residue stack (k, N)."""
        reduced = limbs[None, :, :] % self._mods_col  # (k, N, L), entries < 2^30
        acc = np.zeros((len(self.moduli), limbs.shape[0]), dtype=np.int64)
        # partial sums stay below 2^63 for <=8 limbs of < 2^60 products
        step = 7
        for start in range(0, self.n_limbs, step):
            part = reduced[:, :, start : start + step] * self._limb_pows[:, None, start : start + step]
            acc = (acc + part.sum(axis=2)) % self._mods_col[:, :, 0]
        return acc

    def residues_from_ints(self, values) -> np.ndarray:
        return self.limbs_to_residues(self.to_limbs(values))


def negacyclic_tensor(a0, a1, b0, b1, n: int, window_bits: int):
    """Exact (a0 + a1*s) * (b0 + b1*s) over Z[X]/(X^N + 1).

    Inputs are length-N lists of non-negative ints; returns the three
    signed integer coefficient lists (d0, d1, d2) with d1 computed via a
    Karatsuba-style middle product. window_bits must exceed the bit size
    of any coefficient of the padded middle product.
    """
    pa0 = gmpy2.pack([int(x) for x in a0], window_bits)
    pa1 = gmpy2.pack([int(x) for x in a1], window_bits)
    if b0 is a0 and b1 is a1:
        pb0, pb1 = pa0, pa1
    else:
        pb0 = gmpy2.pack([int(x) for x in b0], window_bits)
        pb1 = gmpy2.pack([int(x) for x in b1], window_bits)
    m0 = pa0 * pb0
    m2 = pa1 * pb1
    mid = (pa0 + pa1) * (pb0 + pb1)

    def fold(big) -> list:
        w = gmpy2.unpack(big, window_bits)
        w = list(w) + [0] * (2 * n - len(w))
        return [w[i] - w[i + n] for i in range(n)]

    w0 = fold(m0)
    w2 = fold(m2)
    wm = fold(mid)
    d1 = [wm[i] - w0[i] - w2[i] for i in range(n)]
    return w0, d1, w2


def scale_round(values, numer: int, denom: int) -> list:
    """round(numer * v / denom) per element, reduced into [0, denom)."""
    half = denom >> 1
    return [((numer * int(v) + half) // denom) % denom for v in values]

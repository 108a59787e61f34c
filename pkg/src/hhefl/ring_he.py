"""Leveled BFV-style homomorphic encryption over Z_p[X]/(X^N + 1).

Plaintexts are vectors of up to N integers mod p, batched one integer per
slot; every homomorphic operation acts slot-wise. Ciphertext components
are stored in NTT/RNS form (one row per coefficient prime), which makes
additions and plaintext multiplications pointwise. Ciphertext-ciphertext
multiplication lifts to exact integers for the tensor/rescale step and
relinearizes with 32-bit digit decomposition.

Parameters default to a reduced ring that runs fast on a CPU. They are
emphatically not secure; see NOT_SECURITY_GRADE.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .bigmath import RnsCodec, negacyclic_tensor, scale_round
from .errors import DepthExceededError, ParameterError, SerializationError
from .ntt import NttPlan, find_ntt_primes, is_prime
from .rng import Drbg

NOT_SECURITY_GRADE = (
    "NOT SECURITY-GRADE: reduced ring dimension and oversized modulus for "
    "desk-scale experiments; do not protect real data with these keys."
)

_MAGIC_CT = b"HEC1"
_MAGIC_PK = b"HEP1"
_MAGIC_SK = b"HES1"
_MAGIC_EK = b"HEE1"

_CBD_WIDTH = 20  # sigma ~ 3.16


@dataclass(frozen=True)
class HeParams:
    """Ring, modulus chain and depth contract for one deployment."""

    poly_degree: int
    plaintext_modulus: int
    coeff_primes: tuple[int, ...]
    depth_budget: int
    security_note: str = NOT_SECURITY_GRADE

    def __post_init__(self):
        n, p = self.poly_degree, self.plaintext_modulus
        if n < 2 or n & (n - 1):
            raise ParameterError("poly_degree must be a power of two")
        if not is_prime(p):
            raise ParameterError("plaintext_modulus must be prime")
        if (p - 1) % (2 * n) != 0:
            raise ParameterError("need p = 1 (mod 2N) for slot batching")
        if len(set(self.coeff_primes)) != len(self.coeff_primes):
            raise ParameterError("coefficient primes must be distinct")
        for q in self.coeff_primes:
            if not is_prime(q) or (q - 1) % (2 * n) != 0 or q >= (1 << 30) + (1 << 29):
                raise ParameterError(f"bad coefficient prime {q}")
            if q == p:
                raise ParameterError("coefficient primes must differ from p")
        if self.depth_budget < 0:
            raise ParameterError("depth_budget must be >= 0")

    @classmethod
    def create(
        cls,
        poly_degree: int = 1024,
        plaintext_modulus: int = 65537,
        coeff_prime_bits: int = 30,
        coeff_prime_count: int = 8,
        depth_budget: int = 3,
    ) -> "HeParams":
        primes = find_ntt_primes(coeff_prime_bits, poly_degree, coeff_prime_count)
        return cls(poly_degree, plaintext_modulus, primes, depth_budget)

    @property
    def q_product(self) -> int:
        return _ctx(self).codec.q_product

    @property
    def params_hash(self) -> bytes:
        return _ctx(self).params_hash

    @property
    def slot_count(self) -> int:
        return self.poly_degree


class _RingCtx:
    """Derived tables shared by every object under one parameter set."""

    def __init__(self, params: HeParams):
        self.params = params
        n, p = params.poly_degree, params.plaintext_modulus
        self.plan_q = NttPlan(params.coeff_primes, n)
        self.plan_p = NttPlan((p,), n)
        self.codec = RnsCodec(params.coeff_primes)
        q = self.codec.q_product
        self.delta = q // p
        self.q_half = q >> 1
        self.k = len(params.coeff_primes)
        self.q_col = np.array(params.coeff_primes, dtype=np.int64)[:, None]
        self.delta_col = np.array(
            [self.delta % m for m in params.coeff_primes], dtype=np.int64
        )[:, None]
        # Kronecker window: fits N * (2Q)^2 plus one carry bit
        self.window_bits = 2 * self.codec.q_bits + n.bit_length() + 3
        canon = "|".join(
            [
                "hhefl-ring-v1",
                str(n),
                str(p),
                ",".join(str(m) for m in params.coeff_primes),
                str(params.depth_budget),
            ]
        )
        self.params_hash = hashlib.sha256(canon.encode()).digest()[:8]
        self.ser_comp_bytes = self.codec.limb_bytes * n

    def mod_add(self, a, b):
        r = a + b
        return r - (r >= self.q_col) * self.q_col

    def mod_sub(self, a, b):
        r = a - b
        return r + (r < 0) * self.q_col

    def mod_neg(self, a):
        return np.where(a == 0, 0, self.q_col - a)

    def mul(self, a, b):
        return self.plan_q.mul_pointwise(a, b)


_CTX_CACHE: dict[HeParams, _RingCtx] = {}


def _ctx(params: HeParams) -> _RingCtx:
    ctx = _CTX_CACHE.get(params)
    if ctx is None:
        ctx = _RingCtx(params)
        _CTX_CACHE[params] = ctx
    return ctx


@dataclass
class RingCiphertext:
    """Ciphertext components in NTT/RNS form plus depth metadata."""

    params: HeParams
    comps: tuple[np.ndarray, ...]
    level: int = 0

    @property
    def component_count(self) -> int:
        return len(self.comps)


@dataclass
class PublicKey:
    params: HeParams
    b: np.ndarray
    a: np.ndarray


@dataclass
class SecretKey:
    params: HeParams
    s: np.ndarray


@dataclass
class EvalKey:
    params: HeParams
    digits: tuple[tuple[np.ndarray, np.ndarray], ...]


@dataclass
class RingKeys:
    params: HeParams
    public_key: PublicKey
    secret_key: SecretKey
    eval_key: EvalKey
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PlainOperand:
    """A plaintext vector pre-encoded for repeated ciphertext ops."""

    params_hash: bytes
    ntt: np.ndarray


def _as_plain_vec(params: HeParams, values) -> np.ndarray:
    n, p = params.poly_degree, params.plaintext_modulus
    arr = np.asarray(values, dtype=np.int64).ravel()
    if arr.size > n:
        raise ParameterError(f"vector of {arr.size} elements exceeds {n} slots")
    if arr.size and (arr.min() < 0 or arr.max() >= p):
        raise ParameterError("plaintext elements must lie in [0, p)")
    out = np.zeros(n, dtype=np.int64)
    out[: arr.size] = arr
    return out


def _sample_rows(ctx: _RingCtx, drbg: Drbg, kind: str) -> np.ndarray:
    """Small secret/noise polynomial as reduced residue rows, NTT form."""
    n = ctx.params.poly_degree
    if kind == "ternary":
        coeffs = drbg.ternary(n)
    elif kind == "cbd":
        coeffs = drbg.cbd(n, _CBD_WIDTH)
    else:
        raise ValueError(kind)
    rows = coeffs[None, :] % ctx.q_col
    return ctx.plan_q.forward(rows)


def _uniform_ntt(ctx: _RingCtx, drbg: Drbg) -> np.ndarray:
    # uniform in R_q; sampled directly in the NTT domain (a bijection)
    n = ctx.params.poly_degree
    return np.stack([drbg.uniform(q, n) for q in ctx.params.coeff_primes])


def keygen(params: HeParams, seed: bytes) -> RingKeys:
    """Deterministic key generation from a 32-byte seed."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise ParameterError("keygen seed must be exactly 32 bytes")
    ctx = _ctx(params)
    root = Drbg(hashlib.shake_256(b"hhefl-keygen|" + bytes(seed)).digest(32))
    s = _sample_rows(ctx, root.child("secret"), "ternary")
    e = _sample_rows(ctx, root.child("error"), "cbd")
    a = _uniform_ntt(ctx, root.child("public-a"))
    b = ctx.mod_sub(ctx.mod_neg(ctx.mul(a, s)), e)
    s_sq = ctx.mul(s, s)
    evk_drbg = root.child("evk")
    digits = []
    for t in range(ctx.codec.n_limbs):
        a_t = _uniform_ntt(ctx, evk_drbg.child(f"a{t}"))
        e_t = _sample_rows(ctx, evk_drbg.child(f"e{t}"), "cbd")
        w_t = np.array(
            [pow(2, 32 * t, m) for m in params.coeff_primes], dtype=np.int64
        )[:, None]
        ev0 = ctx.mod_add(ctx.mod_sub(ctx.mod_neg(ctx.mul(a_t, s)), e_t), ctx.mul(w_t % ctx.q_col, s_sq))
        digits.append((ev0, a_t))
    meta = {
        "security_note": params.security_note,
        "seed_fingerprint": hashlib.sha256(seed).hexdigest()[:16],
    }
    return RingKeys(
        params,
        PublicKey(params, b, a),
        SecretKey(params, s),
        EvalKey(params, tuple(digits)),
        meta,
    )


def _encode_poly_rows(ctx: _RingCtx, vec_rows: np.ndarray) -> np.ndarray:
    """Slot matrix (B, N) mod p -> plaintext polynomials (B, N) mod p."""
    return ctx.plan_p.inverse(vec_rows[:, None, :])[:, 0, :]


def _poly_to_ntt_rows(ctx: _RingCtx, polys: np.ndarray) -> np.ndarray:
    """(B, N) polynomials mod p -> (B, k, N) NTT/RNS stacks.

    Coefficients above p/2 map to centered representatives mod each q_j,
    which keeps plaintext-multiplication noise growth smaller.
    """
    b = polys.shape[0]
    p = ctx.params.plaintext_modulus
    high = polys > (p // 2)
    rows = np.where(
        high[:, None, :],
        ctx.q_col[None, :, :] - (p - polys[:, None, :]),
        polys[:, None, :],
    )
    return ctx.plan_q.forward(rows)


def encode_operand(params: HeParams, values) -> PlainOperand:
    """Pre-encode one plaintext vector for mul/add/sub_plain."""
    return encode_operands_batch(params, _as_plain_vec(params, values)[None, :])[0]


def encode_operands_batch(params: HeParams, matrix: np.ndarray) -> list[PlainOperand]:
    """Encode many plaintext vectors at once (rows of slot values)."""
    ctx = _ctx(params)
    mat = np.asarray(matrix, dtype=np.int64)
    if mat.ndim != 2 or mat.shape[1] != params.poly_degree:
        raise ParameterError("expected matrix of shape (B, N)")
    if mat.size and (mat.min() < 0 or mat.max() >= params.plaintext_modulus):
        raise ParameterError("plaintext elements must lie in [0, p)")
    polys = _encode_poly_rows(ctx, mat)
    ntts = _poly_to_ntt_rows(ctx, polys)
    return [PlainOperand(ctx.params_hash, ntts[i]) for i in range(len(ntts))]


def _operand(params: HeParams, values) -> PlainOperand:
    if isinstance(values, PlainOperand):
        if values.params_hash != _ctx(params).params_hash:
            raise ParameterError("operand was encoded under different parameters")
        return values
    return encode_operand(params, values)


def encrypt(pk: PublicKey, values, rng: Drbg | None = None) -> RingCiphertext:
    """Randomized public-key encryption of a slot vector."""
    ctx = _ctx(pk.params)
    if rng is None:
        rng = Drbg(os.urandom(32))
    m_ntt = _operand(pk.params, values).ntt
    u = _sample_rows(ctx, rng.child("u"), "ternary")
    e1 = _sample_rows(ctx, rng.child("e1"), "cbd")
    e2 = _sample_rows(ctx, rng.child("e2"), "cbd")
    scaled_m = ctx.mul(ctx.delta_col, m_ntt)
    c0 = ctx.mod_add(ctx.mod_add(ctx.mul(pk.b, u), e1), scaled_m)
    c1 = ctx.mod_add(ctx.mul(pk.a, u), e2)
    return RingCiphertext(pk.params, (c0, c1), level=0)


def _phase(ctx: _RingCtx, sk: SecretKey, ct: RingCiphertext) -> np.ndarray:
    acc = ct.comps[0]
    s_pow = sk.s
    for comp in ct.comps[1:]:
        acc = ctx.mod_add(acc, ctx.mul(comp, s_pow))
        s_pow = ctx.mul(s_pow, sk.s)
    return acc


def decrypt(sk: SecretKey, ct: RingCiphertext) -> np.ndarray:
    """Decrypt to the full length-N slot vector (zeros beyond input length)."""
    _check_params(sk.params, ct.params)
    ctx = _ctx(sk.params)
    coeffs = ctx.plan_q.inverse(_phase(ctx, sk, ct))
    lifted = ctx.codec.lift(coeffs)
    p, q, half = ctx.params.plaintext_modulus, ctx.codec.q_product, ctx.q_half
    poly = np.array([(p * int(x) + half) // q % p for x in lifted], dtype=np.int64)
    return ctx.plan_p.forward(poly[None, None, :])[0, 0]


def _check_params(a: HeParams, b: HeParams) -> None:
    if a != b:
        raise ParameterError("operands were created under different parameters")


def _binary_comps(a: RingCiphertext, b: RingCiphertext):
    _check_params(a.params, b.params)
    if a.component_count != b.component_count:
        raise ParameterError("component counts differ; relinearize first")
    return zip(a.comps, b.comps)


def add(a: RingCiphertext, b: RingCiphertext) -> RingCiphertext:
    ctx = _ctx(a.params)
    comps = tuple(ctx.mod_add(x, y) for x, y in _binary_comps(a, b))
    return RingCiphertext(a.params, comps, max(a.level, b.level))


def sub(a: RingCiphertext, b: RingCiphertext) -> RingCiphertext:
    ctx = _ctx(a.params)
    comps = tuple(ctx.mod_sub(x, y) for x, y in _binary_comps(a, b))
    return RingCiphertext(a.params, comps, max(a.level, b.level))


def add_plain(ct: RingCiphertext, values) -> RingCiphertext:
    ctx = _ctx(ct.params)
    m = ctx.mul(ctx.delta_col, _operand(ct.params, values).ntt)
    comps = (ctx.mod_add(ct.comps[0], m),) + ct.comps[1:]
    return RingCiphertext(ct.params, comps, ct.level)


def sub_plain(ct: RingCiphertext, values) -> RingCiphertext:
    ctx = _ctx(ct.params)
    m = ctx.mul(ctx.delta_col, _operand(ct.params, values).ntt)
    comps = (ctx.mod_sub(ct.comps[0], m),) + ct.comps[1:]
    return RingCiphertext(ct.params, comps, ct.level)


def plain_sub(values, ct: RingCiphertext) -> RingCiphertext:
    """Encrypt-free subtraction: Enc(v - m) from plaintext v and Enc(m)."""
    ctx = _ctx(ct.params)
    m = ctx.mul(ctx.delta_col, _operand(ct.params, values).ntt)
    comps = (ctx.mod_sub(m, ct.comps[0]),) + tuple(ctx.mod_neg(c) for c in ct.comps[1:])
    return RingCiphertext(ct.params, comps, ct.level)


def mul_plain(ct: RingCiphertext, values) -> RingCiphertext:
    """Slot-wise product with a plaintext vector."""
    ctx = _ctx(ct.params)
    m = _operand(ct.params, values).ntt
    comps = tuple(ctx.mul(c, m) for c in ct.comps)
    return RingCiphertext(ct.params, comps, ct.level)


def mul_scalar(ct: RingCiphertext, scalar: int) -> RingCiphertext:
    """Product with one integer constant applied to every slot."""
    p = ct.params.plaintext_modulus
    c = int(scalar) % p
    ctx = _ctx(ct.params)
    comps = tuple(ctx.mul(np.int64(c), comp) for comp in ct.comps)
    return RingCiphertext(ct.params, comps, ct.level)


def _delta_scalar_rows(ctx: _RingCtx, scalar: int) -> np.ndarray:
    # constant plaintext c encodes to the constant polynomial, whose NTT is
    # c everywhere; scaled by delta it is a per-prime scalar
    c = int(scalar) % ctx.params.plaintext_modulus
    return np.array(
        [(ctx.delta * c) % m for m in ctx.params.coeff_primes], dtype=np.int64
    )[:, None]


def add_scalar(ct: RingCiphertext, scalar: int) -> RingCiphertext:
    """Add one integer constant to every slot."""
    ctx = _ctx(ct.params)
    comps = (ctx.mod_add(ct.comps[0], _delta_scalar_rows(ctx, scalar)),) + ct.comps[1:]
    return RingCiphertext(ct.params, comps, ct.level)


def sub_scalar(ct: RingCiphertext, scalar: int) -> RingCiphertext:
    """Subtract one integer constant from every slot."""
    ctx = _ctx(ct.params)
    comps = (ctx.mod_sub(ct.comps[0], _delta_scalar_rows(ctx, scalar)),) + ct.comps[1:]
    return RingCiphertext(ct.params, comps, ct.level)


def mul(a: RingCiphertext, b: RingCiphertext, evk: EvalKey) -> RingCiphertext:
    """Slot-wise ciphertext product, relinearized back to two components."""
    _check_params(a.params, b.params)
    _check_params(a.params, evk.params)
    if a.component_count != 2 or b.component_count != 2:
        raise ParameterError("multiplication expects 2-component ciphertexts")
    level = max(a.level, b.level) + 1
    if level > a.params.depth_budget:
        raise DepthExceededError(
            f"depth {level} exceeds budget {a.params.depth_budget}"
        )
    ctx = _ctx(a.params)
    n = ctx.params.poly_degree
    same = a is b or all(x is y for x, y in zip(a.comps, b.comps))
    stack = np.stack(a.comps + (() if same else b.comps))
    coeff = ctx.plan_q.inverse(stack)
    a0 = ctx.codec.lift(coeff[0])
    a1 = ctx.codec.lift(coeff[1])
    if same:
        b0, b1 = a0, a1
    else:
        b0 = ctx.codec.lift(coeff[2])
        b1 = ctx.codec.lift(coeff[3])
    d0, d1, d2 = negacyclic_tensor(a0, a1, b0, b1, n, ctx.window_bits)
    q, p = ctx.codec.q_product, ctx.params.plaintext_modulus
    s0 = scale_round(d0, p, q)
    s1 = scale_round(d1, p, q)
    s2 = scale_round(d2, p, q)
    limbs0 = ctx.codec.to_limbs(s0)
    limbs1 = ctx.codec.to_limbs(s1)
    limbs2 = ctx.codec.to_limbs(s2)
    r0 = ctx.codec.limbs_to_residues(limbs0)
    r1 = ctx.codec.limbs_to_residues(limbs1)
    # digit rows double as the base-2^32 relinearization decomposition
    digit_rows = limbs2.T[:, None, :] % ctx.q_col  # (n_limbs, k, N)
    batch = np.concatenate([np.stack([r0, r1]), digit_rows])
    ntts = ctx.plan_q.forward(batch)
    c0, c1 = ntts[0], ntts[1]
    for t, (ev0, ev1) in enumerate(evk.digits):
        dt = ntts[2 + t]
        c0 = ctx.mod_add(c0, ctx.mul(dt, ev0))
        c1 = ctx.mod_add(c1, ctx.mul(dt, ev1))
    return RingCiphertext(a.params, (c0, c1), level)


def noise_budget(sk: SecretKey, ct: RingCiphertext) -> int:
    """Remaining headroom in bits, measured empirically; 0 means unreliable."""
    _check_params(sk.params, ct.params)
    ctx = _ctx(sk.params)
    coeffs = ctx.plan_q.inverse(_phase(ctx, sk, ct))
    lifted = ctx.codec.lift(coeffs)
    p, q, half = ctx.params.plaintext_modulus, ctx.codec.q_product, ctx.q_half
    delta = ctx.delta
    worst = 1
    for x in lifted:
        m = (p * int(x) + half) // q % p
        r = (int(x) - delta * m) % q
        mag = min(r, q - r)
        if mag > worst:
            worst = mag
    headroom = (q // (2 * p)).bit_length() - 1 - worst.bit_length()
    return max(0, headroom)


def _dump_rows(ctx: _RingCtx, rows: np.ndarray) -> bytes:
    coeff = ctx.plan_q.inverse(rows)
    lifted = ctx.codec.lift(coeff)
    w = ctx.codec.limb_bytes
    return b"".join(int(x).to_bytes(w, "little") for x in lifted)


def _load_rows(ctx: _RingCtx, data: bytes) -> np.ndarray:
    n, w = ctx.params.poly_degree, ctx.codec.limb_bytes
    if len(data) != n * w:
        raise SerializationError("component has wrong length")
    limbs = np.frombuffer(data, dtype="<u4").astype(np.int64).reshape(n, ctx.codec.n_limbs)
    residues = ctx.codec.limbs_to_residues(limbs)
    return ctx.plan_q.forward(residues)


def serialize(ct: RingCiphertext) -> bytes:
    """Canonical fixed-width encoding: 16-byte header then components."""
    ctx = _ctx(ct.params)
    head = (
        _MAGIC_CT
        + ctx.params_hash
        + bytes([ct.component_count, ct.level])
        + b"\x00\x00"
    )
    return head + b"".join(_dump_rows(ctx, c) for c in ct.comps)


def deserialize(params: HeParams, data: bytes) -> RingCiphertext:
    ctx = _ctx(params)
    if len(data) < 16:
        raise SerializationError("truncated header")
    if data[:4] != _MAGIC_CT:
        raise SerializationError("bad magic")
    if data[4:12] != ctx.params_hash:
        raise SerializationError("parameter hash mismatch")
    ncomp, level = data[12], data[13]
    if ncomp not in (2, 3):
        raise SerializationError("component count must be 2 or 3")
    body = data[16:]
    if len(body) != ncomp * ctx.ser_comp_bytes:
        raise SerializationError("truncated or oversized body")
    comps = tuple(
        _load_rows(ctx, body[i * ctx.ser_comp_bytes : (i + 1) * ctx.ser_comp_bytes])
        for i in range(ncomp)
    )
    return RingCiphertext(params, comps, level)


def _dump_key_rows(ctx: _RingCtx, magic: bytes, rows_list) -> bytes:
    out = [magic, ctx.params_hash, bytes([len(rows_list), 0, 0, 0])]
    out += [_dump_rows(ctx, rows) for rows in rows_list]
    return b"".join(out)


def _load_key_rows(ctx: _RingCtx, magic: bytes, data: bytes) -> list[np.ndarray]:
    if len(data) < 16 or data[:4] != magic:
        raise SerializationError("bad key blob")
    if data[4:12] != ctx.params_hash:
        raise SerializationError("parameter hash mismatch")
    count = data[12]
    body = data[16:]
    if len(body) != count * ctx.ser_comp_bytes:
        raise SerializationError("bad key blob length")
    return [
        _load_rows(ctx, body[i * ctx.ser_comp_bytes : (i + 1) * ctx.ser_comp_bytes])
        for i in range(count)
    ]


def public_key_bytes(pk: PublicKey) -> bytes:
    return _dump_key_rows(_ctx(pk.params), _MAGIC_PK, [pk.b, pk.a])


def public_key_from_bytes(params: HeParams, data: bytes) -> PublicKey:
    b, a = _load_key_rows(_ctx(params), _MAGIC_PK, data)
    return PublicKey(params, b, a)


def secret_key_bytes(sk: SecretKey) -> bytes:
    return _dump_key_rows(_ctx(sk.params), _MAGIC_SK, [sk.s])


def secret_key_from_bytes(params: HeParams, data: bytes) -> SecretKey:
    (s,) = _load_key_rows(_ctx(params), _MAGIC_SK, data)
    return SecretKey(params, s)


def eval_key_bytes(ek: EvalKey) -> bytes:
    rows = [r for pair in ek.digits for r in pair]
    return _dump_key_rows(_ctx(ek.params), _MAGIC_EK, rows)


def eval_key_from_bytes(params: HeParams, data: bytes) -> EvalKey:
    rows = _load_key_rows(_ctx(params), _MAGIC_EK, data)
    if len(rows) % 2:
        raise SerializationError("eval key must hold pairs")
    pairs = tuple((rows[i], rows[i + 1]) for i in range(0, len(rows), 2))
    return EvalKey(params, pairs)


def keys_to_bytes(keys: RingKeys) -> bytes:
    parts = [
        public_key_bytes(keys.public_key),
        secret_key_bytes(keys.secret_key),
        eval_key_bytes(keys.eval_key),
    ]
    out = [len(parts).to_bytes(4, "little")]
    for part in parts:
        out.append(len(part).to_bytes(4, "little"))
        out.append(part)
    return b"".join(out)

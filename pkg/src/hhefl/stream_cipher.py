"""HE-friendly stream cipher and its homomorphic decryption circuit.

The cipher alternates seeded affine layers with the degree-2 map
x -> x^2 + x over F_p, so decryption of one block is an arithmetic
circuit of multiplicative depth R in the key. That is the property the
transciphering step exploits: given the key encrypted under the ring
scheme, the server evaluates the keystream inside ciphertext space and
subtracts it from the symmetric ciphertext, converting it into a
homomorphic encryption of the same message without ever decrypting.

Round material is derived from a public seed, the message nonce, the
block index and the round index via SHAKE-128 with rejection sampling,
so client and server always agree on it. The cipher is structurally
faithful to HE-friendly stream cipher designs but is a toy: do not read
any security claims into it.

Slot packing: the encrypted key arrives as `key_len` ciphertexts, each
broadcasting one key element to every slot. A slot is an independent
lane carrying one block, so a whole message transciphers in parallel:
affine layers become plaintext multiplications (the matrix entries vary
per lane), and the nonlinear layer is one ciphertext squaring per state
element. The output is `block_len` ciphertexts in transposed layout:
ciphertext i, slot m holds message element m * block_len + i.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import ring_he
from .errors import ParameterError, SerializationError
from .ring_he import HeParams, PlainOperand, RingCiphertext
from .rng import Drbg

DEFAULT_CIPHER_SEED = hashlib.shake_256(b"hhefl-cipher-seed-v1").digest(32)

_MAGIC_SYM = b"HSC1"
_NONCE_BYTES = 16


@dataclass(frozen=True)
class CipherParams:
    """Field, dimensions and round count of the stream cipher."""

    field_modulus: int = 65537
    key_len: int = 16
    block_len: int = 8
    rounds: int = 3
    cipher_seed: bytes = DEFAULT_CIPHER_SEED

    def __post_init__(self):
        if self.field_modulus != 65537:
            raise ParameterError("cipher is specialised to p = 65537")
        if not 0 < self.block_len <= self.key_len:
            raise ParameterError("need 0 < block_len <= key_len")
        if self.rounds < 1:
            raise ParameterError("need at least one round")
        if len(self.cipher_seed) != 32:
            raise ParameterError("cipher_seed must be 32 bytes")

    @property
    def params_hash(self) -> bytes:
        canon = b"|".join(
            [
                b"hhefl-cipher-v1",
                str(self.field_modulus).encode(),
                str(self.key_len).encode(),
                str(self.block_len).encode(),
                str(self.rounds).encode(),
                self.cipher_seed,
            ]
        )
        return hashlib.sha256(canon).digest()[:8]

    def validate_against(self, he_params: HeParams) -> None:
        if self.field_modulus != he_params.plaintext_modulus:
            raise ParameterError("cipher field must equal the HE plaintext modulus")
        if self.rounds > he_params.depth_budget:
            raise ParameterError(
                f"cipher rounds {self.rounds} exceed HE depth budget "
                f"{he_params.depth_budget}"
            )


@dataclass
class SymKey:
    """Stream-cipher key: key_len field elements."""

    elements: np.ndarray

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.int64)


def generate_sym_key(params: CipherParams, rng: Drbg) -> SymKey:
    return SymKey(rng.uniform(params.field_modulus, params.key_len))


def _check_key(params: CipherParams, key: SymKey) -> np.ndarray:
    arr = key.elements
    if arr.shape != (params.key_len,):
        raise ParameterError("key has wrong length")
    if arr.min() < 0 or arr.max() >= params.field_modulus:
        raise ParameterError("key elements out of range")
    return arr


@dataclass
class SymCiphertext:
    """Nonce, encrypted blocks, and the fill of the final block."""

    nonce: bytes
    blocks: np.ndarray  # (n_blocks, block_len) int64
    true_len: int  # meaningful elements in the final block, 0 < true_len <= b

    @property
    def message_length(self) -> int:
        if len(self.blocks) == 0:
            return 0
        return (len(self.blocks) - 1) * self.blocks.shape[1] + self.true_len


def _field_samples(seed_material: bytes, count: int) -> np.ndarray:
    """`count` uniform elements of F_65537 from a SHAKE-128 stream.

    Three little-endian bytes per draw, rejecting values >= 255 * p so the
    remainder is exactly uniform. The stream is an extendable prefix, so
    the rare refill reproduces the same accepted positions.
    """
    p = 65537
    limit = ((1 << 24) // p) * p
    sh = hashlib.shake_128(seed_material)
    pad = 8
    while True:
        raw = np.frombuffer(sh.digest(3 * (count + pad)), dtype=np.uint8)
        vals = (
            raw[0::3].astype(np.int64)
            + (raw[1::3].astype(np.int64) << 8)
            + (raw[2::3].astype(np.int64) << 16)
        )
        accepted = vals[vals < limit]
        if len(accepted) >= count:
            return accepted[:count] % p
        pad *= 4


def _round_dims(params: CipherParams, r: int) -> tuple[int, int]:
    if not 1 <= r <= params.rounds + 1:
        raise ParameterError("round index out of range")
    b_in = params.key_len if r == 1 else params.block_len
    return params.block_len, b_in


def round_constants(
    params: CipherParams, nonce: bytes, block_index: int, round_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Affine layer (A, c) for one block and round, derived from public data."""
    if len(nonce) != _NONCE_BYTES:
        raise ParameterError("nonce must be 16 bytes")
    b_out, b_in = _round_dims(params, round_index)
    material = (
        params.cipher_seed
        + nonce
        + int(block_index).to_bytes(8, "little")
        + int(round_index).to_bytes(8, "little")
    )
    flat = _field_samples(material, b_out * b_in + b_out)
    a = flat[: b_out * b_in].reshape(b_out, b_in)
    c = flat[b_out * b_in :]
    return a, c


def keystream_block(
    params: CipherParams, key: SymKey, nonce: bytes, block_index: int
) -> np.ndarray:
    """The block_len keystream elements for one block index."""
    p = params.field_modulus
    s = _check_key(params, key)
    for r in range(1, params.rounds + 1):
        a, c = round_constants(params, nonce, block_index, r)
        s = (a @ s + c) % p
        s = (s * s + s) % p
    a, c = round_constants(params, nonce, block_index, params.rounds + 1)
    return (a @ s + c) % p


def _keystream(params: CipherParams, key: SymKey, nonce: bytes, n_blocks: int) -> np.ndarray:
    return np.stack(
        [keystream_block(params, key, nonce, j) for j in range(n_blocks)]
    ) if n_blocks else np.zeros((0, params.block_len), dtype=np.int64)


def sym_encrypt(
    params: CipherParams, key: SymKey, nonce: bytes, message
) -> SymCiphertext:
    """Additive stream encryption; ciphertext has zero expansion beyond padding."""
    if len(nonce) != _NONCE_BYTES:
        raise ParameterError("nonce must be 16 bytes")
    p, b = params.field_modulus, params.block_len
    msg = np.asarray(message, dtype=np.int64).ravel()
    if msg.size and (msg.min() < 0 or msg.max() >= p):
        raise ParameterError("message elements must lie in [0, p)")
    n_blocks = -(-msg.size // b)
    padded = np.zeros(n_blocks * b, dtype=np.int64)
    padded[: msg.size] = msg
    ks = _keystream(params, key, nonce, n_blocks)
    blocks = (padded.reshape(n_blocks, b) + ks) % p
    true_len = msg.size - (n_blocks - 1) * b if n_blocks else b
    return SymCiphertext(bytes(nonce), blocks, true_len)


def sym_decrypt(params: CipherParams, key: SymKey, ct: SymCiphertext) -> np.ndarray:
    p = params.field_modulus
    ks = _keystream(params, key, ct.nonce, len(ct.blocks))
    msg = (ct.blocks - ks) % p
    return msg.ravel()[: ct.message_length]


def serialize_sym_ciphertext(params: CipherParams, ct: SymCiphertext) -> bytes:
    head = (
        _MAGIC_SYM
        + ct.nonce
        + len(ct.blocks).to_bytes(4, "little")
        + int(ct.true_len).to_bytes(4, "little")
        + params.params_hash
    )
    body = ct.blocks.astype("<u4").tobytes()
    return head + body


def deserialize_sym_ciphertext(params: CipherParams, data: bytes) -> SymCiphertext:
    if len(data) < 36:
        raise SerializationError("truncated header")
    if data[:4] != _MAGIC_SYM:
        raise SerializationError("bad magic")
    nonce = data[4:20]
    n_blocks = int.from_bytes(data[20:24], "little")
    true_len = int.from_bytes(data[24:28], "little")
    if data[28:36] != params.params_hash:
        raise SerializationError("cipher parameter hash mismatch")
    body = data[36:]
    b = params.block_len
    if len(body) != n_blocks * b * 4:
        raise SerializationError("body length mismatch")
    if not 0 < true_len <= b:
        raise SerializationError("true_len out of range")
    blocks = (
        np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(n_blocks, b)
    )
    if blocks.size and blocks.max() >= params.field_modulus:
        raise SerializationError("block element out of range")
    return SymCiphertext(nonce, blocks, true_len)


# ---------------------------------------------------------------------------
# Transciphering: homomorphic evaluation of the decryption circuit.
# ---------------------------------------------------------------------------


def encrypt_key_layouts(
    pk: ring_he.PublicKey,
    params: CipherParams,
    key: SymKey,
    rng: Drbg | None = None,
) -> list[RingCiphertext]:
    """Encrypt the key in the broadcast layouts the server circuit consumes.

    One ciphertext per key element, prepared at encryption time, so the
    homomorphic matrix-vector products need no slot rotations.
    """
    arr = _check_key(params, key)
    n = pk.params.poly_degree
    cts = []
    for idx, k_elem in enumerate(arr):
        child = rng.child(f"key-layout-{idx}") if rng is not None else None
        vec = np.full(n, int(k_elem), dtype=np.int64)
        cts.append(ring_he.encrypt(pk, vec, child))
    return cts


def _constants_matrix(
    params: CipherParams,
    nonce: bytes,
    j0: int,
    lanes: int,
    n: int,
    block_mode: bool,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
    """Per-round (A, c) stacked across lanes into slot-value rows.

    Returns [(a_rows (b_out, b_in, N), c_rows (b_out, N)) per round]. In
    block_mode there is a single lane broadcast to every slot.
    """
    per_round = []
    for r in range(1, params.rounds + 2):
        b_out, b_in = _round_dims(params, r)
        a_rows = np.zeros((b_out, b_in, n), dtype=np.int64)
        c_rows = np.zeros((b_out, n), dtype=np.int64)
        if block_mode:
            a, c = round_constants(params, nonce, j0, r)
            a_rows[:, :, :] = a[:, :, None]
            c_rows[:, :] = c[:, None]
        else:
            for m in range(lanes):
                a, c = round_constants(params, nonce, j0 + m, r)
                a_rows[:, :, m] = a
                c_rows[:, m] = c
        per_round.append((a_rows, c_rows))
    return per_round, params.rounds + 2


def _sum_products(
    cts: list[RingCiphertext], ops: list[PlainOperand]
) -> RingCiphertext:
    acc = ring_he.mul_plain(cts[0], ops[0])
    for ct, op in zip(cts[1:], ops[1:]):
        acc = ring_he.add(acc, ring_he.mul_plain(ct, op))
    return acc


def _hesd_lanes(
    enc_key: list[RingCiphertext],
    params: CipherParams,
    evk: ring_he.EvalKey,
    nonce: bytes,
    j0: int,
    blocks: np.ndarray,
    block_mode: bool,
) -> list[RingCiphertext]:
    he_params = enc_key[0].params
    n = he_params.poly_degree
    b, t_k, big_r = params.block_len, params.key_len, params.rounds
    lanes = len(blocks)
    rounds_ac, _ = _constants_matrix(params, nonce, j0, lanes, n, block_mode)

    # Encode every plaintext operand for the whole circuit in one batch.
    rows: list[np.ndarray] = []
    for a_rows, c_rows in rounds_ac[:big_r]:
        rows.extend(a_rows.reshape(-1, n))
        rows.extend(c_rows)
    a_fin, c_fin = rounds_ac[big_r]
    if block_mode:
        # Route keystream element i into slot i, so one ciphertext carries
        # the whole block; the symmetric block sits in slots 0..b-1 too.
        fin_rows = np.zeros((b, n), dtype=np.int64)
        for k in range(b):
            fin_rows[k, :b] = a_fin[:, k, 0]
        rows.extend(fin_rows)
        c_slot = np.zeros(n, dtype=np.int64)
        c_slot[:b] = c_fin[:, 0]
        rows.append(c_slot)
        cblock_row = np.zeros(n, dtype=np.int64)
        cblock_row[:b] = blocks[0]
        rows.append(cblock_row)
    else:
        rows.extend(a_fin.reshape(-1, n))
        rows.extend(c_fin)
        cblock_rows = np.zeros((b, n), dtype=np.int64)
        cblock_rows[:, :lanes] = blocks.T
        rows.extend(cblock_rows)
    ops = ring_he.encode_operands_batch(he_params, np.stack(rows))

    # Walk the same list back out in order.
    pos = 0
    round_ops = []
    for a_rows, c_rows in rounds_ac[:big_r]:
        b_out, b_in = a_rows.shape[0], a_rows.shape[1]
        a_ops = [
            [ops[pos + i * b_in + k] for k in range(b_in)] for i in range(b_out)
        ]
        pos += b_out * b_in
        c_ops = ops[pos : pos + b_out]
        pos += b_out
        round_ops.append((a_ops, c_ops))

    state = enc_key
    for r_idx in range(big_r):
        a_ops, c_ops = round_ops[r_idx]
        new_state = []
        for i in range(b):
            lin = _sum_products(state, a_ops[i])
            new_state.append(ring_he.add_plain(lin, c_ops[i]))
        state = [
            ring_he.add(ring_he.mul(s, s, evk), s) for s in new_state
        ]

    if block_mode:
        fin_ops = ops[pos : pos + b]
        c_op = ops[pos + b]
        cblock_op = ops[pos + b + 1]
        ks = ring_he.add_plain(_sum_products(state, fin_ops), c_op)
        return [ring_he.plain_sub(cblock_op, ks)]

    outs = []
    for i in range(b):
        a_ops_i = [ops[pos + i * b + k] for k in range(b)]
        ks = ring_he.add_plain(_sum_products(state, a_ops_i), ops[pos + b * b + i])
        outs.append(ring_he.plain_sub(ops[pos + b * b + b + i], ks))
    return outs


def hesd_block(
    enc_key: list[RingCiphertext],
    params: CipherParams,
    evk: ring_he.EvalKey,
    nonce: bytes,
    block_index: int,
    c_block: np.ndarray,
) -> RingCiphertext:
    """Transcipher one block; the result decrypts to it in slots 0..b-1."""
    _check_hesd_inputs(enc_key, params)
    c_block = np.asarray(c_block, dtype=np.int64).reshape(1, params.block_len)
    return _hesd_lanes(
        enc_key, params, evk, nonce, block_index, c_block, block_mode=True
    )[0]


def hesd(
    enc_key: list[RingCiphertext],
    params: CipherParams,
    evk: ring_he.EvalKey,
    sym_ct: SymCiphertext,
) -> list[RingCiphertext]:
    """Transcipher a whole message, lane-parallel across slots.

    Returns block_len ciphertexts per batch of up to N blocks, in the
    transposed layout described in the module docstring.
    """
    _check_hesd_inputs(enc_key, params)
    n = enc_key[0].params.poly_degree
    blocks = sym_ct.blocks
    if len(blocks) == 0:
        return []
    outs: list[RingCiphertext] = []
    for start in range(0, len(blocks), n):
        chunk = blocks[start : start + n]
        outs.extend(
            _hesd_lanes(
                enc_key, params, evk, sym_ct.nonce, start, chunk, block_mode=False
            )
        )
    return outs


def _check_hesd_inputs(enc_key: list[RingCiphertext], params: CipherParams) -> None:
    if len(enc_key) != params.key_len:
        raise ParameterError(
            f"expected {params.key_len} key ciphertexts, got {len(enc_key)}"
        )
    he_params = enc_key[0].params
    for ct in enc_key:
        if ct.params != he_params:
            raise ParameterError("key ciphertexts under mismatched parameters")
    params.validate_against(he_params)


def transciphered_to_vector(
    sk: ring_he.SecretKey,
    cts: list[RingCiphertext],
    params: CipherParams,
    message_length: int,
) -> np.ndarray:
    """Decrypt hesd output back into the flat message vector."""
    b = params.block_len
    n = sk.params.poly_degree
    if message_length == 0:
        return np.zeros(0, dtype=np.int64)
    n_blocks = -(-message_length // b)
    out = np.zeros((n_blocks, b), dtype=np.int64)
    batches = -(-n_blocks // n)
    if len(cts) != batches * b:
        raise ParameterError("ciphertext count does not match message length")
    for g in range(batches):
        lanes = min(n, n_blocks - g * n)
        for i in range(b):
            slots = ring_he.decrypt(sk, cts[g * b + i])
            out[g * n : g * n + lanes, i] = slots[:lanes]
    return out.ravel()[:message_length]

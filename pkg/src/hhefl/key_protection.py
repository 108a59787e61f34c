"""Key-transport modes: shared-key baseline, masking, RSA encapsulation.

A client's stream-cipher key must reach the server as an HE ciphertext so
the transciphering circuit can consume it. Because every client holds the
single HE secret key, shipping Enc_HE(key) directly (the baseline) lets
any client that intercepts the message decrypt another client's key. The
two countermeasures:

- masking: the client encrypts (key + M) mod p where M is a one-time pad
  known only to that client and the server; the server subtracts M inside
  ciphertext space, recovering Enc_HE(key) without ever decrypting.
- RSA wrapping: the client serializes Enc_HE(key), splits it into chunks
  bounded by the OAEP plaintext limit and encrypts each chunk under the
  server's certified RSA public key; only the server can unwrap.

The server's RSA key authenticity comes from an authority-signed
certificate (RSA-PSS over the DER-encoded public key).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization as pem
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from . import ring_he
from .errors import CertificateError, KeyRecoveryError, ParameterError, SerializationError
from .ring_he import HeParams, PublicKey, RingCiphertext, SecretKey
from .rng import Drbg
from .stream_cipher import CipherParams, SymKey

OAEP_OVERHEAD = 66  # 2 * SHA-256 digest + 2 bytes of padding framing

BASELINE = "baseline"
MASKED = "masked"
RSA_WRAPPED = "rsa"

_TAGS = {BASELINE: 1, MASKED: 2, RSA_WRAPPED: 3}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}

_OAEP = padding.OAEP(
    mgf=padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)
_PSS = padding.PSS(
    mgf=padding.MGF1(hashes.SHA256()), salt_length=padding.PSS.DIGEST_LENGTH
)


@dataclass
class Mask:
    """One-time additive blind for a client's symmetric key."""

    elements: np.ndarray
    owner: str

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.int64)


def generate_mask(params: CipherParams, owner: str, rng: Drbg) -> Mask:
    return Mask(rng.uniform(params.field_modulus, params.key_len), owner)


@dataclass
class ProtectedKey:
    """Exactly one transport representation of an encrypted symmetric key."""

    mode: str
    key_cts: list[RingCiphertext] | None = None
    chunks: list[bytes] | None = None

    def __post_init__(self):
        if self.mode not in _TAGS:
            raise ParameterError(f"unknown protection mode {self.mode!r}")
        has_cts = self.key_cts is not None
        has_chunks = self.chunks is not None
        if self.mode == RSA_WRAPPED:
            if not has_chunks or has_cts:
                raise ParameterError("rsa-wrapped key carries chunks only")
        elif not has_cts or has_chunks:
            raise ParameterError(f"{self.mode} key carries ciphertexts only")


@dataclass
class ServerCertificate:
    """Authority-signed statement binding the server's RSA public key."""

    public_key_der: bytes
    signature: bytes


def _check_lengths(params: CipherParams, sk: SymKey) -> np.ndarray:
    arr = np.asarray(sk.elements, dtype=np.int64)
    if arr.shape != (params.key_len,):
        raise ParameterError("symmetric key has wrong length")
    return arr


def protect_baseline(
    params: CipherParams, sk: SymKey, he_pk: PublicKey, rng: Drbg | None = None
) -> ProtectedKey:
    """Ship Enc_HE(key) as-is. Deliberately vulnerable; see the adversary module."""
    from .stream_cipher import encrypt_key_layouts

    _check_lengths(params, sk)
    return ProtectedKey(BASELINE, key_cts=encrypt_key_layouts(he_pk, params, sk, rng))


def protect_masked(
    params: CipherParams,
    sk: SymKey,
    mask: Mask,
    he_pk: PublicKey,
    rng: Drbg | None = None,
) -> ProtectedKey:
    """Encrypt (key + M) mod p element-wise under the HE public key."""
    from .stream_cipher import encrypt_key_layouts

    arr = _check_lengths(params, sk)
    if mask.elements.shape != arr.shape:
        raise ParameterError("mask length does not match key length")
    blinded = SymKey((arr + mask.elements) % params.field_modulus)
    return ProtectedKey(MASKED, key_cts=encrypt_key_layouts(he_pk, params, blinded, rng))


def unmask(prot: ProtectedKey, mask: Mask) -> list[RingCiphertext]:
    """Subtract the mask in ciphertext space: Enc(key + M) - M = Enc(key)."""
    if prot.mode != MASKED:
        raise ParameterError("unmask expects a masked key")
    if len(mask.elements) != len(prot.key_cts):
        raise ParameterError("mask length does not match ciphertext count")
    return [
        ring_he.sub_scalar(ct, int(m))
        for ct, m in zip(prot.key_cts, mask.elements)
    ]


def key_values_from_cts(
    he_sk: SecretKey, cts: list[RingCiphertext], key_len: int
) -> np.ndarray:
    """Decrypt broadcast key ciphertexts back to the key vector."""
    if len(cts) != key_len:
        raise ParameterError("unexpected ciphertext count")
    return np.array(
        [int(ring_he.decrypt(he_sk, ct)[0]) for ct in cts], dtype=np.int64
    )


# ---------------------------------------------------------------------------
# RSA encapsulation.
# ---------------------------------------------------------------------------


def max_plaintext_size(modulus_bits: int) -> int:
    """Largest OAEP(SHA-256) plaintext for a given RSA modulus size, bytes."""
    if modulus_bits % 8:
        raise ParameterError("modulus bits must be a multiple of 8")
    size = modulus_bits // 8 - OAEP_OVERHEAD
    if size <= 0:
        raise ParameterError(f"RSA-{modulus_bits} cannot carry OAEP payloads")
    return size


def generate_rsa_keypair(bits: int = 3072) -> rsa.RSAPrivateKey:
    if bits not in (1024, 2048, 3072, 4096):
        raise ParameterError("supported RSA sizes: 1024/2048/3072/4096")
    return rsa.generate_private_key(public_exponent=65537, key_size=bits)


def issue_certificate(
    tpa_signing_key: rsa.RSAPrivateKey, server_public: rsa.RSAPublicKey
) -> ServerCertificate:
    der = server_public.public_bytes(
        pem.Encoding.DER, pem.PublicFormat.SubjectPublicKeyInfo
    )
    sig = tpa_signing_key.sign(der, _PSS, hashes.SHA256())
    return ServerCertificate(der, sig)


def verify_certificate(
    tpa_verifying_key: rsa.RSAPublicKey, cert: ServerCertificate
) -> bool:
    try:
        tpa_verifying_key.verify(cert.signature, cert.public_key_der, _PSS, hashes.SHA256())
        return True
    except InvalidSignature:
        return False


def certificate_public_key(cert: ServerCertificate) -> rsa.RSAPublicKey:
    key = pem.load_der_public_key(cert.public_key_der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise CertificateError("certificate does not hold an RSA key")
    return key


def rsa_wrap(
    data: bytes,
    cert: ServerCertificate,
    tpa_verifying_key: rsa.RSAPublicKey,
) -> ProtectedKey:
    """Chunk serialized key ciphertexts and OAEP-encrypt each chunk.

    Refuses to encrypt under an unverified certificate.
    """
    if not data:
        raise ParameterError("refusing to wrap empty input")
    if not verify_certificate(tpa_verifying_key, cert):
        raise CertificateError("server certificate failed verification")
    pub = certificate_public_key(cert)
    step = max_plaintext_size(pub.key_size)
    chunks = [
        pub.encrypt(bytes(data[i : i + step]), _OAEP)
        for i in range(0, len(data), step)
    ]
    return ProtectedKey(RSA_WRAPPED, chunks=chunks)


def rsa_unwrap(prot: ProtectedKey, rsa_private: rsa.RSAPrivateKey) -> bytes:
    """Decrypt every chunk and reconstruct the serialized ciphertexts.

    Any tampered chunk makes OAEP fail, which aborts the whole unwrap.
    """
    if prot.mode != RSA_WRAPPED:
        raise ParameterError("rsa_unwrap expects an rsa-wrapped key")
    out = []
    for i, chunk in enumerate(prot.chunks):
        try:
            out.append(rsa_private.decrypt(chunk, _OAEP))
        except ValueError as exc:
            raise KeyRecoveryError(f"OAEP integrity failure on chunk {i}") from exc
    return b"".join(out)


def expected_chunks(data_len: int, modulus_bits: int) -> int:
    return -(-data_len // max_plaintext_size(modulus_bits))


# ---------------------------------------------------------------------------
# Wire encodings.
# ---------------------------------------------------------------------------


def key_ciphertexts_bytes(cts: list[RingCiphertext]) -> bytes:
    out = [len(cts).to_bytes(4, "little")]
    for ct in cts:
        blob = ring_he.serialize(ct)
        out.append(len(blob).to_bytes(4, "little"))
        out.append(blob)
    return b"".join(out)


def key_ciphertexts_from_bytes(params: HeParams, data: bytes) -> list[RingCiphertext]:
    if len(data) < 4:
        raise SerializationError("truncated ciphertext bundle")
    count = int.from_bytes(data[:4], "little")
    pos, cts = 4, []
    for _ in range(count):
        if pos + 4 > len(data):
            raise SerializationError("truncated ciphertext bundle")
        ln = int.from_bytes(data[pos : pos + 4], "little")
        pos += 4
        if pos + ln > len(data):
            raise SerializationError("truncated ciphertext bundle")
        cts.append(ring_he.deserialize(params, data[pos : pos + ln]))
        pos += ln
    if pos != len(data):
        raise SerializationError("trailing bytes after ciphertext bundle")
    return cts


def serialize_protected_key(prot: ProtectedKey) -> bytes:
    tag = bytes([_TAGS[prot.mode]])
    if prot.mode == RSA_WRAPPED:
        body = [len(prot.chunks).to_bytes(4, "little")]
        for chunk in prot.chunks:
            body.append(len(chunk).to_bytes(4, "little"))
            body.append(chunk)
        return tag + b"".join(body)
    return tag + key_ciphertexts_bytes(prot.key_cts)


def deserialize_protected_key(params: HeParams, data: bytes) -> ProtectedKey:
    if not data:
        raise SerializationError("empty protected key")
    mode = _TAG_NAMES.get(data[0])
    if mode is None:
        raise SerializationError(f"unknown protected-key tag {data[0]}")
    body = data[1:]
    if mode in (BASELINE, MASKED):
        return ProtectedKey(mode, key_cts=key_ciphertexts_from_bytes(params, body))
    if len(body) < 4:
        raise SerializationError("truncated chunk list")
    count = int.from_bytes(body[:4], "little")
    pos, chunks = 4, []
    for _ in range(count):
        if pos + 4 > len(body):
            raise SerializationError("truncated chunk list")
        ln = int.from_bytes(body[pos : pos + 4], "little")
        pos += 4
        if pos + ln > len(body):
            raise SerializationError("truncated chunk list")
        chunks.append(body[pos : pos + ln])
        pos += ln
    if pos != len(body):
        raise SerializationError("trailing bytes after chunk list")
    return ProtectedKey(RSA_WRAPPED, chunks=chunks)

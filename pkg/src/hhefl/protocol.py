"""Three-entity protocol: authority (TPA), server, clients.

The workflow runs five phases per experiment: setup (key and mask
distribution, certificate signing, initial model broadcast), then per
round client training, server aggregation, client evaluation and server
evaluation. Entities exchange typed messages over a pluggable transport;
the default in-memory transport is deterministic and FIFO, while the
loopback transport pushes every message through the binary wire encoding
to prove the protocol survives real serialization.

Setup-phase traffic models the trusted out-of-band channel: it is logged
for accounting but excluded from the adversary's tap (see the adversary
module). Every other message is fair game for interception.

The server state never contains the HE secret key, any client's
symmetric key, or plaintext weights; `assert_server_blind` checks this
after every phase.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import fl_model, key_protection as kp, ring_he, stream_cipher as sc
from .errors import (
    ConfigError,
    KeyRecoveryError,
    ParameterError,
    ProtocolError,
    SerializationError,
)
from .reports import RoundReport
from .rng import Drbg

MODES = ("baseline", "masking", "rsa")

SETUP = "setup"
TRAINING = "training"
AGGREGATION = "aggregation"
EVALUATION = "evaluation"


# ---------------------------------------------------------------------------
# Configuration.
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    mode: str = "masking"
    clients: int = 12
    rounds: int = 10
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    clients_per_training: int = 4
    clients_per_evaluation: int = 12
    clip_range: float = 5.0
    rsa_bits: int = 3072
    seed: int = 1
    dataset: str = "digits"
    synthetic_samples: int = 480
    synthetic_features: int = 16
    target_params: int = 8000
    quant_scale: int | None = None
    transport: str = "memory"
    he_poly_degree: int = 1024
    he_plaintext_modulus: int = 65537
    he_coeff_prime_bits: int = 30
    he_coeff_prime_count: int = 8
    he_depth_budget: int = 3
    cipher_rounds: int = 3
    cipher_key_len: int = 16
    cipher_block_len: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in (
            "clients",
            "rounds",
            "epochs",
            "batch_size",
            "clients_per_training",
            "clients_per_evaluation",
        ):
            if getattr(self, name) < (0 if name in ("rounds", "epochs") else 1):
                raise ConfigError(f"{name} must be positive")
        if self.clients_per_training > self.clients:
            raise ConfigError("training cohort larger than client population")
        if self.clients_per_evaluation > self.clients:
            raise ConfigError("evaluation cohort larger than client population")
        if self.transport not in ("memory", "loopback"):
            raise ConfigError("transport must be 'memory' or 'loopback'")
        if self.rsa_bits not in (1024, 2048, 3072, 4096):
            raise ConfigError("rsa_bits must be 1024/2048/3072/4096")
        if self.clip_range <= 0:
            raise ConfigError("clip_range must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dc_fields(cls)}
        flat: dict = {}
        for key, value in raw.items():
            if key == "he":
                for sub, v in value.items():
                    flat[f"he_{sub}"] = v
            elif key == "cipher":
                for sub, v in value.items():
                    flat[f"cipher_{sub}"] = v
            else:
                flat[key] = value
        unknown = set(flat) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(flat.get("mode"), str):
            flat["mode"] = normalize_mode(flat["mode"])
        return cls(**flat)

    def he_params(self) -> ring_he.HeParams:
        return ring_he.HeParams.create(
            poly_degree=self.he_poly_degree,
            plaintext_modulus=self.he_plaintext_modulus,
            coeff_prime_bits=self.he_coeff_prime_bits,
            coeff_prime_count=self.he_coeff_prime_count,
            depth_budget=self.he_depth_budget,
        )

    def cipher_params(self) -> sc.CipherParams:
        return sc.CipherParams(
            field_modulus=self.he_plaintext_modulus,
            key_len=self.cipher_key_len,
            block_len=self.cipher_block_len,
            rounds=self.cipher_rounds,
        )


def normalize_mode(mode: str) -> str:
    aliases = {
        "baseline": "baseline",
        "masking": "masking",
        "masked": "masking",
        "rsa": "rsa",
        "rsa_wrapping": "rsa",
        "rsawrapping": "rsa",
        "rsa-wrapping": "rsa",
    }
    key = mode.strip().lower()
    if key not in aliases:
        raise ConfigError(f"unknown mode {mode!r}")
    return aliases[key]


def load_dataset(config: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.dataset == "digits":
        return fl_model.load_digits_dataset()
    if config.dataset == "synthetic":
        return fl_model.synthetic_dataset(
            config.synthetic_samples, config.synthetic_features, config.seed
        )
    return fl_model.load_csv_dataset(config.dataset)


# ---------------------------------------------------------------------------
# Messages and wire encoding.
# ---------------------------------------------------------------------------


@dataclass
class Message:
    sender: str
    recipient: str
    round: int


@dataclass
class KeyIssue(Message):
    he_pk: bytes
    he_sk: bytes | None = None
    he_evk: bytes | None = None
    sym_key: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class CertificateMsg(Message):
    cert: kp.ServerCertificate
    tpa_verifying_der: bytes


@dataclass
class InitModel(Message):
    weights: np.ndarray


@dataclass
class TrainRequest(Message):
    pass


@dataclass
class ClientUpdateMsg(Message):
    w_ske: bytes  # serialized SymCiphertext
    protected_key: bytes  # serialized ProtectedKey
    n_i: int


@dataclass
class GlobalModelMsg(Message):
    cts: list[bytes]
    n: int


@dataclass
class EvalReport(Message):
    accuracy: float
    loss: float
    test_sample_count: int


_MSG_TAGS = {
    KeyIssue: 1,
    CertificateMsg: 2,
    InitModel: 3,
    TrainRequest: 4,
    ClientUpdateMsg: 5,
    GlobalModelMsg: 6,
    EvalReport: 7,
}
_TAG_TYPES = {v: k for k, v in _MSG_TAGS.items()}


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _pack_blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _pack_opt(b: bytes | None) -> bytes:
    if b is None:
        return b"\x00"
    return b"\x01" + _pack_blob(b)


def _pack_vec32(v: np.ndarray | None) -> bytes:
    if v is None:
        return b"\x00"
    return b"\x01" + _pack_blob(np.asarray(v).astype("<u4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SerializationError("message truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        (ln,) = struct.unpack("<H", self.take(2))
        return self.take(ln).decode()

    def blob(self) -> bytes:
        return self.take(self.u32())

    def opt_blob(self) -> bytes | None:
        return self.blob() if self.u8() else None

    def opt_vec32(self) -> np.ndarray | None:
        raw = self.opt_blob()
        if raw is None:
            return None
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise SerializationError("trailing bytes in message")


def encode_message(msg: Message) -> bytes:
    tag = _MSG_TAGS.get(type(msg))
    if tag is None:
        raise SerializationError(f"unknown message type {type(msg).__name__}")
    head = bytes([tag]) + struct.pack("<I", msg.round)
    head += _pack_str(msg.sender) + _pack_str(msg.recipient)
    if isinstance(msg, KeyIssue):
        body = (
            _pack_blob(msg.he_pk)
            + _pack_opt(msg.he_sk)
            + _pack_opt(msg.he_evk)
            + _pack_vec32(msg.sym_key)
            + _pack_vec32(msg.mask)
        )
    elif isinstance(msg, CertificateMsg):
        body = (
            _pack_blob(msg.cert.public_key_der)
            + _pack_blob(msg.cert.signature)
            + _pack_blob(msg.tpa_verifying_der)
        )
    elif isinstance(msg, InitModel):
        body = _pack_blob(np.asarray(msg.weights, dtype="<f8").tobytes())
    elif isinstance(msg, TrainRequest):
        body = b""
    elif isinstance(msg, ClientUpdateMsg):
        body = _pack_blob(msg.w_ske) + _pack_blob(msg.protected_key) + struct.pack("<I", msg.n_i)
    elif isinstance(msg, GlobalModelMsg):
        body = struct.pack("<Q", msg.n) + struct.pack("<I", len(msg.cts))
        body += b"".join(_pack_blob(c) for c in msg.cts)
    elif isinstance(msg, EvalReport):
        body = struct.pack("<dd", msg.accuracy, msg.loss) + struct.pack(
            "<I", msg.test_sample_count
        )
    else:  # pragma: no cover - the tag table is exhaustive
        raise SerializationError("unhandled message type")
    payload = head + body
    return struct.pack("<I", len(payload)) + payload


def decode_message(data: bytes) -> Message:
    outer = _Reader(data)
    payload = outer.blob()
    outer.done()
    r = _Reader(payload)
    tag = r.u8()
    cls = _TAG_TYPES.get(tag)
    if cls is None:
        raise SerializationError(f"unknown message tag {tag}")
    rnd = r.u32()
    sender = r.string()
    recipient = r.string()
    if cls is KeyIssue:
        msg = KeyIssue(
            sender, recipient, rnd,
            he_pk=r.blob(),
            he_sk=r.opt_blob(),
            he_evk=r.opt_blob(),
            sym_key=r.opt_vec32(),
            mask=r.opt_vec32(),
        )
    elif cls is CertificateMsg:
        msg = CertificateMsg(
            sender, recipient, rnd,
            cert=kp.ServerCertificate(r.blob(), r.blob()),
            tpa_verifying_der=r.blob(),
        )
    elif cls is InitModel:
        msg = InitModel(
            sender, recipient, rnd, weights=np.frombuffer(r.blob(), dtype="<f8")
        )
    elif cls is TrainRequest:
        msg = TrainRequest(sender, recipient, rnd)
    elif cls is ClientUpdateMsg:
        msg = ClientUpdateMsg(
            sender, recipient, rnd, w_ske=r.blob(), protected_key=r.blob(), n_i=r.u32()
        )
    elif cls is GlobalModelMsg:
        n = r.u64()
        cts = [r.blob() for _ in range(r.u32())]
        msg = GlobalModelMsg(sender, recipient, rnd, cts=cts, n=n)
    else:
        msg = EvalReport(
            sender, recipient, rnd,
            accuracy=r.f64(), loss=r.f64(), test_sample_count=r.u32(),
        )
    r.done()
    return msg


# ---------------------------------------------------------------------------
# Transport and transcript.
# ---------------------------------------------------------------------------


@dataclass
class TranscriptEntry:
    seq: int
    phase: str
    msg_type: str
    sender: str
    recipient: str
    round: int
    n_bytes: int
    payload: bytes | None  # kept only for interceptable client updates


class TranscriptLog:
    """Append-only record of every message, safe for concurrent appends."""

    def __init__(self):
        self._entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def next_seq(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def entries(self) -> list[TranscriptEntry]:
        with self._lock:
            return list(self._entries)

    def bytes_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.msg_type] = out.get(e.msg_type, 0) + e.n_bytes
        return out


class MemoryTransport:
    """Deterministic FIFO delivery of message objects; sizes from encoding."""

    loopback = False

    def __init__(self, transcript: TranscriptLog):
        self.transcript = transcript
        self._queues: dict[str, list] = {}

    def send(self, msg: Message, phase: str) -> None:
        wire = encode_message(msg)
        keep = wire if isinstance(msg, ClientUpdateMsg) else None
        self.transcript.append(
            TranscriptEntry(
                self.transcript.next_seq(),
                phase,
                type(msg).__name__,
                msg.sender,
                msg.recipient,
                msg.round,
                len(wire),
                keep,
            )
        )
        self._deliver(msg)

    def _deliver(self, msg: Message) -> None:
        self._queues.setdefault(msg.recipient, []).append(msg)

    def receive(self, recipient: str) -> Message:
        queue = self._queues.get(recipient)
        if not queue:
            raise ProtocolError(f"no message waiting for {recipient}")
        return queue.pop(0)


class LoopbackTransport(MemoryTransport):
    """Round-trips every message through the wire encoding before delivery."""

    loopback = True

    def _deliver(self, msg: Message) -> None:
        wire = encode_message(msg)
        super()._deliver(decode_message(wire))


# ---------------------------------------------------------------------------
# Entities.
# ---------------------------------------------------------------------------


class Tpa:
    """Trusted authority: generates and distributes all key material."""

    def __init__(self, config: ExperimentConfig, drbg: Drbg):
        self.config = config
        self._drbg = drbg
        self.he_params = config.he_params()
        self.cipher_params = config.cipher_params()
        self.keys = ring_he.keygen(self.he_params, drbg.child("he-keygen").take(32))
        self.sym_keys = {
            cid: sc.generate_sym_key(self.cipher_params, drbg.child(f"sym-{cid}"))
            for cid in range(config.clients)
        }
        self.masks: dict[int, kp.Mask] = {}
        if config.mode == "masking":
            self.masks = {
                cid: kp.generate_mask(self.cipher_params, f"client:{cid}", drbg.child(f"mask-{cid}"))
                for cid in range(config.clients)
            }
        self.signing_key = None
        if config.mode == "rsa":
            self.signing_key = kp.generate_rsa_keypair(3072)

    def sign_server_key(self, server_public) -> kp.ServerCertificate:
        if self.signing_key is None:
            raise ProtocolError("authority has no signing key outside rsa mode")
        return kp.issue_certificate(self.signing_key, server_public)

    @property
    def verifying_der(self) -> bytes:
        from cryptography.hazmat.primitives import serialization as pem

        return self.signing_key.public_key().public_bytes(
            pem.Encoding.DER, pem.PublicFormat.SubjectPublicKeyInfo
        )


class Client:
    """Holds the HE keypair, its own symmetric key, mask/cert, and data."""

    def __init__(
        self,
        cid: int,
        config: ExperimentConfig,
        he_params: ring_he.HeParams,
        cipher_params: sc.CipherParams,
        spec: fl_model.MlpSpec,
        data: tuple[np.ndarray, np.ndarray],
        drbg: Drbg,
    ):
        self.cid = cid
        self.name = f"client:{cid}"
        self.config = config
        self.he_params = he_params
        self.cipher_params = cipher_params
        self.spec = spec
        self.x_train, self.y_train, self.x_test, self.y_test = self._split(data)
        self._drbg = drbg
        self.he_pk: ring_he.PublicKey | None = None
        self.he_sk: ring_he.SecretKey | None = None
        self.sym_key: sc.SymKey | None = None
        self.mask: kp.Mask | None = None
        self.certificate: kp.ServerCertificate | None = None
        self.certificate_verified = False
        self._tpa_verifying = None
        self.weights: np.ndarray | None = None
        self.qp: fl_model.QuantParams | None = None
        self.current_round = 0

    def _split(self, data):
        x, y = data
        train_idx, test_idx = fl_model.local_split(np.arange(len(x)))
        return x[train_idx], y[train_idx], x[test_idx], y[test_idx]

    def receive_keys(self, msg: KeyIssue) -> None:
        self.he_pk = ring_he.public_key_from_bytes(self.he_params, msg.he_pk)
        if msg.he_sk is None:
            raise ProtocolError("client key issue must include the HE secret key")
        self.he_sk = ring_he.secret_key_from_bytes(self.he_params, msg.he_sk)
        self.sym_key = sc.SymKey(msg.sym_key)
        if msg.mask is not None:
            self.mask = kp.Mask(msg.mask, self.name)

    def receive_certificate(self, msg: CertificateMsg) -> None:
        from cryptography.hazmat.primitives.serialization import load_der_public_key

        self._tpa_verifying = load_der_public_key(msg.tpa_verifying_der)
        self.certificate = msg.cert
        self.certificate_verified = kp.verify_certificate(self._tpa_verifying, msg.cert)
        if not self.certificate_verified:
            raise ProtocolError("server certificate failed verification")

    def receive_init(self, msg: InitModel) -> None:
        self.weights = np.asarray(msg.weights, dtype=np.float64).copy()

    def train_update(self, rnd: int, qp: fl_model.QuantParams, timings: dict) -> ClientUpdateMsg:
        if self.weights is None:
            raise ProtocolError("client has no model weights yet")
        round_rng = self._drbg.child(f"round-{rnd}")
        t0 = time.perf_counter()
        new_weights, n_i = fl_model.train_local(
            self.spec,
            self.weights,
            self.x_train,
            self.y_train,
            epochs=self.config.epochs,
            lr=self.config.learning_rate,
            batch_size=self.config.batch_size,
            rng=round_rng.child("shuffle"),
            momentum=self.config.momentum,
        )
        t1 = time.perf_counter()
        quantized = fl_model.quantize(new_weights, qp)
        nonce = round_rng.child("nonce").take(16)
        sym_ct = sc.sym_encrypt(self.cipher_params, self.sym_key, nonce, quantized)
        t2 = time.perf_counter()
        prot = self._protect_key(round_rng.child("protect"))
        t3 = time.perf_counter()
        timings["train_s"] += t1 - t0
        timings["sym_encrypt_s"] += t2 - t1
        timings["key_protect_s"] += t3 - t2
        self.weights = new_weights
        self.current_round = rnd
        return ClientUpdateMsg(
            self.name,
            "server",
            rnd,
            w_ske=sc.serialize_sym_ciphertext(self.cipher_params, sym_ct),
            protected_key=kp.serialize_protected_key(prot),
            n_i=n_i,
        )

    def _protect_key(self, rng: Drbg) -> kp.ProtectedKey:
        mode = self.config.mode
        if mode == "baseline":
            return kp.protect_baseline(self.cipher_params, self.sym_key, self.he_pk, rng)
        if mode == "masking":
            if self.mask is None:
                raise ProtocolError("masking mode requires an issued mask")
            return kp.protect_masked(
                self.cipher_params, self.sym_key, self.mask, self.he_pk, rng
            )
        if not self.certificate_verified:
            raise ProtocolError("cannot wrap key before verifying the certificate")
        layouts = sc.encrypt_key_layouts(self.he_pk, self.cipher_params, self.sym_key, rng)
        return kp.rsa_wrap(
            kp.key_ciphertexts_bytes(layouts), self.certificate, self._tpa_verifying
        )

    def receive_global(self, msg: GlobalModelMsg, timings: dict) -> tuple[EvalReport, np.ndarray]:
        if msg.round < self.current_round:
            raise ProtocolError(
                f"{self.name} got stale round {msg.round} < {self.current_round}"
            )
        if self.qp is None:
            raise ProtocolError("client has no quantization parameters")
        t0 = time.perf_counter()
        cts = [ring_he.deserialize(self.he_params, blob) for blob in msg.cts]
        summed = sc.transciphered_to_vector(
            self.he_sk, cts, self.cipher_params, self.spec.param_count
        )
        t1 = time.perf_counter()
        self.weights = fl_model.dequantize(summed, self.qp, msg.n)
        metrics = fl_model.evaluate(self.spec, self.weights, self.x_test, self.y_test)
        t2 = time.perf_counter()
        timings["decrypt_s"] += t1 - t0
        timings["evaluate_s"] += t2 - t1
        self.current_round = msg.round
        report = EvalReport(
            self.name, "server", msg.round,
            accuracy=metrics.accuracy,
            loss=metrics.loss,
            test_sample_count=metrics.test_sample_count,
        )
        return report, summed


class Server:
    """Coordinates rounds; converts, aggregates, and redistributes updates."""

    def __init__(
        self,
        config: ExperimentConfig,
        he_params: ring_he.HeParams,
        cipher_params: sc.CipherParams,
        qp: fl_model.QuantParams,
    ):
        self.config = config
        self.mode = config.mode
        self.he_params = he_params
        self.cipher_params = cipher_params
        self.qp = qp
        # held for workflow fidelity; the server never encrypts with it
        self.he_pk: ring_he.PublicKey | None = None
        self.he_evk: ring_he.EvalKey | None = None
        self.mask_table: dict[str, kp.Mask] = {}
        self.rsa_private = None
        self.certificate: kp.ServerCertificate | None = None
        self.round = 0
        self.phase = SETUP
        self.training_cohort: list[int] = []
        self.evaluation_cohort: list[int] = []

    def receive_keys(self, msg: KeyIssue) -> None:
        if msg.he_sk is not None:
            raise ProtocolError("server must never receive the HE secret key")
        self.he_pk = ring_he.public_key_from_bytes(self.he_params, msg.he_pk)
        self.he_evk = ring_he.eval_key_from_bytes(self.he_params, msg.he_evk)

    def begin_round(self, rnd: int, training: list[int], evaluation: list[int]) -> None:
        if rnd != self.round + 1:
            raise ProtocolError(f"round {rnd} does not follow {self.round}")
        self.round = rnd
        self.phase = TRAINING
        self.training_cohort = list(training)
        self.evaluation_cohort = list(evaluation)

    def _recover_key_cts(self, prot: kp.ProtectedKey, sender: str) -> list:
        if self.mode == "baseline":
            if prot.mode != kp.BASELINE:
                raise KeyRecoveryError(f"{sender} sent {prot.mode} key in baseline mode")
            return prot.key_cts
        if self.mode == "masking":
            if prot.mode != kp.MASKED:
                raise KeyRecoveryError(f"{sender} sent {prot.mode} key in masking mode")
            mask = self.mask_table.get(sender)
            if mask is None:
                raise KeyRecoveryError(f"no mask registered for {sender}")
            return kp.unmask(prot, mask)
        if prot.mode != kp.RSA_WRAPPED:
            raise KeyRecoveryError(f"{sender} sent {prot.mode} key in rsa mode")
        blob = kp.rsa_unwrap(prot, self.rsa_private)
        return kp.key_ciphertexts_from_bytes(self.he_params, blob)

    def aggregate(
        self, updates: list[ClientUpdateMsg], timings: dict
    ) -> tuple[GlobalModelMsg | None, list[str]]:
        if self.phase != TRAINING:
            raise ProtocolError(f"aggregate called in phase {self.phase}")
        self.phase = AGGREGATION
        failures: list[str] = []
        converted: list[tuple[list, int]] = []
        for upd in updates:
            if upd.round != self.round:
                raise ProtocolError(
                    f"update from {upd.sender} is for round {upd.round}, not {self.round}"
                )
            try:
                t0 = time.perf_counter()
                prot = kp.deserialize_protected_key(self.he_params, upd.protected_key)
                key_cts = self._recover_key_cts(prot, upd.sender)
                t1 = time.perf_counter()
                sym_ct = sc.deserialize_sym_ciphertext(self.cipher_params, upd.w_ske)
                he_cts = sc.hesd(key_cts, self.cipher_params, self.he_evk, sym_ct)
                t2 = time.perf_counter()
                timings["key_recover_s"] += t1 - t0
                timings["hesd_s"] += t2 - t1
                converted.append((he_cts, upd.n_i))
            except (KeyRecoveryError, SerializationError, ParameterError) as exc:
                failures.append(f"{upd.sender}: {exc}")
        if not converted:
            return None, failures
        t0 = time.perf_counter()
        agg_cts, total_n = fl_model.fedavg_encrypted(converted, self.qp)
        timings["aggregate_s"] += time.perf_counter() - t0
        msg = GlobalModelMsg(
            "server", "*", self.round,
            cts=[ring_he.serialize(ct) for ct in agg_cts],
            n=total_n,
        )
        self.phase = EVALUATION
        return msg, failures

    def receive_eval_reports(self, reports: list[EvalReport]) -> fl_model.EvalMetrics:
        if self.phase != EVALUATION:
            raise ProtocolError(f"evaluation reports arrived in phase {self.phase}")
        for rep in reports:
            if rep.round != self.round:
                raise ProtocolError(
                    f"evaluation from {rep.sender} is for round {rep.round}, not {self.round}"
                )
        metrics = fl_model.aggregate_metrics(
            [
                fl_model.EvalMetrics(r.accuracy, r.loss, r.test_sample_count)
                for r in reports
            ]
        )
        self.phase = TRAINING if self.round < self.config.rounds else SETUP
        return metrics


def assert_server_blind(server: Server, spec: fl_model.MlpSpec) -> None:
    """Fail if server state holds secrets it must never see."""

    seen = set()

    def walk(obj, path):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        if isinstance(obj, ring_he.SecretKey):
            raise AssertionError(f"server holds HE secret key at {path}")
        if isinstance(obj, sc.SymKey):
            raise AssertionError(f"server holds a symmetric key at {path}")
        if isinstance(obj, np.ndarray) and obj.dtype.kind == "f" and obj.size == spec.param_count:
            raise AssertionError(f"server holds a plaintext weight vector at {path}")
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(v, f"{path}[{k!r}]")
        elif isinstance(obj, (list, tuple)):
            for i, v in enumerate(obj):
                walk(v, f"{path}[{i}]")
        elif hasattr(obj, "__dict__") and not isinstance(obj, (ring_he.HeParams,)):
            for k, v in vars(obj).items():
                walk(v, f"{path}.{k}")

    walk(server, "server")


# ---------------------------------------------------------------------------
# Experiment runner.
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    round_reports: list[RoundReport]
    transcript: TranscriptLog
    final_metrics: fl_model.EvalMetrics | None
    # side-channel for tests and the attack harness, never sent on the wire
    ground_truth: dict = field(default_factory=dict)


def derive_he_keys(config: ExperimentConfig) -> ring_he.RingKeys:
    """The HE keypair a run under this config distributes to every client.

    Clients (including a curious one) legitimately hold these keys, so the
    attack harness rebuilds them from the experiment seed.
    """
    master = Drbg.from_seed(config.seed, "experiment")
    return ring_he.keygen(config.he_params(), master.child("tpa").child("he-keygen").take(32))


def build_entities(config: ExperimentConfig):
    """Setup phase: create entities and distribute key material."""
    master = Drbg.from_seed(config.seed, "experiment")
    he_params = config.he_params()
    cipher_params = config.cipher_params()
    x, y = load_dataset(config)
    n_classes = int(y.max()) + 1
    spec = fl_model.MlpSpec.sized_for(x.shape[1], n_classes, config.target_params)
    if -(-spec.param_count // cipher_params.block_len) > he_params.poly_degree * 4:
        raise ConfigError("model too large for a reasonable number of batches")
    parts = fl_model.partition_iid(len(x), config.clients)

    tpa = Tpa(config, master.child("tpa"))
    transcript = TranscriptLog()
    transport_cls = LoopbackTransport if config.transport == "loopback" else MemoryTransport
    transport = transport_cls(transcript)

    clients = [
        Client(
            cid,
            config,
            he_params,
            cipher_params,
            spec,
            (x[parts[cid]], y[parts[cid]]),
            master.child(f"client-{cid}"),
        )
        for cid in range(config.clients)
    ]

    # admission bound: worst-case cohort of the largest local batch counts
    worst = max(
        fl_model.batch_count(len(c.x_train), config.batch_size) for c in clients
    )
    n_max = config.clients_per_training * worst
    if config.quant_scale is None:
        qp = fl_model.QuantParams.with_max_scale(
            config.clip_range, n_max=n_max, modulus=he_params.plaintext_modulus
        )
    else:
        qp = fl_model.QuantParams(
            config.clip_range, config.quant_scale, he_params.plaintext_modulus, n_max
        )

    server = Server(config, he_params, cipher_params, qp)
    for client in clients:
        client.qp = qp  # public quantization contract, shared by all parties

    pk_bytes = ring_he.public_key_bytes(tpa.keys.public_key)
    sk_bytes = ring_he.secret_key_bytes(tpa.keys.secret_key)
    evk_bytes = ring_he.eval_key_bytes(tpa.keys.eval_key)

    msg = KeyIssue("tpa", "server", 0, he_pk=pk_bytes, he_evk=evk_bytes)
    transport.send(msg, SETUP)
    server.receive_keys(transport.receive("server"))

    for client in clients:
        msg = KeyIssue(
            "tpa", client.name, 0,
            he_pk=pk_bytes,
            he_sk=sk_bytes,
            sym_key=tpa.sym_keys[client.cid].elements,
            mask=tpa.masks[client.cid].elements if client.cid in tpa.masks else None,
        )
        transport.send(msg, SETUP)
        client.receive_keys(transport.receive(client.name))

    if config.mode == "masking":
        server.mask_table = {
            f"client:{cid}": mask for cid, mask in tpa.masks.items()
        }
    if config.mode == "rsa":
        server.rsa_private = kp.generate_rsa_keypair(config.rsa_bits)
        server.certificate = tpa.sign_server_key(server.rsa_private.public_key())
        for client in clients:
            msg = CertificateMsg(
                "server", client.name, 0,
                cert=server.certificate,
                tpa_verifying_der=tpa.verifying_der,
            )
            transport.send(msg, SETUP)
            client.receive_certificate(transport.receive(client.name))

    init = fl_model.init_weights(spec, master.child("init-model"))
    for client in clients:
        transport.send(InitModel("server", client.name, 0, weights=init), SETUP)
        client.receive_init(transport.receive(client.name))

    return tpa, server, clients, transport, spec, qp, master


def run_experiment(config: ExperimentConfig, record_ground_truth: bool = False) -> ExperimentResult:
    """Execute the five-phase workflow for the configured number of rounds."""
    tpa, server, clients, transport, spec, qp, master = build_entities(config)
    assert_server_blind(server, spec)
    reports: list[RoundReport] = []
    truth: dict = {"updates": {}, "globals": {}, "adopted": {}}
    final_metrics = None

    for rnd in range(1, config.rounds + 1):
        bytes_before = transport.transcript.bytes_by_type()
        timings = {
            "train_s": 0.0,
            "sym_encrypt_s": 0.0,
            "key_protect_s": 0.0,
            "key_recover_s": 0.0,
            "hesd_s": 0.0,
            "aggregate_s": 0.0,
            "decrypt_s": 0.0,
            "evaluate_s": 0.0,
        }
        cohort = master.child(f"cohort-{rnd}").sample(
            config.clients, config.clients_per_training
        )
        eval_cohort = master.child(f"eval-cohort-{rnd}").sample(
            config.clients, config.clients_per_evaluation
        )
        server.begin_round(rnd, list(cohort), list(eval_cohort))

        updates: list[ClientUpdateMsg] = []
        for cid in cohort:
            transport.send(TrainRequest("server", clients[cid].name, rnd), TRAINING)
            transport.receive(clients[cid].name)
            upd = clients[cid].train_update(rnd, qp, timings)
            transport.send(upd, TRAINING)
            updates.append(transport.receive("server"))
            if record_ground_truth:
                q = fl_model.quantize(clients[cid].weights, qp)
                truth["updates"][(rnd, clients[cid].name)] = (
                    q,
                    upd.n_i,
                    clients[cid].sym_key.elements.copy(),
                )

        global_msg, failures = server.aggregate(updates, timings)
        assert_server_blind(server, spec)
        if global_msg is None:
            raise ProtocolError(f"round {rnd}: every client update failed: {failures}")

        eval_reports: list[EvalReport] = []
        for cid in eval_cohort:
            out = GlobalModelMsg(
                "server", clients[cid].name, rnd, cts=global_msg.cts, n=global_msg.n
            )
            transport.send(out, EVALUATION)
            report, summed = clients[cid].receive_global(
                transport.receive(clients[cid].name), timings
            )
            transport.send(report, EVALUATION)
            eval_reports.append(transport.receive("server"))
            if record_ground_truth and cid == eval_cohort[0]:
                truth["globals"][rnd] = summed
                truth["adopted"][rnd] = clients[cid].weights.copy()

        metrics = server.receive_eval_reports(eval_reports)
        final_metrics = metrics
        bytes_after = transport.transcript.bytes_by_type()
        round_bytes = {
            k: v - bytes_before.get(k, 0)
            for k, v in bytes_after.items()
            if v - bytes_before.get(k, 0)
        }
        reports.append(
            RoundReport(
                round=rnd,
                mode=config.mode,
                accuracy=metrics.accuracy,
                loss=metrics.loss,
                timings=dict(timings),
                bytes_by_type=round_bytes,
                failures=list(failures),
            )
        )
    return ExperimentResult(
        config=config,
        round_reports=reports,
        transcript=transport.transcript,
        final_metrics=final_metrics,
        ground_truth=truth if record_ground_truth else {},
    )

"""Command-line entry point: experiments, benchmarks, attack demos, keygen.

Exit codes: 0 success, 2 configuration error, 3 protocol failure,
4 attack-demo assertion failure.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, key_protection as kp, reports, ring_he, stream_cipher as sc
from .adversary import attack, intercept, knowledge_from_run
from .errors import ConfigError, HheflError, ParameterError
from .protocol import (
    ExperimentConfig,
    TranscriptLog,
    derive_he_keys,
    normalize_mode,
    run_experiment,
)
from .rng import Drbg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_ATTACK = 4

_ATTACK_DEMO_OVERRIDES = {
    "dataset": "synthetic",
    "clients": 4,
    "rounds": 2,
    "epochs": 2,
    "clients_per_training": 2,
    "clients_per_evaluation": 4,
    "batch_size": 32,
    "target_params": 600,
}


def _fail_config(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc


def _resolve_seed(cli_seed: int | None, raw: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("HHEFL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"HHEFL_SEED must be an integer, got {env!r}") from exc
    return int(raw.get("seed", 1))


def _config_from_args(args, overrides: dict | None = None) -> ExperimentConfig:
    raw = _load_config_file(getattr(args, "config", None))
    if overrides:
        for key, value in overrides.items():
            raw.setdefault(key, value)
    raw["seed"] = _resolve_seed(getattr(args, "seed", None), raw)
    if getattr(args, "mode", None) and args.mode != "all":
        raw["mode"] = args.mode
    return ExperimentConfig.from_dict(raw)


def _dump_config_toml(config: ExperimentConfig, path: Path) -> None:
    lines = []
    scalar_fields = [
        ("mode", config.mode),
        ("clients", config.clients),
        ("rounds", config.rounds),
        ("epochs", config.epochs),
        ("batch_size", config.batch_size),
        ("learning_rate", config.learning_rate),
        ("momentum", config.momentum),
        ("clients_per_training", config.clients_per_training),
        ("clients_per_evaluation", config.clients_per_evaluation),
        ("clip_range", config.clip_range),
        ("rsa_bits", config.rsa_bits),
        ("seed", config.seed),
        ("dataset", config.dataset),
        ("transport", config.transport),
        ("target_params", config.target_params),
        ("synthetic_samples", config.synthetic_samples),
        ("synthetic_features", config.synthetic_features),
    ]
    for key, value in scalar_fields:
        if isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        else:
            lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("[he]")
    lines.append(f"poly_degree = {config.he_poly_degree}")
    lines.append(f"plaintext_modulus = {config.he_plaintext_modulus}")
    lines.append(f"coeff_prime_bits = {config.he_coeff_prime_bits}")
    lines.append(f"coeff_prime_count = {config.he_coeff_prime_count}")
    lines.append(f"depth_budget = {config.he_depth_budget}")
    lines.append("")
    lines.append("[cipher]")
    lines.append(f"rounds = {config.cipher_rounds}")
    lines.append(f"key_len = {config.cipher_key_len}")
    lines.append(f"block_len = {config.cipher_block_len}")
    path.write_text("\n".join(lines) + "\n")


def _write_transcript(path: Path, transcript: TranscriptLog) -> None:
    with open(path, "wb") as fh:
        for e in transcript.entries:
            sender = e.sender.encode()
            recipient = e.recipient.encode()
            phase = e.phase.encode()
            mtype = e.msg_type.encode()
            payload = e.payload or b""
            rec = struct.pack(
                "<IIHHHHI",
                e.seq,
                e.round,
                len(phase),
                len(mtype),
                len(sender),
                len(recipient),
                e.n_bytes,
            )
            rec += phase + mtype + sender + recipient
            rec += struct.pack("<I", len(payload)) + payload
            fh.write(struct.pack("<I", len(rec)) + rec)


def cmd_run(args) -> int:
    try:
        if args.mode == "all":
            modes: list[str | None] = ["baseline", "masking", "rsa"]
        else:
            modes = [normalize_mode(args.mode)] if args.mode else [None]
        base = _config_from_args(args)
    except ConfigError as exc:
        return _fail_config(str(exc))

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    all_reports: list[reports.RoundReport] = []
    include_timings = not args.no_timestamps
    try:
        for mode in modes:
            config = base if mode in (None, base.mode) else ExperimentConfig(
                **{**vars(base), "mode": mode}
            )
            run_dir = out_root / f"{config.mode}-seed{config.seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            result = run_experiment(config)
            wall = time.perf_counter() - t0
            _dump_config_toml(config, run_dir / "config.toml")
            reports.write_rounds_jsonl(
                run_dir / "rounds.jsonl", result.round_reports, include_timings
            )
            reports.write_summary_csv(
                run_dir / "summary.csv", result.round_reports, include_timings
            )
            _write_transcript(run_dir / "transcript.bin", result.transcript)
            if not args.no_plots:
                reports.render_round_figures(run_dir, result.round_reports)
            all_reports.extend(result.round_reports)
            final = result.final_metrics
            stamp = f" in {wall:.1f}s" if include_timings else ""
            print(
                f"[{config.mode}] {config.rounds} rounds{stamp}: "
                f"accuracy={final.accuracy:.4f} loss={final.loss:.4f} "
                f"-> {run_dir}"
            )
        if len(modes) > 1 and not args.no_plots:
            reports.render_round_figures(out_root, all_reports)
    except ConfigError as exc:
        return _fail_config(str(exc))
    except HheflError as exc:
        print(f"protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    return EXIT_OK


def cmd_bench_rsa(args) -> int:
    try:
        bits_list = [int(b) for b in args.bits.split(",") if b]
    except ValueError:
        return _fail_config(f"cannot parse --bits {args.bits!r}")
    try:
        if args.input_bytes == "auto":
            data = _auto_bench_payload(args)
        else:
            rng = Drbg.from_seed(int(args.seed or 1), "bench-input")
            data = rng.take(int(args.input_bytes))
    except (ConfigError, ValueError) as exc:
        return _fail_config(str(exc))

    rows: list[reports.BenchReport] = []
    tpa_key = kp.generate_rsa_keypair(3072)
    tpa_pub = tpa_key.public_key()
    try:
        for bits in bits_list:
            server_key = kp.generate_rsa_keypair(bits)
            cert = kp.issue_certificate(tpa_key, server_key.public_key())
            wrap_s = unwrap_s = 0.0
            prot = None
            for _ in range(args.trials):
                t0 = time.perf_counter()
                prot = kp.rsa_wrap(data, cert, tpa_pub)
                t1 = time.perf_counter()
                recovered = kp.rsa_unwrap(prot, server_key)
                t2 = time.perf_counter()
                if recovered != data:
                    raise HheflError(f"RSA-{bits} wrap/unwrap mismatch")
                wrap_s += t1 - t0
                unwrap_s += t2 - t1
            out_bytes = sum(len(c) for c in prot.chunks)
            rows.append(
                reports.BenchReport(
                    rsa_bits=bits,
                    wrap_seconds=wrap_s / args.trials,
                    unwrap_seconds=unwrap_s / args.trials,
                    input_bytes=len(data),
                    max_plaintext_bytes=kp.max_plaintext_size(bits),
                    chunk_count=len(prot.chunks),
                    output_bytes=out_bytes,
                    expansion_ratio=out_bytes / len(data),
                )
            )
    except ParameterError as exc:
        return _fail_config(str(exc))
    except HheflError as exc:
        print(f"benchmark failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    print(reports.format_bench_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        reports.write_bench_csv(out / "bench_rsa.csv", rows)
        print(f"wrote {out / 'bench_rsa.csv'}")
    return EXIT_OK


def _auto_bench_payload(args) -> bytes:
    """A real serialized key-ciphertext bundle at the configured parameters."""
    config = _config_from_args(args)
    params = config.he_params()
    cparams = config.cipher_params()
    rng = Drbg.from_seed(config.seed, "bench-auto")
    keys = ring_he.keygen(params, rng.child("he").take(32))
    sym = sc.generate_sym_key(cparams, rng.child("sym"))
    layouts = sc.encrypt_key_layouts(keys.public_key, cparams, sym, rng.child("enc"))
    return kp.key_ciphertexts_bytes(layouts)


def cmd_attack(args) -> int:
    modes = ["baseline", "masking", "rsa"] if args.mode == "all" else [normalize_mode(args.mode)]
    try:
        base = _config_from_args(args, overrides=dict(_ATTACK_DEMO_OVERRIDES))
    except ConfigError as exc:
        return _fail_config(str(exc))

    rows = []
    all_as_expected = True
    try:
        for mode in modes:
            config = ExperimentConfig(**{**vars(base), "mode": mode})
            result = run_experiment(config, record_ground_truth=True)
            update_keys = sorted(result.ground_truth["updates"])
            if args.victim is not None:
                candidates = [k for k in update_keys if k[1] == args.victim]
                if not candidates:
                    return _fail_config(f"victim {args.victim!r} never trained")
                rnd, victim = candidates[0]
            else:
                rnd, victim = update_keys[0]
            truth_q, _, truth_key = result.ground_truth["updates"][(rnd, victim)]

            he_keys = derive_he_keys(config)
            eve = next(
                name
                for name in (f"client:{i}" for i in range(config.clients))
                if name != victim
            )
            knowledge = knowledge_from_run(
                he_keys, result.transcript, eve, config.cipher_params()
            )
            outcome = attack(intercept(knowledge, victim, rnd), knowledge)
            key_match = outcome.recovered_key is not None and np.array_equal(
                outcome.recovered_key, truth_key
            )
            weights_match = outcome.recovered_weights is not None and np.array_equal(
                outcome.recovered_weights, truth_q
            )
            expected = mode == "baseline"
            ok = (key_match == expected) and (weights_match == expected)
            all_as_expected &= ok
            rows.append((mode, victim, rnd, key_match, weights_match, outcome.note, ok))
    except ConfigError as exc:
        return _fail_config(str(exc))
    except HheflError as exc:
        print(f"protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL

    print(f"{'mode':<9} {'victim':<10} {'rnd':>3} {'key':>5} {'weights':>8}  verdict")
    print("-" * 78)
    for mode, victim, rnd, k, w, note, ok in rows:
        verdict = "as expected" if ok else "UNEXPECTED"
        print(
            f"{mode:<9} {victim:<10} {rnd:>3} {str(k):>5} {str(w):>8}  "
            f"{verdict}: {note}"
        )
    if not all_as_expected:
        print("attack demo assertion failed", file=sys.stderr)
        return EXIT_ATTACK
    return EXIT_OK


def cmd_keygen(args) -> int:
    try:
        config = _config_from_args(args)
    except ConfigError as exc:
        return _fail_config(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = config.he_params()
    seed = Drbg.from_seed(config.seed, "keygen-cli").take(32)
    keys = ring_he.keygen(params, seed)
    (out / "he_public.bin").write_bytes(ring_he.public_key_bytes(keys.public_key))
    (out / "he_secret.bin").write_bytes(ring_he.secret_key_bytes(keys.secret_key))
    (out / "he_eval.bin").write_bytes(ring_he.eval_key_bytes(keys.eval_key))
    meta = [
        f"poly_degree = {params.poly_degree}",
        f"plaintext_modulus = {params.plaintext_modulus}",
        f"coeff_primes = {list(params.coeff_primes)}",
        f"depth_budget = {params.depth_budget}",
        f"params_hash = \"{params.params_hash.hex()}\"",
        f"seed_fingerprint = \"{keys.metadata['seed_fingerprint']}\"",
        f"security_note = \"{params.security_note}\"",
    ]
    (out / "metadata.toml").write_text("\n".join(meta) + "\n")
    print(f"wrote HE key material to {out} ({params.security_note})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hhefl",
        description="Hybrid-homomorphic federated learning testbed",
    )
    parser.add_argument("--version", action="version", version=f"hhefl {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="run a federated experiment")
    p_run.add_argument("config", nargs="?", default=None, help="TOML config path")
    p_run.add_argument("--mode", default=None, help="baseline|masking|rsa|all")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.add_argument(
        "--no-timestamps",
        action="store_true",
        help="omit wall-clock fields so reruns are byte-identical",
    )
    p_run.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p_run.set_defaults(func=cmd_run)

    p_bench = subs.add_parser("bench-rsa", help="benchmark chunked RSA wrapping")
    p_bench.add_argument("--bits", default="1024,2048,3072,4096")
    p_bench.add_argument(
        "--input-bytes",
        default="auto",
        help="payload size, or 'auto' for a real serialized key bundle",
    )
    p_bench.add_argument("--trials", type=int, default=1)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(func=cmd_bench_rsa)

    p_attack = subs.add_parser("attack", help="run the interception attack demo")
    p_attack.add_argument("--mode", default="all")
    p_attack.add_argument("--victim", default=None, help="victim client id")
    p_attack.add_argument("--seed", type=int, default=None)
    p_attack.add_argument("--config", default=None)
    p_attack.set_defaults(func=cmd_attack)

    p_keygen = subs.add_parser("keygen", help="generate HE key material files")
    p_keygen.add_argument("--config", default=None)
    p_keygen.add_argument("--seed", type=int, default=None)
    p_keygen.add_argument("--out", default="keys")
    p_keygen.set_defaults(func=cmd_keygen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Exception types shared across the package."""


class HheflError(Exception):
    """Base class for all package-specific failures."""


class ParameterError(HheflError, ValueError):
    """Invalid or mismatched cryptographic/experiment parameters."""


class SerializationError(HheflError, ValueError):
    """Malformed bytes passed to a deserializer."""


class DepthExceededError(HheflError, RuntimeError):
    """A ciphertext multiplication would exceed the depth budget."""


class NoiseBudgetError(HheflError, RuntimeError):
    """Ciphertext noise grew past the point of reliable decryption."""


class CertificateError(HheflError, ValueError):
    """Certificate missing, unverified, or failing verification."""


class KeyRecoveryError(HheflError, RuntimeError):
    """Server-side recovery of a client's encrypted key failed."""


class ProtocolError(HheflError, RuntimeError):
    """Message violates protocol state (wrong round, phase, or sender)."""


class ConfigError(HheflError, ValueError):
    """Experiment configuration is invalid or violates an invariant."""

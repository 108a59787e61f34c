"""Hybrid homomorphic encryption for federated learning, at desk scale.

Clients encrypt model updates under a fast stream cipher; only the short
symmetric key travels under ring HE. The server converts symmetric
ciphertexts into HE ciphertexts (transciphering) and aggregates without
ever seeing a plaintext update. Three key-transport modes are provided:
the deliberately vulnerable shared-key baseline, additive masking, and
RSA-OAEP encapsulation. An adversary harness demonstrates the baseline
attack and checks that both countermeasures defeat it.

Nothing in this package is security-grade: ring and cipher parameters are
reduced so the full pipeline runs in seconds on a laptop.
"""

__version__ = "0.1.0"

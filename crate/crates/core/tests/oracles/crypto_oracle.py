#!/usr/bin/env python3
"""Reference values for SHA-256 and Ed25519 (RFC 8032 test 1) from hashlib
and the `cryptography` package."""
from hashlib import sha256
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives import serialization

print("sha256('')", sha256(b"").hexdigest())
print("sha256('abc')", sha256(b"abc").hexdigest())
seed = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
k = Ed25519PrivateKey.from_private_bytes(seed)
pub = k.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
print("rfc8032 pub", pub.hex())
print("rfc8032 sig(empty)", k.sign(b"").hex())

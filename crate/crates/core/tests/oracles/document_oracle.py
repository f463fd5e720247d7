#!/usr/bin/env python3
"""Independent canonical forms for the v1 whitelist and the proof of a
fixture importing exactly the four v1 functions.

json.dumps with sorted keys and no whitespace; shares no code with the Rust
implementation.
"""
import json
from hashlib import sha256


def canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


V1 = [
    ("get_input_len", "pure_data", "() -> i32"),
    ("get_input", "pure_data", "(i32) -> ()"),
    ("set_output", "pure_directive", "(i32, i32) -> ()"),
    ("log", "pure_data", "(i32, i32) -> ()"),
]

entries = sorted(
    ({"namespace": "mashin", "name": n, "class": c, "type_signature": t} for n, c, t in V1),
    key=lambda e: (e["namespace"], e["name"]),
)
whitelist = canonical({"version": 1, "entries": entries})
whitelist_hash = sha256(whitelist).hexdigest()
print("v1 canonical", whitelist.decode())
print("v1 hash", whitelist_hash)

imports = [{"namespace": "mashin", "name": n, "kind": "function", "type_signature": t} for n, _, t in V1]
proof = {
    "imports": imports,
    "classifications": [{"import": i, "verdict": c} for i, (_, c, _) in zip(imports, V1)],
    "conclusion": "pure",
    "whitelist_version": 1,
    "whitelist_hash": whitelist_hash,
}
print("v1 fixture proof hash", sha256(canonical(proof)).hexdigest())

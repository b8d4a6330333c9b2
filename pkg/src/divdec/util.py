"""Seed derivation, hashing, and flat key=value config files."""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from an arbitrary tuple of hashable parts.

    Uses SHA-256 of the stringified parts, so derived streams are independent
    of platform hash randomization and of each other.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Dedicated PCG64 stream keyed by the given parts."""
    return np.random.default_rng(derive_seed(*parts))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_kv_config(path) -> dict:
    """Parse a flat `key = value` text file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def save_kv_config(path, mapping: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in mapping.items():
            f.write(f"{key} = {value}\n")

"""Sealed JSON manifests shared by the index and bank formats.

A manifest carries a CRC-32 of its own canonical serialization, and the file
must be byte-identical to that serialization, so any edit to it is caught.
"""

from __future__ import annotations

import json
import zlib

from .errors import ChecksumMismatch

SEAL = "manifest_crc32"


def _canonical(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def dumps_sealed(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != SEAL}
    return _canonical({**body, SEAL: zlib.crc32(_canonical(body).encode("ascii"))})


def loads_sealed(raw: bytes | str, what: str) -> dict:
    try:
        if isinstance(raw, bytes):
            raw = raw.decode("ascii")
        doc = json.loads(raw)
        seal = int(doc.pop(SEAL))
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise ChecksumMismatch(f"unreadable {what} manifest: {e}") from e
    if zlib.crc32(_canonical(doc).encode("ascii")) != seal or dumps_sealed(doc) != raw:
        raise ChecksumMismatch(f"{what} manifest fails its own checksum")
    return doc

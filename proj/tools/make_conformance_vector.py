#!/usr/bin/env python3
"""Writes the shared CEB v1 conformance vector and its expected contents.

The encoder here is deliberately independent of the C++ one: plain struct
packing and a bitwise CRC-64/XZ.
"""
import json
import pathlib
import struct
import sys

POLY_REFLECTED = 0xC96C5795D7870F42


def crc64_xz(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ POLY_REFLECTED if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


DIMS = (2, 3, 1)
SAMPLES = [
    {"id": "clip-0001", "label": 0, "z": [[0.5, -1.25], [3.0, 0.0, -0.0], [1024.0]]},
    {"id": "clip-0002", "label": 1, "z": [[-2.5, 0.125], None, None]},
    {"id": "vidéo-ß", "label": 1, "z": [None, [1.0, -1.0, 65504.0], [0.75]]},
    {"id": "clip-0004", "label": 0, "z": [[0.0625, 7.0], [-3.5, 2.0, 0.25], None]},
]


def encode() -> bytes:
    out = bytearray(b"CEB1")
    out += struct.pack("<B", 1)
    out += struct.pack("<I", len(SAMPLES))
    out += struct.pack("<III", *DIMS)
    for s in SAMPLES:
        ident = s["id"].encode("utf-8")
        out += struct.pack("<H", len(ident)) + ident
        mask = sum(1 << m for m, z in enumerate(s["z"]) if z is not None)
        out += struct.pack("<BB", s["label"], mask)
        for z in s["z"]:
            if z is not None:
                out += struct.pack("<%df" % len(z), *z)
    out += struct.pack("<Q", crc64_xz(bytes(out)))
    return bytes(out)


def main() -> int:
    assert crc64_xz(b"123456789") == 0x995DC9BBDF1939FA
    dest = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent.parent / "tests" / "data")
    dest.mkdir(parents=True, exist_ok=True)
    blob = encode()
    (dest / "conformance_v1.ceb").write_bytes(blob)
    expected = {
        "dims": list(DIMS),
        "samples": SAMPLES,
        "size_bytes": len(blob),
        "crc64": "%016x" % crc64_xz(blob[:-8]),
    }
    (dest / "conformance_v1.json").write_text(json.dumps(expected, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())

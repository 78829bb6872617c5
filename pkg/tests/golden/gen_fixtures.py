"""Regenerate the committed golden fixtures from the documented formats.

Deliberately written against the byte layouts only (struct + zlib), with no
package imports, so the fixtures stay an independent check on the codec.
Run from the repo root: python3 tests/golden/gen_fixtures.py
"""

import struct
import zlib
from pathlib import Path

HERE = Path(__file__).parent


def frame(kind: int, round_idx: int, client_id: int, payload: bytes = b"") -> bytes:
    return struct.pack("<4sBIII", b"FME1", kind, round_idx, client_id, len(payload)) + payload


def weight_blob(records: list[tuple[str, int, tuple[int, ...], bytes]]) -> bytes:
    body = struct.pack("<H", 1)
    for name, rank, dims, data in records:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", rank)
        body += b"".join(struct.pack("<I", d) for d in dims)
        body += data
    return body + struct.pack("<I", zlib.crc32(body))


def f32(*values: float) -> bytes:
    return struct.pack(f"<{len(values)}f", *values)


def main():
    # HELLO, round 0, client 2, empty payload
    (HERE / "hello_frame.bin").write_bytes(frame(1, 0, 2, b""))

    # UPDATE frame, round 7, client 1, payload carrying a weight blob
    blob = weight_blob(
        [
            ("b", 1, (1,), f32(1.0)),
            ("conv_w", 3, (2, 2, 2), f32(0.0, -1.5, 2.25, 0.5, 1.0, -2.0, 3.75, -0.125)),
        ]
    )
    (HERE / "weights_blob.bin").write_bytes(blob)
    (HERE / "update_frame.bin").write_bytes(frame(4, 7, 1, blob))

    # scalar-only blob: the spec-shaped minimal example ("b" = 1.0)
    (HERE / "scalar_blob.bin").write_bytes(weight_blob([("b", 1, (1,), f32(1.0))]))

    # 20-row facial-expression CSV: 48x48 images with a deterministic
    # pattern so every pixel is checkable by the parallel table
    rows = []
    usages = ["Training"] * 12 + ["PublicTest"] * 4 + ["PrivateTest"] * 4
    for i in range(20):
        label = i % 7
        pixels = [(i * 7 + j * 13) % 256 for j in range(2304)]
        rows.append(f"{label},{' '.join(str(p) for p in pixels)},{usages[i]}")
    (HERE / "fer_fixture.csv").write_text("emotion,pixels,Usage\n" + "\n".join(rows) + "\n")

    # parallel hand-parsed table: label, usage, first/last pixel, pixel sum
    lines = ["# row_index label usage first_pixel last_pixel pixel_sum"]
    for i in range(20):
        pixels = [(i * 7 + j * 13) % 256 for j in range(2304)]
        lines.append(f"{i + 1} {i % 7} {usages[i]} {pixels[0]} {pixels[-1]} {sum(pixels)}")
    (HERE / "fer_fixture_table.txt").write_text("\n".join(lines) + "\n")

    print("fixtures written to", HERE)


if __name__ == "__main__":
    main()

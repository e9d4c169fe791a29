# Writes the golden label stores used by the CLI tests.
import struct


def header(c, b, t, r, bpe, k):
    flags = 1 if k else 0
    return b"SLBL" + struct.pack("<HH6I", 1, flags, c, b, t, r, bpe, k)


def batch(epoch, idx, b, labels):
    out = struct.pack("<2I", epoch, idx)
    out += struct.pack(f"<{b}I", *range(idx * b, idx * b + b))
    out += struct.pack(f"<{4 * b}f", *([1.0, 0.25, 0.75, -0.5] * b))
    out += bytes([i % 2 for i in range(b)])
    out += struct.pack(f"<{b}I", *reversed(range(b)))
    out += struct.pack("<f", 0.5)
    out += struct.pack("<4I", 0, 0, 0, 0)
    return out + labels


full = header(4, 2, 4, 2, 1, 0)
for e in range(2):
    full += batch(e, 0, 2, struct.pack("<8f", 1.5, -0.5, 0.25, 2.0, 0.0, 3.0, -1.0, 0.5))
open("full_c4_b2.slbl", "wb").write(full)

top1 = header(4, 2, 4, 2, 1, 1)
for e in range(2):
    top1 += batch(e, 0, 2, struct.pack("<2I", 3, 1) + struct.pack("<2f", 2.0, 3.0))
open("top1_c4_b2.slbl", "wb").write(top1)

"""Writes the four-image IDX fixture used by the loader tests."""
import struct
from pathlib import Path

here = Path(__file__).parent
labels = [0, 7, 35, 61]
with open(here / "four-images-idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 0x803, len(labels), 28, 28))
    for i in range(len(labels)):
        f.write(bytes((i * 64 + r + c) % 256 for r in range(28) for c in range(28)))
with open(here / "four-labels-idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x801, len(labels)))
    f.write(bytes(labels))

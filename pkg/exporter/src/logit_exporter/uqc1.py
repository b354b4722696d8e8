"""Standalone UQC1 writer.

The evaluation engine consumes this file format; writing it here keeps the
package boundary at the documented byte layout rather than a code import.

Layout (little-endian):
    magic "UQC1" | u32 version=1 | u32 N | u32 K | u32 M
    i32 labels[N] | u8 domain[N] | f64 stage_cost[M]
    M x f32[N*K] row-major logit matrices
    u32 CRC32 of everything between header and checksum
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"UQC1"
VERSION = 1
DOMAIN_ID = 0
DOMAIN_OOD = 1
OOD_LABEL = -1

_HEADER = struct.Struct("<4sIIII")


def write_uqc1(path, logits, labels, domain, stage_cost) -> None:
    logits = np.ascontiguousarray(logits, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    domain = np.ascontiguousarray(domain, dtype=np.uint8)
    stage_cost = np.ascontiguousarray(stage_cost, dtype="<f8")
    m, n, k = logits.shape
    if labels.shape != (n,) or domain.shape != (n,) or stage_cost.shape != (m,):
        raise ValueError("inconsistent array shapes")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    payload = (
        labels.tobytes() + domain.tobytes() + stage_cost.tobytes() + logits.tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, k, m))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))

"""Score-table data model: ingestion, binary persistence, mixture subsampling.

A score table holds everything one evaluation runs over: per-stage logits for
every sample, labels, ID/OOD domain flags, and the abstract cost of running
each stage.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"UQC1"
FORMAT_VERSION = 1

DOMAIN_ID = 0
DOMAIN_OOD = 1
OOD_LABEL = -1

_HEADER = struct.Struct("<4sIIII")  # magic, version, N, K, M


class ScoreTableError(Exception):
    """Base class for score-table construction and I/O failures."""


class IngestError(ScoreTableError):
    """CSV ingestion failed; ``problems`` lists every offending line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(ScoreTableError):
    """The binary file is not a valid UQC1 payload."""


@dataclass(frozen=True)
class ScoreTable:
    """Immutable N-sample, M-stage, K-class score table.

    logits     -- float32 [M, N, K], pre-softmax outputs per stage
    labels     -- int32 [N], class index for ID samples, -1 for OOD
    domain     -- uint8 [N], 0 = ID, 1 = OOD
    stage_cost -- float64 [M], nonnegative cost units of running each stage
    meta       -- free-form string map; not persisted in the binary format
    """

    logits: np.ndarray
    labels: np.ndarray
    domain: np.ndarray
    stage_cost: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        domain = np.ascontiguousarray(self.domain, dtype=np.uint8)
        cost = np.ascontiguousarray(self.stage_cost, dtype=np.float64)

        if logits.ndim != 3:
            raise ScoreTableError(f"logits must be [M, N, K], got shape {logits.shape}")
        m, n, k = logits.shape
        if n < 1 or k < 2 or m < 1:
            raise ScoreTableError(f"need N >= 1, K >= 2, M >= 1, got N={n} K={k} M={m}")
        if labels.shape != (n,):
            raise ScoreTableError(f"labels must have shape ({n},), got {labels.shape}")
        if domain.shape != (n,):
            raise ScoreTableError(f"domain must have shape ({n},), got {domain.shape}")
        if cost.shape != (m,):
            raise ScoreTableError(f"stage_cost must have shape ({m},), got {cost.shape}")
        if not np.all(np.isfinite(logits)):
            raise ScoreTableError("logits contain non-finite values")
        if np.any(cost < 0):
            raise ScoreTableError("stage_cost entries must be >= 0")
        if np.any(domain > DOMAIN_OOD):
            raise ScoreTableError("domain flags must be 0 (ID) or 1 (OOD)")
        ood = domain == DOMAIN_OOD
        if np.any(labels[ood] != OOD_LABEL):
            raise ScoreTableError("OOD samples must carry the label sentinel -1")
        id_labels = labels[~ood]
        if id_labels.size and (id_labels.min() < 0 or id_labels.max() >= k):
            raise ScoreTableError(f"ID labels must lie in [0, {k})")

        for arr in (logits, labels, domain, cost):
            arr.flags.writeable = False
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "stage_cost", cost)

    @property
    def n_stages(self) -> int:
        return self.logits.shape[0]

    @property
    def n_samples(self) -> int:
        return self.logits.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[2]

    @property
    def ood_mask(self) -> np.ndarray:
        return self.domain == DOMAIN_OOD

    @property
    def id_mask(self) -> np.ndarray:
        return self.domain == DOMAIN_ID

    def subset(self, indices) -> "ScoreTable":
        """New table restricted to the given sample indices, in that order."""
        idx = np.asarray(indices, dtype=np.intp)
        return ScoreTable(
            logits=self.logits[:, idx, :],
            labels=self.labels[idx],
            domain=self.domain[idx],
            stage_cost=self.stage_cost,
            meta=dict(self.meta),
        )

    def same_numeric_content(self, other: "ScoreTable") -> bool:
        """Bit-exact equality of all persisted fields (meta excluded)."""
        return (
            self.logits.shape == other.logits.shape
            and np.array_equal(self.logits, other.logits)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domain, other.domain)
            and np.array_equal(self.stage_cost, other.stage_cost)
        )


def split_domains(table: ScoreTable) -> tuple[ScoreTable, ScoreTable]:
    """(id_table, ood_table); raises if either side is empty."""
    id_idx = np.flatnonzero(table.id_mask)
    ood_idx = np.flatnonzero(table.ood_mask)
    if id_idx.size == 0 or ood_idx.size == 0:
        raise ScoreTableError("table does not contain both ID and OOD samples")
    return table.subset(id_idx), table.subset(ood_idx)


# ---------------------------------------------------------------------------
# CSV ingestion
#
# Header: sample_id,label,domain,stage,logit_0..logit_{K-1}
# Every (sample, stage) pair must appear exactly once. Domain tags are the
# literal strings "id" and "ood". Logit text is parsed as 32-bit float.
# The CSV carries no cost column; stage_cost defaults to 1.0 per stage.
# ---------------------------------------------------------------------------


def ingest_csv(path, stage_cost=None) -> ScoreTable:
    path = Path(path)
    problems: list[str] = []
    rows: dict[tuple[int, int], tuple[int, int, int, np.ndarray]] = {}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(["line 1: empty file"]) from None
        if len(header) < 5 or header[:4] != ["sample_id", "label", "domain", "stage"]:
            raise IngestError(["line 1: bad header, expected sample_id,label,domain,stage,logit_0.."])
        k = len(header) - 4
        expected_logits = [f"logit_{i}" for i in range(k)]
        if header[4:] != expected_logits:
            raise IngestError([f"line 1: logit columns must be logit_0..logit_{k - 1}"])

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + k:
                problems.append(f"line {lineno}: expected {k} logits, got {len(row) - 4}")
                continue
            try:
                sample = int(row[0])
                label = int(row[1])
                stage = int(row[3])
            except ValueError:
                problems.append(f"line {lineno}: non-integer sample_id/label/stage")
                continue
            tag = row[2].strip()
            if tag == "id":
                dom = DOMAIN_ID
            elif tag == "ood":
                dom = DOMAIN_OOD
            else:
                problems.append(f"line {lineno}: unknown domain tag {tag!r}")
                continue
            vals = np.empty(k, dtype=np.float32)
            bad = False
            for i, text in enumerate(row[4:]):
                try:
                    v = np.float32(text)
                except ValueError:
                    problems.append(f"line {lineno}: unparseable logit {text!r}")
                    bad = True
                    break
                if not math.isfinite(v):
                    problems.append(f"line {lineno}: non-finite logit {text!r}")
                    bad = True
                    break
                vals[i] = v
            if bad:
                continue
            key = (sample, stage)
            if key in rows:
                problems.append(f"line {lineno}: duplicate (sample,stage)=({sample},{stage})")
                continue
            rows[key] = (lineno, label, dom, vals)

    if not rows and not problems:
        raise IngestError(["line 1: no data rows"])

    sample_ids = sorted({s for s, _ in rows})
    stage_ids = sorted({m for _, m in rows})
    for s in sample_ids:
        for m in stage_ids:
            if (s, m) not in rows:
                problems.append(f"missing (sample,stage)=({s},{m})")

    # label/domain must agree across all stages of one sample
    for s in sample_ids:
        seen = {(rows[(s, m)][1], rows[(s, m)][2]) for m in stage_ids if (s, m) in rows}
        if len(seen) > 1:
            lines = sorted(rows[(s, m)][0] for m in stage_ids if (s, m) in rows)
            problems.append(f"line {lines[-1]}: conflicting label/domain for sample {s}")

    for s in sample_ids:
        for m in stage_ids:
            if (s, m) not in rows:
                continue
            lineno, label, dom, _ = rows[(s, m)]
            if dom == DOMAIN_OOD and label != OOD_LABEL:
                problems.append(f"line {lineno}: OOD sample {s} must have label -1, got {label}")
            elif dom == DOMAIN_ID and not (0 <= label < k):
                problems.append(f"line {lineno}: ID sample {s} label {label} outside [0, {k})")
            break  # label checked once per sample (consistency handled above)

    if problems:
        raise IngestError(problems)

    n, m_count = len(sample_ids), len(stage_ids)
    logits = np.empty((m_count, n, k), dtype=np.float32)
    labels = np.empty(n, dtype=np.int32)
    domain = np.empty(n, dtype=np.uint8)
    for i, s in enumerate(sample_ids):
        _, labels[i], domain[i], _ = rows[(s, stage_ids[0])]
        for j, m in enumerate(stage_ids):
            logits[j, i] = rows[(s, m)][3]

    cost = np.ones(m_count) if stage_cost is None else np.asarray(stage_cost, dtype=np.float64)
    return ScoreTable(logits, labels, domain, cost, meta={"source": str(path)})


# ---------------------------------------------------------------------------
# UQC1 binary format (little-endian)
#
#   magic "UQC1" | u32 version | u32 N | u32 K | u32 M
#   i32 labels[N] | u8 domain[N] | f64 stage_cost[M]
#   M x f32[N*K] row-major logit matrices
#   u32 CRC32 of everything between header and checksum
# ---------------------------------------------------------------------------


def write_binary(table: ScoreTable, path) -> None:
    n, k, m = table.n_samples, table.n_classes, table.n_stages
    payload = b"".join(
        [
            table.labels.astype("<i4").tobytes(),
            table.domain.tobytes(),
            table.stage_cost.astype("<f8").tobytes(),
            table.logits.astype("<f4").tobytes(),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, k, m))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_binary(path) -> ScoreTable:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated payload: file shorter than header")
    magic, version, n, k, m = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"version mismatch: file v{version}, reader v{FORMAT_VERSION}")
    payload_len = n * 4 + n + m * 8 + m * n * k * 4
    expected = _HEADER.size + payload_len + 4
    if len(data) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(data)}")
    payload = data[_HEADER.size : _HEADER.size + payload_len]
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + payload_len)
    if zlib.crc32(payload) != crc:
        raise FormatError("checksum failure")

    off = 0
    labels = np.frombuffer(payload, dtype="<i4", count=n, offset=off)
    off += n * 4
    domain = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off)
    off += n
    cost = np.frombuffer(payload, dtype="<f8", count=m, offset=off)
    off += m * 8
    logits = np.frombuffer(payload, dtype="<f4", count=m * n * k, offset=off).reshape(m, n, k)
    return ScoreTable(logits, labels, domain, cost, meta={"source": str(path)})


# ---------------------------------------------------------------------------
# Mixture construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    """Target ID fraction alpha and the subsampling seed."""

    alpha: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ScoreTableError(f"alpha must be in [0, 1], got {self.alpha}")


def mixture_counts(pool_id: int, pool_ood: int, alpha: float) -> tuple[int, int]:
    """Largest (n_id, n_ood) with n_id/(n_id+n_ood) within 1/N of alpha.

    The binding pool is scaled down: total = floor(min(pool_id/alpha,
    pool_ood/(1-alpha))), then n_id = round(alpha * total).
    """
    if alpha == 1.0:
        return pool_id, 0
    if alpha == 0.0:
        return 0, pool_ood
    total = int(min(math.floor(pool_id / alpha), math.floor(pool_ood / (1.0 - alpha))))
    n_id = int(math.floor(alpha * total + 0.5))
    return n_id, total - n_id


def mix_subsample(id_table: ScoreTable, ood_table: ScoreTable, spec: MixtureSpec) -> ScoreTable:
    """Concatenate seeded subsamples of both pools at ID fraction alpha."""
    if id_table.n_classes != ood_table.n_classes:
        raise ScoreTableError(
            f"K mismatch: {id_table.n_classes} vs {ood_table.n_classes}"
        )
    if id_table.n_stages != ood_table.n_stages:
        raise ScoreTableError(f"M mismatch: {id_table.n_stages} vs {ood_table.n_stages}")
    if not np.array_equal(id_table.stage_cost, ood_table.stage_cost):
        raise ScoreTableError("stage_cost mismatch between pools")

    n_id, n_ood = mixture_counts(id_table.n_samples, ood_table.n_samples, spec.alpha)
    subsampled = n_id < id_table.n_samples or n_ood < ood_table.n_samples
    if subsampled and 0.0 < spec.alpha < 1.0:  # dropping a whole pool is definitional
        warnings.warn(
            f"mixture at alpha={spec.alpha} subsamples pools "
            f"({id_table.n_samples}->{n_id} ID, {ood_table.n_samples}->{n_ood} OOD)",
            stacklevel=2,
        )

    rng = np.random.default_rng(spec.seed)
    id_idx = rng.permutation(id_table.n_samples)[:n_id]
    ood_idx = rng.permutation(ood_table.n_samples)[:n_ood]

    parts = []
    if n_id:
        parts.append(id_table.subset(id_idx))
    if n_ood:
        parts.append(ood_table.subset(ood_idx))
    if not parts:
        raise ScoreTableError("mixture is empty")
    if len(parts) == 1:
        merged = parts[0]
    else:
        a, b = parts
        merged = ScoreTable(
            logits=np.concatenate([a.logits, b.logits], axis=1),
            labels=np.concatenate([a.labels, b.labels]),
            domain=np.concatenate([a.domain, b.domain]),
            stage_cost=id_table.stage_cost,
            meta={},
        )
    order = rng.permutation(merged.n_samples)
    out = merged.subset(order)
    return replace(
        out,
        meta={"alpha": repr(spec.alpha), "mixture_seed": str(spec.seed)},
    )

"""Protocol construction, synthetic data, and file formats.

Binary format (version 1, all integers little-endian):

    offset 0   magic  b"GCMR"
    offset 4   u16    format version
    offset 6   u8     kind: 1 = token dataset, 2 = session checkpoint
    offset 7   u8     float width in bytes (4 or 8)
    ...        kind-specific sections (shapes, class tables, row-major
               float payloads at the declared width)
    trailer    u32    CRC32 of every preceding byte

Every load failure is a distinct FormatError subclass carrying the byte
offset where the problem was detected. Round trips at width 8 are bit-exact
for all finite float64 values, signed zeros included.

CSV ingestion accepts two layouts: flat features with header
``label,f0,...,f{D-1}`` (one single-token example per line) and token groups
with header ``label,token,f0,...`` where token indices 0..G-1 delimit
examples.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .classifier import ClassifierParams
from .encoder import ACTIVATIONS, EncoderParams, FEATURE_NORMS
from .memory import RepresentationMemory, WeightMemory
from .trainer import SessionState

FORMAT_MAGIC = b"GCMR"
FORMAT_VERSION = 1
KIND_DATASET = 1
KIND_CHECKPOINT = 2

SPLIT_TAG = 201
SYNTH_TAG = 202


class FormatError(Exception):
    """Base class for malformed or mismatched data files."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class DimensionError(FormatError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    """Shape of a class-incremental experiment."""

    total_classes: int
    base_classes: int
    n_way: int
    k_shot: int
    seed: int = 0
    test_per_class: int = 10

    def __post_init__(self):
        if min(self.total_classes, self.base_classes, self.n_way,
               self.k_shot, self.test_per_class) < 1:
            raise ValueError("protocol counts must be positive")
        if self.base_classes > self.total_classes:
            raise ValueError("base_classes cannot exceed total_classes")
        if (self.total_classes - self.base_classes) % self.n_way != 0:
            raise ValueError("incremental classes must divide evenly into n_way sessions")

    @property
    def n_sessions(self) -> int:
        """Incremental session count (the base session comes on top)."""
        return (self.total_classes - self.base_classes) // self.n_way


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian cluster generator settings."""

    d: int
    g: int
    n_classes: int
    class_mean_norm: float
    within_class_sigma: float
    examples_per_class: int
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.g, self.n_classes, self.examples_per_class) < 1:
            raise ValueError("synthetic dimensions and counts must be positive")
        if self.g < 2:
            raise ValueError("g must be at least 2 tokens")
        if self.within_class_sigma <= 0.0:
            raise ValueError("within_class_sigma must be positive")
        if self.class_mean_norm <= 0.0:
            raise ValueError("class_mean_norm must be positive")


@dataclass
class TokenDataset:
    """Raw token groups with integer labels."""

    features: np.ndarray  # (n, g, d)
    labels: np.ndarray    # (n,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise ValueError("features must have shape (n, tokens, dim)")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with features")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SessionAssignment:
    """Index-level train/test split of one session."""

    session: int
    class_ids: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class SessionData:
    """Materialized data of one session."""

    session: int
    class_ids: tuple[int, ...]
    train: TokenDataset
    test: TokenDataset


def fscil_split(spec: ProtocolSpec, labels) -> list[SessionAssignment]:
    """Assign classes and examples to the base plus incremental sessions.

    Classes are shuffled by the spec seed; the first base_classes become
    session 0, the rest form n_way-sized sessions in shuffle order. Per
    class, test_per_class examples are held out for testing; base classes
    train on everything else, incremental classes on exactly k_shot
    examples. Identical seeds give identical splits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = sorted(int(c) for c in np.unique(labels))
    if len(classes) != spec.total_classes:
        raise ValueError(f"dataset has {len(classes)} classes, spec expects {spec.total_classes}")
    order = rng.generator(spec.seed, SPLIT_TAG).permutation(len(classes))
    shuffled = [classes[i] for i in order]

    per_class_indices: dict[int, np.ndarray] = {}
    for pos, cid in enumerate(shuffled):
        idx = np.flatnonzero(labels == cid)
        if idx.size < spec.k_shot + spec.test_per_class:
            raise ValueError(
                f"class {cid} has {idx.size} examples, needs at least "
                f"{spec.k_shot + spec.test_per_class}")
        perm = rng.generator(spec.seed, SPLIT_TAG, pos + 1).permutation(idx.size)
        per_class_indices[cid] = idx[perm]

    sessions = []
    base_ids = shuffled[:spec.base_classes]
    train_parts = [per_class_indices[cid][spec.test_per_class:] for cid in base_ids]
    test_parts = [per_class_indices[cid][:spec.test_per_class] for cid in base_ids]
    sessions.append(SessionAssignment(0, tuple(base_ids),
                                      np.concatenate(train_parts),
                                      np.concatenate(test_parts)))
    for t in range(spec.n_sessions):
        ids = shuffled[spec.base_classes + t * spec.n_way:
                       spec.base_classes + (t + 1) * spec.n_way]
        train_parts = [per_class_indices[cid][spec.test_per_class:
                                              spec.test_per_class + spec.k_shot]
                       for cid in ids]
        test_parts = [per_class_indices[cid][:spec.test_per_class] for cid in ids]
        sessions.append(SessionAssignment(t + 1, tuple(ids),
                                          np.concatenate(train_parts),
                                          np.concatenate(test_parts)))
    return sessions


def materialize_sessions(dataset: TokenDataset,
                         split: Sequence[SessionAssignment]) -> list[SessionData]:
    """Slice the dataset into per-session train/test TokenDatasets."""
    out = []
    for part in split:
        out.append(SessionData(
            part.session, part.class_ids,
            TokenDataset(dataset.features[part.train_indices],
                         dataset.labels[part.train_indices]),
            TokenDataset(dataset.features[part.test_indices],
                         dataset.labels[part.test_indices])))
    return out


def generate_synthetic(spec: SyntheticSpec) -> TokenDataset:
    """Isotropic Gaussian clusters in token space.

    Each class gets a mean vector drawn uniformly on the sphere of radius
    class_mean_norm, replicated across its tokens; examples add iid noise of
    the configured sigma to every token entry. Deterministic in the seed.
    """
    gen = rng.generator(spec.seed, SYNTH_TAG)
    n = spec.n_classes * spec.examples_per_class
    features = np.empty((n, spec.g, spec.d))
    labels = np.repeat(np.arange(spec.n_classes), spec.examples_per_class)
    for c in range(spec.n_classes):
        direction = gen.standard_normal(spec.d)
        norm = np.linalg.norm(direction)
        while norm == 0.0:  # astronomically unlikely, but keep the draw well defined
            direction = gen.standard_normal(spec.d)
            norm = np.linalg.norm(direction)
        mean = spec.class_mean_norm * direction / norm
        noise = gen.standard_normal((spec.examples_per_class, spec.g, spec.d))
        start = c * spec.examples_per_class
        features[start:start + spec.examples_per_class] = mean + spec.within_class_sigma * noise
    return TokenDataset(features, labels)


# --- binary reader/writer helpers -----------------------------------------

_WIDTH_DTYPES = {4: "<f4", 8: "<f8"}


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise TruncatedFileError(f"file ends inside {what}", self.pos)
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def floats(self, count: int, width: int, what: str) -> np.ndarray:
        raw = self.take(count * width, what)
        return np.frombuffer(raw, dtype=_WIDTH_DTYPES[width]).astype(np.float64)

    def ints(self, count: int, fmt_char: str, what: str) -> np.ndarray:
        width = struct.calcsize("<" + fmt_char)
        raw = self.take(count * width, what)
        return np.frombuffer(raw, dtype="<" + {"q": "i8", "I": "u4"}[fmt_char]).astype(np.int64)


def _float_bytes(arr: np.ndarray, width: int) -> bytes:
    return np.ascontiguousarray(arr, dtype=_WIDTH_DTYPES[width]).tobytes()


def _open_blob(blob: bytes, expected_kind: int):
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != FORMAT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {FORMAT_MAGIC!r}", 0)
    if len(blob) < 8 + 4:
        raise TruncatedFileError("file too short for header and checksum", len(blob))
    stored_crc, = struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            len(blob) - 4)
    version, = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}", 4)
    kind, = reader.unpack("<B", "kind")
    if kind != expected_kind:
        raise FormatError(f"wrong file kind {kind}, expected {expected_kind}", 6)
    width, = reader.unpack("<B", "float width")
    if width not in _WIDTH_DTYPES:
        raise FormatError(f"unsupported float width {width}", 7)
    reader.blob = blob[:-4]  # stop body reads before the checksum
    return reader, width


def _finish_blob(body: bytearray) -> bytes:
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return bytes(body) + struct.pack("<I", crc)


def save_dataset(dataset: TokenDataset, path, precision: int = 8) -> None:
    """Write a token dataset; precision picks the stored float width."""
    if precision not in _WIDTH_DTYPES:
        raise ValueError("precision must be 4 or 8")
    n, g, d = dataset.features.shape
    class_ids = sorted(int(c) for c in np.unique(dataset.labels)) if n else []
    index_of = {cid: i for i, cid in enumerate(class_ids)}
    body = bytearray()
    body += FORMAT_MAGIC
    body += struct.pack("<HBB", FORMAT_VERSION, KIND_DATASET, precision)
    body += struct.pack("<IIII", n, g, d, len(class_ids))
    body += np.asarray(class_ids, dtype="<i8").tobytes()
    body += np.asarray([index_of[int(v)] for v in dataset.labels], dtype="<u4").tobytes()
    body += _float_bytes(dataset.features, precision)
    with open(path, "wb") as fh:
        fh.write(_finish_blob(body))


def load_dataset(path) -> TokenDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader, width = _open_blob(blob, KIND_DATASET)
    n, g, d, n_classes = reader.unpack("<IIII", "dataset shape")
    if g < 1 or d < 1:
        raise DimensionError(f"degenerate dataset shape ({n}, {g}, {d})", reader.pos - 16)
    class_ids = reader.ints(n_classes, "q", "class table")
    label_idx = reader.ints(n, "I", "labels")
    if n_classes and np.any(label_idx >= n_classes):
        raise DimensionError("label index outside the class table", reader.pos)
    values = reader.floats(n * g * d, width, "feature payload")
    if reader.pos != len(reader.blob):
        raise FormatError("trailing bytes after payload", reader.pos)
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite feature values", reader.pos)
    labels = class_ids[label_idx] if n else np.empty(0, dtype=np.int64)
    return TokenDataset(values.reshape(n, g, d), labels)


def _pack_classifier(params: ClassifierParams, width: int) -> bytes:
    body = struct.pack("<IIId", params.dim, params.hidden, params.n_classes,
                       params.dropout_rate)
    for arr in (params.w1, params.b1, params.w2, params.b2):
        body += _float_bytes(arr, width)
    return body


def _unpack_classifier(reader: _Reader, width: int) -> ClassifierParams:
    dim, hidden, n_classes = reader.unpack("<III", "classifier shape")
    dropout, = reader.unpack("<d", "dropout rate")
    if min(dim, hidden, n_classes) < 1:
        raise DimensionError("degenerate classifier shape", reader.pos)
    w1 = reader.floats(dim * hidden, width, "w1").reshape(dim, hidden)
    b1 = reader.floats(hidden, width, "b1")
    w2 = reader.floats(hidden * n_classes, width, "w2").reshape(hidden, n_classes)
    b2 = reader.floats(n_classes, width, "b2")
    return ClassifierParams(w1, b1, w2, b2, dropout)


def save_checkpoint(state: SessionState, path, precision: int = 8) -> None:
    """Serialize a full session state (encoder, head, both memories)."""
    if precision not in _WIDTH_DTYPES:
        raise ValueError("precision must be 4 or 8")
    enc = state.encoder
    body = bytearray()
    body += FORMAT_MAGIC
    body += struct.pack("<HBB", FORMAT_VERSION, KIND_CHECKPOINT, precision)
    body += struct.pack("<I", state.session)
    body += struct.pack("<BBBII", ACTIVATIONS.index(enc.activation),
                        FEATURE_NORMS.index(enc.feature_norm),
                        int(enc.frozen), enc.raw_dim, enc.dim)
    body += _float_bytes(enc.w, precision)
    body += _float_bytes(enc.b, precision)
    body += _pack_classifier(state.classifier, precision)
    mem = state.mem
    body += struct.pack("<II", mem.n_classes, mem.dim)
    body += np.asarray(mem.class_ids, dtype="<i8").tobytes()
    body += np.asarray(mem.session_of, dtype="<u4").tobytes()
    body += _float_bytes(mem.rows, precision)
    wmem = state.wmem
    body += struct.pack("<I", wmem.session)
    body += _pack_classifier(wmem.classifier_snapshot, precision)
    body += struct.pack("<II", *wmem.projected_means.shape)
    body += _float_bytes(wmem.projected_means, precision)
    with open(path, "wb") as fh:
        fh.write(_finish_blob(body))


def load_checkpoint(path) -> SessionState:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader, width = _open_blob(blob, KIND_CHECKPOINT)
    session, = reader.unpack("<I", "session index")
    act_code, norm_code, frozen, raw_dim, dim = reader.unpack("<BBBII", "encoder header")
    if act_code >= len(ACTIVATIONS) or norm_code >= len(FEATURE_NORMS):
        raise FormatError("unknown encoder activation or norm code", reader.pos)
    if min(raw_dim, dim) < 1:
        raise DimensionError("degenerate encoder shape", reader.pos)
    enc_w = reader.floats(raw_dim * dim, width, "encoder weights").reshape(raw_dim, dim)
    enc_b = reader.floats(dim, width, "encoder bias")
    enc = EncoderParams(enc_w, enc_b, ACTIVATIONS[act_code], FEATURE_NORMS[norm_code])
    if frozen:
        enc.freeze()
    head = _unpack_classifier(reader, width)
    m_classes, m_dim = reader.unpack("<II", "memory shape")
    class_ids = tuple(int(v) for v in reader.ints(m_classes, "q", "memory class ids"))
    session_of = tuple(int(v) for v in reader.ints(m_classes, "I", "memory sessions"))
    rows = reader.floats(m_classes * m_dim, width, "memory rows").reshape(m_classes, m_dim)
    if m_dim != head.dim:
        raise DimensionError(f"memory dim {m_dim} does not match classifier dim {head.dim}",
                             reader.pos)
    mem = RepresentationMemory(rows, class_ids, session_of)
    w_session, = reader.unpack("<I", "weight memory session")
    snapshot = _unpack_classifier(reader, width)
    p_rows, p_cols = reader.unpack("<II", "projected means shape")
    projected = reader.floats(p_rows * p_cols, width, "projected means").reshape(p_rows, p_cols)
    if p_rows != m_classes or p_cols != snapshot.hidden:
        raise DimensionError("projected means shape disagrees with memory/classifier",
                             reader.pos)
    if reader.pos != len(reader.blob):
        raise FormatError("trailing bytes after payload", reader.pos)
    wmem = WeightMemory(snapshot, projected, w_session)
    return SessionState(int(session), enc, head, mem, wmem)


# --- CSV ingestion ---------------------------------------------------------

def _parse_floats(fields, line_no: int) -> list[float]:
    try:
        values = [float(v) for v in fields]
    except ValueError:
        raise FormatError(f"non-numeric feature value on line {line_no}") from None
    if not all(np.isfinite(values)):
        raise FormatError(f"non-finite feature value on line {line_no}")
    return values


def _parse_int(field: str, what: str, line_no: int) -> int:
    try:
        value = int(field)
    except ValueError:
        raise FormatError(f"non-integer {what} on line {line_no}") from None
    if not -(2 ** 63) <= value < 2 ** 63:
        raise FormatError(f"{what} out of 64-bit range on line {line_no}")
    return value


def load_features_csv(path) -> TokenDataset:
    """Parse either CSV layout (flat features or token groups)."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except (UnicodeDecodeError, csv.Error) as exc:
        raise FormatError(f"not a readable CSV file: {exc}") from None
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError("empty CSV file")
    header = [h.strip() for h in rows[0]]
    if header[:1] != ["label"]:
        raise FormatError("CSV header must start with 'label'")
    grouped = len(header) > 1 and header[1] == "token"
    feature_width = len(header) - (2 if grouped else 1)
    if feature_width < 1:
        raise FormatError("CSV header declares no feature columns")

    if not grouped:
        features, labels = [], []
        for line_no, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise DimensionError(f"line {line_no} has {len(row)} fields, "
                                     f"expected {len(header)}")
            labels.append(_parse_int(row[0], "label", line_no))
            features.append(_parse_floats(row[1:], line_no))
        return TokenDataset(np.asarray(features)[:, None, :], np.asarray(labels))

    examples: list[list[list[float]]] = []
    labels = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DimensionError(f"line {line_no} has {len(row)} fields, "
                                 f"expected {len(header)}")
        label = _parse_int(row[0], "label", line_no)
        token = _parse_int(row[1], "token index", line_no)
        values = _parse_floats(row[2:], line_no)
        if token == 0:
            examples.append([values])
            labels.append(label)
        else:
            if not examples or token != len(examples[-1]):
                raise DimensionError(f"token index {token} out of order on line {line_no}")
            if label != labels[-1]:
                raise FormatError(f"label changes within an example on line {line_no}")
            examples[-1].append(values)
    if not examples:
        raise FormatError("CSV contains a header but no examples")
    sizes = {len(e) for e in examples}
    if len(sizes) != 1:
        raise DimensionError(f"examples have differing token counts {sorted(sizes)}")
    return TokenDataset(np.asarray(examples), np.asarray(labels))


def load_features(path) -> TokenDataset:
    """Load a dataset from the binary format or from CSV (by content)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FORMAT_MAGIC:
        return load_dataset(path)
    return load_features_csv(path)

"""
Canonical text framing for messages between nodes.

A frame is::

    DSI1 <kind> <node_id> <payload-length>\\n<payload>\\n

where ``payload-length`` counts the UTF-8 bytes of the payload.  The payload
holds one line per field, ``<name> <type> <len> <values...>``, in a fixed
order per message kind.  Types are ``int`` and ``real`` scalars (len 1),
``idx`` integer lists, ``vec`` real vectors and ``sym`` symmetric matrices
stored as the row-major lower triangle with ``len`` the matrix dimension.
Reals are written with 17 significant digits so decoding is bit-exact.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from ..errors import ProtocolError

SCHEMA_VERSION = 1
MAGIC = f"DSI{SCHEMA_VERSION}"

# (name, type, required)
SCHEMAS = {
    "SelectedSet": [("n", "int", True), ("E_k", "idx", True)],
    "ModelBroadcast": [("E", "idx", True), ("E_u", "idx", False)],
    "LocalSummary": [
        ("n", "int", True),
        ("E_k", "idx", True),
        ("B", "vec", True),
        ("beta_E", "vec", True),
        ("info", "sym", True),
        ("support", "idx", True),
        ("gamma", "vec", True),
        ("yty", "real", False),
        ("xty", "vec", False),
    ],
    "MleBroadcast": [("beta_E", "vec", True)],
    "ResidualCompensation": [
        ("index", "idx", True),
        ("score_sum", "vec", True),
        ("info_index", "idx", True),
        ("info", "sym", True),
    ],
}


def _real(x):
    return format(float(x), ".17g")


def _coerce(kind, name, typ, value):
    if typ == "int":
        return int(value)
    if typ == "real":
        return float(value)
    arr = np.asarray(value, dtype=int if typ == "idx" else float)
    if typ == "sym":
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ProtocolError(f"{kind}.{name} must be a square matrix")
    elif arr.ndim != 1:
        arr = arr.reshape(-1)
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WireMessage:
    kind: str
    node_id: int
    payload: Dict[str, object] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ProtocolError(f"unsupported schema version {self.schema_version}")
        schema = SCHEMAS.get(self.kind)
        if schema is None:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if int(self.node_id) < 0:
            raise ProtocolError("node_id must be nonnegative")
        known = {name for name, _, _ in schema}
        extra = set(self.payload) - known
        if extra:
            raise ProtocolError(f"{self.kind} has unexpected fields {sorted(extra)}")
        clean = {}
        for name, typ, required in schema:
            if name not in self.payload or self.payload[name] is None:
                if required:
                    raise ProtocolError(f"{self.kind} is missing field {name!r}")
                continue
            clean[name] = _coerce(self.kind, name, typ, self.payload[name])
        object.__setattr__(self, "payload", clean)
        object.__setattr__(self, "node_id", int(self.node_id))

    def __getitem__(self, name):
        return self.payload[name]

    def get(self, name, default=None):
        return self.payload.get(name, default)

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        if (self.kind, self.node_id, self.schema_version) != (other.kind, other.node_id, other.schema_version):
            return False
        if self.payload.keys() != other.payload.keys():
            return False
        for k, v in self.payload.items():
            w = other.payload[k]
            if isinstance(v, np.ndarray):
                if not (isinstance(w, np.ndarray) and v.shape == w.shape and np.array_equal(v, w)):
                    return False
            elif v != w:
                return False
        return True

    __hash__ = None


def _encode_field(name, typ, value):
    if typ == "int":
        return f"{name} int 1 {int(value)}"
    if typ == "real":
        return f"{name} real 1 {_real(value)}"
    if typ == "idx":
        vals = [str(int(v)) for v in value]
        return " ".join([name, "idx", str(len(vals))] + vals)
    if typ == "vec":
        vals = [_real(v) for v in value]
        return " ".join([name, "vec", str(len(vals))] + vals)
    d = value.shape[0]
    vals = [_real(value[i, j]) for i in range(d) for j in range(i + 1)]
    return " ".join([name, "sym", str(d)] + vals)


def encode(msg: WireMessage) -> bytes:
    lines = []
    for name, typ, _ in SCHEMAS[msg.kind]:
        if name in msg.payload:
            lines.append(_encode_field(name, typ, msg.payload[name]))
    body = "\n".join(lines).encode("utf-8")
    header = f"{MAGIC} {msg.kind} {msg.node_id} {len(body)}\n".encode("ascii")
    return header + body + b"\n"


def _parse_field(kind, line, expected):
    parts = line.split(" ")
    if len(parts) < 3:
        raise ProtocolError(f"malformed field line in {kind}: {line[:40]!r}")
    name, typ, n_str = parts[0], parts[1], parts[2]
    if (name, typ) != expected:
        raise ProtocolError(f"{kind}: expected field {expected}, got {(name, typ)}")
    try:
        n = int(n_str)
        vals = parts[3:]
        if typ == "int":
            if n != 1 or len(vals) != 1:
                raise ValueError
            return name, int(vals[0])
        if typ == "real":
            if n != 1 or len(vals) != 1:
                raise ValueError
            return name, float(vals[0])
        if typ == "idx":
            if len(vals) != n:
                raise ValueError
            return name, np.array([int(v) for v in vals], dtype=int)
        if typ == "vec":
            if len(vals) != n:
                raise ValueError
            return name, np.array([float(v) for v in vals], dtype=float)
        if len(vals) != n * (n + 1) // 2:
            raise ValueError
        M = np.zeros((n, n))
        it = iter(vals)
        for i in range(n):
            for j in range(i + 1):
                M[i, j] = M[j, i] = float(next(it))
        return name, M
    except ValueError:
        raise ProtocolError(f"{kind}: field {name!r} has a malformed value list") from None


def decode(data: bytes) -> WireMessage:
    msg, rest = _decode_one(data)
    if rest:
        raise ProtocolError("trailing bytes after frame")
    return msg


def _decode_one(data: bytes):
    nl = data.find(b"\n")
    if nl < 0:
        raise ProtocolError("truncated frame header")
    try:
        header = data[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise ProtocolError("frame header is not ASCII") from None
    if len(header) != 4:
        raise ProtocolError("malformed frame header")
    magic, kind, node_s, len_s = header
    if not magic.startswith("DSI"):
        raise ProtocolError("not a frame")
    if magic != MAGIC:
        raise ProtocolError(f"unsupported schema version {magic[3:]!r}")
    if kind not in SCHEMAS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    try:
        node_id, length = int(node_s), int(len_s)
    except ValueError:
        raise ProtocolError("malformed frame header") from None
    if length < 0:
        raise ProtocolError("negative payload length")
    start, end = nl + 1, nl + 1 + length
    if len(data) < end + 1:
        raise ProtocolError("truncated frame")
    if data[end:end + 1] != b"\n":
        raise ProtocolError("frame terminator missing")
    try:
        body = data[start:end].decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("payload is not UTF-8") from None
    lines = body.split("\n") if body else []
    payload = {}
    schema = SCHEMAS[kind]
    pos = 0
    for line in lines:
        while pos < len(schema) and line.split(" ", 1)[0] != schema[pos][0]:
            if schema[pos][2]:
                raise ProtocolError(f"{kind}: missing required field {schema[pos][0]!r}")
            pos += 1
        if pos >= len(schema):
            raise ProtocolError(f"{kind}: unexpected field line {line[:40]!r}")
        name, value = _parse_field(kind, line, schema[pos][:2])
        payload[name] = value
        pos += 1
    for name, _, required in schema[pos:]:
        if required:
            raise ProtocolError(f"{kind}: missing required field {name!r}")
    return WireMessage(kind=kind, node_id=node_id, payload=payload), data[end + 1:]


def decode_stream(data: bytes) -> List[WireMessage]:
    out = []
    while data:
        msg, data = _decode_one(data)
        out.append(msg)
    return out


def write_frames(path, messages: Iterable[WireMessage]):
    with open(path, "wb") as fh:
        for m in messages:
            fh.write(encode(m))


def read_frames(path) -> List[WireMessage]:
    with open(path, "rb") as fh:
        return decode_stream(fh.read())

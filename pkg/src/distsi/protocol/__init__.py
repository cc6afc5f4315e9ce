"""Message schema and orchestration of the local/central exchanges."""

from .nodes import (
    AggregationRule,
    Channel,
    LocalNode,
    ProtocolResult,
    acting_as,
    aggregate_models,
    central_inference,
    run_protocol,
)
from .wire import SCHEMA_VERSION, WireMessage, decode, decode_stream, encode, read_frames, write_frames

__all__ = [
    "AggregationRule",
    "Channel",
    "LocalNode",
    "ProtocolResult",
    "SCHEMA_VERSION",
    "WireMessage",
    "acting_as",
    "aggregate_models",
    "central_inference",
    "decode",
    "decode_stream",
    "encode",
    "read_frames",
    "run_protocol",
    "write_frames",
]

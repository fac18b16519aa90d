from .base import (CommStats, Endpoint, PayloadKind, Phase, ProtocolError, TransportError,
                   DEFAULT_TIMEOUT)
from .loopback import LoopbackCluster, LoopbackEndpoint
from .tcp import TcpEndpoint
from .wire import snapshot_sync, encode_sparse, decode_sparse

__all__ = [
    "CommStats", "Endpoint", "PayloadKind", "Phase", "ProtocolError", "TransportError",
    "DEFAULT_TIMEOUT", "LoopbackCluster", "LoopbackEndpoint", "TcpEndpoint",
    "snapshot_sync", "encode_sparse", "decode_sparse",
]

"""Full-mesh TCP transport.

Rank ``i`` dials every rank ``j > i``; the handshake is a 4-byte magic, a
2-byte protocol version and the sender's rank. Every message is framed as

    u64 seq | u8 op | u64 length | payload

All-gather sends the local buffer to every peer. All-reduce gathers to rank
0, which sums in rank order and broadcasts the result. Barrier is an
all-gather of empty buffers.
"""
from __future__ import annotations

import socket
import struct
import threading
import time

import numpy as np

from .base import (DEFAULT_TIMEOUT, Endpoint, ProtocolError, TransportError, decode_vector,
                   encode_vector, reduce_rank_order)

MAGIC = b"HSHM"
VERSION = 1
_HELLO = struct.Struct("<4sHI")
_FRAME = struct.Struct("<QBQ")

OP_GATHER, OP_REDUCE, OP_RESULT, OP_BARRIER, OP_ERROR = 1, 2, 3, 4, 5


def _recv_exact(sock: socket.socket, n: int, peer: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except socket.timeout as exc:
            raise TransportError(f"timed out waiting for rank {peer}", peer) from exc
        except OSError as exc:
            raise TransportError(f"connection to rank {peer} failed: {exc}", peer) from exc
        if k == 0:
            raise TransportError(f"rank {peer} disconnected", peer)
        got += k
    return bytes(buf)


class TcpEndpoint(Endpoint):
    def __init__(self, rank: int, addresses: list[tuple[str, int]],
                 timeout: float = DEFAULT_TIMEOUT, connect_timeout: float | None = None):
        super().__init__(rank, len(addresses), timeout)
        self.addresses = [(h, int(p)) for h, p in addresses]
        self.peers: dict[int, socket.socket] = {}
        self._connect(connect_timeout if connect_timeout is not None else timeout)

    # -- setup -------------------------------------------------------------
    def _connect(self, connect_timeout: float):
        n, me = self.size, self.rank
        deadline = time.monotonic() + connect_timeout
        listener = None
        if me > 0:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind(self.addresses[me])
            listener.listen(n)
        try:
            # dial higher ranks
            for peer in range(me + 1, n):
                sock = self._dial(peer, deadline)
                sock.sendall(_HELLO.pack(MAGIC, VERSION, me))
                self._check_hello(_recv_exact(sock, _HELLO.size, peer), peer)
                self.peers[peer] = sock
            # accept lower ranks
            while len(self.peers) < n - 1:
                left = deadline - time.monotonic()
                if left <= 0:
                    missing = [r for r in range(me) if r not in self.peers]
                    raise TransportError(f"rank(s) {missing} never connected", missing[0])
                listener.settimeout(left)
                try:
                    sock, _ = listener.accept()
                except socket.timeout:
                    continue
                sock.settimeout(self.timeout)
                magic, version, peer = _HELLO.unpack(_recv_exact(sock, _HELLO.size, -1))
                self._check_hello(_HELLO.pack(magic, version, peer), peer)
                if not 0 <= peer < me or peer in self.peers:
                    sock.close()
                    raise ProtocolError(f"unexpected hello from rank {peer}", peer)
                sock.sendall(_HELLO.pack(MAGIC, VERSION, me))
                self.peers[peer] = sock
        finally:
            if listener is not None:
                listener.close()
        for sock in self.peers.values():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(self.timeout)

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        last = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(self.addresses[peer], timeout=self.timeout)
                sock.settimeout(self.timeout)
                return sock
            except OSError as exc:
                last = exc
                time.sleep(0.05)
        raise TransportError(f"could not reach rank {peer}: {last}", peer)

    @staticmethod
    def _check_hello(raw: bytes, peer: int):
        magic, version, _ = _HELLO.unpack(raw)
        if magic != MAGIC:
            raise ProtocolError(f"bad handshake magic from rank {peer}: {magic!r}", peer)
        if version != VERSION:
            raise ProtocolError(f"rank {peer} speaks protocol v{version}, expected v{VERSION}",
                                peer)

    # -- framing -----------------------------------------------------------
    def _send(self, peer: int, seq: int, op: int, payload: bytes):
        try:
            self.peers[peer].sendall(_FRAME.pack(seq, op, len(payload)) + payload)
        except OSError as exc:
            raise TransportError(f"send to rank {peer} failed: {exc}", peer) from exc

    def _recv(self, peer: int, seq: int, ops: tuple[int, ...]) -> tuple[int, bytes]:
        sock = self.peers[peer]
        rseq, op, length = _FRAME.unpack(_recv_exact(sock, _FRAME.size, peer))
        payload = _recv_exact(sock, length, peer) if length else b""
        if op == OP_ERROR:
            raise ProtocolError(payload.decode("utf-8", "replace"), peer)
        if rseq != seq:
            raise ProtocolError(f"rank {peer} is at collective #{rseq}, this node at #{seq}",
                                peer)
        if op not in ops:
            raise ProtocolError(f"rank {peer} sent op {op} for collective #{seq}, "
                                f"expected {ops}", peer)
        return op, payload

    def _send_all_async(self, seq: int, op: int, payload: bytes, peers) -> list:
        errors: list = []

        def push(p):
            try:
                self._send(p, seq, op, payload)
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=push, args=(p,), daemon=True) for p in peers]
        for t in threads:
            t.start()
        return threads, errors

    @staticmethod
    def _join(threads, errors):
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    # -- collectives -------------------------------------------------------
    def _exchange(self, seq: int, op: int, payload: bytes) -> list[bytes]:
        others = [p for p in range(self.size) if p != self.rank]
        threads, errors = self._send_all_async(seq, op, payload, others)
        parts: list[bytes] = [b""] * self.size
        parts[self.rank] = payload
        try:
            for p in others:
                parts[p] = self._recv(p, seq, (op,))[1]
        finally:
            self._join(threads, errors)
        return parts

    def _gather(self, seq, payload):
        return self._exchange(seq, OP_GATHER, payload)

    def _barrier(self, seq):
        self._exchange(seq, OP_BARRIER, b"")

    def _reduce(self, seq, vec):
        if self.size == 1:
            return np.array(vec, copy=True)
        if self.rank != 0:
            self._send(0, seq, OP_REDUCE, encode_vector(vec))
            _, payload = self._recv(0, seq, (OP_RESULT,))
            return decode_vector(payload)
        vecs = [vec]
        for p in range(1, self.size):
            vecs.append(decode_vector(self._recv(p, seq, (OP_REDUCE,))[1]))
        for r, v in enumerate(vecs):
            if v.shape != vec.shape or v.dtype != vec.dtype:
                msg = (f"all_reduce_sum: rank {r} supplied {v.shape[0]} x {v.dtype}, "
                       f"rank 0 supplied {vec.shape[0]} x {vec.dtype}")
                for p in range(1, self.size):
                    try:
                        self._send(p, seq, OP_ERROR, msg.encode())
                    except TransportError:
                        pass
                raise ProtocolError(msg, r)
        out = reduce_rank_order(vecs)
        blob = encode_vector(out)
        threads, errors = self._send_all_async(seq, OP_RESULT, blob, range(1, self.size))
        self._join(threads, errors)
        return out

    def close(self):
        for sock in self.peers.values():
            try:
                sock.close()
            except OSError:
                pass
        self.peers.clear()


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()

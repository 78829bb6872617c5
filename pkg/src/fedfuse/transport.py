"""Wire protocol for weight exchange, plus in-process and TCP transports.

Frame layout (all integers little-endian):

    magic "FME1" | kind u8 | round u32 | client_id u32 | payload_len u32 | payload

Weight blobs are self-describing: a u16 format version, one record per
tensor (u16 name length, name bytes, u8 rank, u32 dims, f32 row-major
data), and a trailing CRC32 over everything before it. Tensor order is
preserved, so identical weights serialize to identical bytes.
"""

import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .nn.model import ModelWeights

MAGIC = b"FME1"
HEADER = struct.Struct("<4sBIII")
DEFAULT_PORT = 7878
MAX_PAYLOAD = 256 * 1024 * 1024
BLOB_VERSION = 1


class Kind(IntEnum):
    HELLO = 1
    WELCOME = 2
    GLOBAL_MODEL = 3
    UPDATE = 4
    ROUND_DONE = 5
    SHUTDOWN = 6
    ERROR = 7


class TransportError(Exception):
    pass


class PayloadTooLarge(TransportError):
    pass


class MalformedFrame(TransportError):
    pass


class UnknownKind(MalformedFrame):
    pass


class Truncated(TransportError):
    pass


class CrcMismatch(TransportError):
    pass


class NonFiniteValue(ValueError):
    pass


class ChannelClosed(TransportError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    round: int
    client_id: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.round < 2**32 or not 0 <= self.client_id < 2**32:
            raise ValueError("round and client_id must fit in u32")


def encode_message(msg: Message, max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(msg.payload) > max_payload:
        raise PayloadTooLarge(f"payload of {len(msg.payload)} bytes exceeds {max_payload}")
    return (
        HEADER.pack(MAGIC, int(msg.kind), msg.round, msg.client_id, len(msg.payload))
        + msg.payload
    )


def decode_message(data: bytes, max_payload: int = MAX_PAYLOAD) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, rest = _split_frame(data, max_payload)
    if msg is None:
        raise Truncated(f"need more bytes, have {len(data)}")
    if rest:
        raise MalformedFrame(f"{len(rest)} trailing bytes after frame")
    return msg


def _split_frame(data: bytes, max_payload: int = MAX_PAYLOAD):
    """Try to peel one frame off the front of ``data``.

    Returns (Message, remainder), or (None, data) when more bytes are
    needed. Never partially consumes.
    """
    if len(data) < HEADER.size:
        return None, data
    magic, kind, rnd, client_id, plen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    if plen > max_payload:
        raise PayloadTooLarge(f"declared payload of {plen} bytes exceeds {max_payload}")
    end = HEADER.size + plen
    if len(data) < end:
        return None, data
    return Message(kind, rnd, client_id, bytes(data[HEADER.size : end])), data[end:]


def serialize_weights(weights) -> bytes:
    """Pack a name -> array mapping into a WeightBlob (f32 storage).

    Accepts anything with ``.items()`` yielding (name, ndarray) in a stable
    order. Zero-rank arrays are stored as a single-element vector.
    """
    parts = [struct.pack("<H", BLOB_VERSION)]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"tensor {name!r} contains non-finite values")
        data = np.ascontiguousarray(arr, dtype="<f4")
        shape = data.shape if data.ndim else (1,)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {len(raw)} bytes")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(data.tobytes())
    crc = 0
    for part in parts:
        crc = zlib.crc32(part, crc)
    parts.append(struct.pack("<I", crc))
    # single join keeps the peak at roughly two blob copies
    return b"".join(parts)


def deserialize_weights(blob) -> ModelWeights:
    """Inverse of serialize_weights. The CRC is checked before any parsing.

    Accepts any bytes-like buffer. The returned arrays are read-only views
    into it, so a ~20 MB blob is never copied here; consumers copy before
    mutating, and the buffer stays alive as long as the views do.
    """
    blob = memoryview(blob)
    if len(blob) < 6:
        raise Truncated(f"blob of {len(blob)} bytes is too short")
    body = blob[:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise CrcMismatch("weight blob checksum mismatch")
    (version,) = struct.unpack_from("<H", body)
    if version != BLOB_VERSION:
        raise MalformedFrame(f"unsupported blob format version {version}")
    off = 2
    arrays: dict[str, np.ndarray] = {}
    while off < len(body):
        try:
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            if len(body) < off + name_len:
                raise Truncated("truncated tensor name")
            name = bytes(body[off : off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
        except struct.error as exc:
            raise Truncated("truncated tensor record") from exc
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = count * 4
        if off + nbytes > len(body):
            raise Truncated(f"tensor {name!r} data truncated")
        data = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        # read-only view into the blob; consumers copy before mutating
        arrays[name] = data.reshape(dims)
        off += nbytes
    return ModelWeights(arrays)


# ---------------------------------------------------------------------------
# In-process loopback transport


class _Channel:
    """One-direction buffered message channel with close semantics."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self._closed = threading.Event()

    def put(self, item):
        if self._closed.is_set():
            raise ChannelClosed("channel is closed")
        self._q.put(item)

    def get(self, timeout=None):
        if self._closed.is_set() and self._q.empty():
            raise ChannelClosed("channel is closed")
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("receive timed out") from None
        if item is _CLOSED:
            self._closed.set()
            self._q.put(_CLOSED)
            raise ChannelClosed("channel is closed")
        return item

    def close(self):
        self._closed.set()
        self._q.put(_CLOSED)


_CLOSED = object()


class LoopbackServerEnd:
    def __init__(self, transport):
        self._t = transport

    def accept_all(self):
        # queue channels exist up front; there is nothing to accept
        pass

    def send(self, client_id: int, msg: Message):
        encode_message(msg)  # enforce frame invariants even in process
        self._t.to_client[client_id].put(msg)

    def broadcast(self, make_msg):
        for cid in self._t.to_client:
            self.send(cid, make_msg(cid))

    def recv(self, timeout=None) -> Message:
        return self._t.to_server.get(timeout=timeout)

    def close(self):
        for ch in self._t.to_client.values():
            ch.close()
        self._t.to_server.close()


class LoopbackClientEnd:
    def __init__(self, transport, client_id: int):
        self._t = transport
        self.client_id = client_id

    def send(self, msg: Message):
        encode_message(msg)
        self._t.to_server.put(msg)

    def recv(self, timeout=None) -> Message:
        return self._t.to_client[self.client_id].get(timeout=timeout)

    def close(self):
        self._t.to_client[self.client_id].close()


class LoopbackTransport:
    """Queue-backed transport with socket-equivalent delivery semantics:
    ordered, reliable, whole messages, buffered until the receiver reads."""

    def __init__(self, n_clients: int):
        if n_clients < 1:
            raise ValueError("need at least one client")
        self.to_server = _Channel()
        self.to_client = {cid: _Channel() for cid in range(n_clients)}

    def server_end(self) -> LoopbackServerEnd:
        return LoopbackServerEnd(self)

    def client_end(self, client_id: int) -> LoopbackClientEnd:
        if client_id not in self.to_client:
            raise ValueError(f"unknown client id {client_id}")
        return LoopbackClientEnd(self, client_id)


# ---------------------------------------------------------------------------
# TCP transport


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    # preallocated target; payloads run to ~20 MB and growth realloc would
    # transiently double that
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except socket.timeout:
            raise TimeoutError("receive timed out") from None
        except OSError as exc:
            raise ChannelClosed(f"socket error: {exc}") from exc
        if not k:
            raise ChannelClosed("peer closed the connection")
        got += k
    view.release()
    return bytes(buf)


def read_frame(sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> Message:
    header = _recv_exact(sock, HEADER.size)
    magic, kind, rnd, client_id, plen = HEADER.unpack(header)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    if plen > max_payload:
        raise PayloadTooLarge(f"declared payload of {plen} bytes exceeds {max_payload}")
    payload = _recv_exact(sock, plen) if plen else b""
    return Message(kind, rnd, client_id, payload)


def write_frame(sock: socket.socket, msg: Message):
    if len(msg.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    header = HEADER.pack(MAGIC, int(msg.kind), msg.round, msg.client_id, len(msg.payload))
    try:
        # two writes instead of one concatenation; payloads run to ~19 MB
        sock.sendall(header)
        if msg.payload:
            sock.sendall(msg.payload)
    except OSError as exc:
        raise ChannelClosed(f"socket error: {exc}") from exc


class TcpServerEnd:
    """Accepts the expected clients, then exposes the same send/recv surface
    as the loopback server end. One reader thread per connection feeds a
    shared inbound queue."""

    def __init__(self, host: str, port: int, expected_clients: int, accept_timeout: float = 120.0):
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(accept_timeout)
        self._conns: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._inbound: _Channel = _Channel()
        self._threads: list[threading.Thread] = []
        self._expected = expected_clients
        self.port = self._listener.getsockname()[1]

    def accept_all(self):
        """Block until every expected client has connected and said hello."""
        while len(self._conns) < self._expected:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise TimeoutError(
                    f"only {len(self._conns)} of {self._expected} clients connected"
                ) from None
            conn.settimeout(None)
            hello = read_frame(conn)
            if hello.kind is not Kind.HELLO:
                conn.close()
                raise MalformedFrame(f"expected HELLO, got {hello.kind.name}")
            cid = hello.client_id
            if cid in self._conns:
                conn.close()
                raise MalformedFrame(f"duplicate client id {cid}")
            self._conns[cid] = conn
            self._locks[cid] = threading.Lock()
            self._inbound.put(hello)
            t = threading.Thread(target=self._pump, args=(cid, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _pump(self, cid: int, conn: socket.socket):
        try:
            while True:
                self._inbound.put(read_frame(conn))
        except (ChannelClosed, TransportError):
            pass

    def send(self, client_id: int, msg: Message):
        conn = self._conns.get(client_id)
        if conn is None:
            raise ChannelClosed(f"no connection for client {client_id}")
        with self._locks[client_id]:
            write_frame(conn, msg)

    def broadcast(self, make_msg):
        for cid in sorted(self._conns):
            self.send(cid, make_msg(cid))

    def recv(self, timeout=None) -> Message:
        return self._inbound.get(timeout=timeout)

    def close(self):
        for conn in self._conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._listener.close()
        self._inbound.close()


class TcpClientEnd:
    """Retries the connect until the deadline so clients may start before
    the server has bound its listener."""

    def __init__(self, host: str, port: int, client_id: int, connect_timeout: float = 30.0):
        self.client_id = client_id
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=5.0)
                break
            except OSError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.2)
        self._sock.settimeout(None)

    def send(self, msg: Message):
        write_frame(self._sock, msg)

    def recv(self, timeout=None) -> Message:
        self._sock.settimeout(timeout)
        try:
            return read_frame(self._sock)
        finally:
            self._sock.settimeout(None)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

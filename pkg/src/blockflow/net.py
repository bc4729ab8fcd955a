"""Signed, header-first framed messages for diagram inputs and outputs.

Wire layout, all integers little-endian::

    magic     4s   b"LDSH"
    version   u8   1
    origin    u32
    dest      u32
    type_id   u16
    pay_len   u32
    sig_len   u16
    signature sig_len bytes
    payload   pay_len bytes

The signature is an HMAC-SHA256 over the 21-byte header followed by the
payload. Signers and verifiers are small objects with ``sign`` and
``verify`` methods, so another scheme can be dropped in without touching
the layout.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import queue
import socket
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"LDSH"
VERSION = 1
HEADER = struct.Struct("<4sBIIHIH")
HEADER_SIZE = HEADER.size  # 21
MAX_DATAGRAM = 65507


class FrameError(Exception):
    """Base class for frames that must be dropped."""


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownType(FrameError):
    pass


class SizeMismatch(FrameError):
    pass


class SignatureInvalid(FrameError):
    pass


class AddressMismatch(FrameError):
    pass


class PayloadSizeMismatch(ValueError):
    """Raised on the sending side when a payload does not fit its type."""


class UnknownKey(KeyError):
    pass


# ---------------------------------------------------------------------------
# payload types


@dataclass(frozen=True)
class PayloadType:
    type_id: int
    shape: Tuple[int, ...]  # () scalar, (n,) vector, (n, m) matrix, None for empty

    @property
    def count(self) -> int:
        if self.shape is None:
            return 0
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def size(self) -> int:
        return 8 * self.count

    def encode(self, value) -> bytes:
        if self.shape is None:
            if value is not None and np.size(value) != 0:
                raise PayloadSizeMismatch(f"type {self.type_id} carries no payload")
            return b""
        arr = np.asarray(value, dtype="<f8")
        if arr.size != self.count or (arr.ndim and arr.shape != self.shape and arr.ndim != 1):
            raise PayloadSizeMismatch(f"type {self.type_id} expects shape {self.shape}, got {arr.shape}")
        return arr.reshape(-1).tobytes()

    def decode(self, data: bytes):
        if len(data) != self.size:
            raise SizeMismatch(f"type {self.type_id} payload is {self.size} bytes, got {len(data)}")
        if self.shape is None:
            return None
        arr = np.frombuffer(data, dtype="<f8").astype(float)
        if self.shape == ():
            return float(arr[0])
        return arr.reshape(self.shape)


class TypeRegistry:
    """Message type id to payload shape. Ids 0 (empty) and 1 (scalar) are built in."""

    def __init__(self):
        self._types: Dict[int, PayloadType] = {}
        self.register(0, None)
        self.register(1, ())

    def register(self, type_id: int, shape) -> PayloadType:
        if not 0 <= type_id <= 0xFFFF:
            raise ValueError("type id must fit in 16 bits")
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if len(shape) > 2 or any(d < 1 for d in shape):
                raise ValueError(f"unsupported payload shape {shape}")
        existing = self._types.get(type_id)
        if existing is not None and existing.shape != shape:
            raise ValueError(f"type id {type_id} already registered with shape {existing.shape}")
        pt = PayloadType(type_id, shape)
        self._types[type_id] = pt
        return pt

    def vector(self, type_id: int, n: int) -> PayloadType:
        return self.register(type_id, (n,))

    def matrix(self, type_id: int, n: int, m: int) -> PayloadType:
        return self.register(type_id, (n, m))

    def __getitem__(self, type_id: int) -> PayloadType:
        try:
            return self._types[type_id]
        except KeyError:
            raise UnknownType(f"message type {type_id} is not registered") from None

    def __contains__(self, type_id) -> bool:
        return type_id in self._types

    def __iter__(self):
        return iter(sorted(self._types.values(), key=lambda t: t.type_id))


DEFAULT_TYPES = TypeRegistry()


# ---------------------------------------------------------------------------
# signatures


class HmacSigner:
    def __init__(self, key: bytes):
        if not key:
            raise ValueError("empty key")
        self._key = bytes(key)

    def sign(self, message: bytes) -> bytes:
        return hmac.new(self._key, message, hashlib.sha256).digest()

    def verify(self, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(message), signature)


class KeyRing:
    """Named keys; the verifier accepts a signature made with any trusted key."""

    def __init__(self, keys: Optional[Dict[str, bytes]] = None):
        self._keys: Dict[str, HmacSigner] = {}
        for name, key in (keys or {}).items():
            self.add(name, key)

    def add(self, handle: str, key: bytes) -> None:
        self._keys[handle] = HmacSigner(key)

    def signer(self, handle: str) -> HmacSigner:
        try:
            return self._keys[handle]
        except KeyError:
            raise UnknownKey(handle) from None

    def sign(self, handle: str, message: bytes) -> bytes:
        return self.signer(handle).sign(message)

    def verify(self, message: bytes, signature: bytes, handle: Optional[str] = None) -> bool:
        if handle is not None:
            return self.signer(handle).verify(message, signature)
        return any(s.verify(message, signature) for s in self._keys.values())


# ---------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class Message:
    origin: int
    destination: int
    type_id: int
    payload: object


def pack_frame(origin: int, destination: int, type_id: int, payload: bytes, signature: bytes,
               magic: bytes = MAGIC, version: int = VERSION, payload_length: Optional[int] = None) -> bytes:
    """Assemble raw frame bytes without any checks (useful for crafting bad frames)."""
    plen = len(payload) if payload_length is None else payload_length
    header = HEADER.pack(magic, version, origin, destination, type_id, plen, len(signature))
    return header + signature + payload


def signed_region(header: bytes, payload: bytes) -> bytes:
    return header + payload


def encode_frame(origin: int, destination: int, type_id: int, payload, signer,
                 types: TypeRegistry = DEFAULT_TYPES) -> bytes:
    pt = types[type_id]
    body = pt.encode(payload)
    probe = HEADER.pack(MAGIC, VERSION, origin, destination, type_id, len(body), 0)
    sig = signer.sign(signed_region(probe, body))
    header = HEADER.pack(MAGIC, VERSION, origin, destination, type_id, len(body), len(sig))
    return header + sig + body


def decode_frame(data: bytes, verifier, types: TypeRegistry = DEFAULT_TYPES,
                 local_address: Optional[int] = None) -> Message:
    """Parse and authenticate one frame, raising a :class:`FrameError` subclass if it is bad."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        if not MAGIC.startswith(data[:4]):
            raise BadMagic("bad magic")
        raise SizeMismatch(f"frame is {len(data)} bytes, shorter than the header")
    magic, version, origin, dest, type_id, plen, slen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic("bad magic")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    pt = types[type_id]
    if plen != pt.size:
        raise SizeMismatch(f"type {type_id} payload is {pt.size} bytes, header declares {plen}")
    if len(data) != HEADER_SIZE + slen + plen:
        raise SizeMismatch(f"frame is {len(data)} bytes, header declares {HEADER_SIZE + slen + plen}")
    sig = data[HEADER_SIZE:HEADER_SIZE + slen]
    body = data[HEADER_SIZE + slen:]
    probe = HEADER.pack(magic, version, origin, dest, type_id, plen, 0)
    if not verifier.verify(signed_region(probe, body), sig):
        raise SignatureInvalid("signature does not verify")
    if local_address is not None and dest != local_address:
        raise AddressMismatch(f"frame for {dest}, this endpoint is {local_address}")
    return Message(origin, dest, type_id, pt.decode(body))


# ---------------------------------------------------------------------------
# transports


class InMemoryTransport:
    """One end of an in-process datagram pipe."""

    def __init__(self):
        self._inbox: "queue.Queue[bytes]" = queue.Queue()
        self.peer: Optional["InMemoryTransport"] = None

    @classmethod
    def pair(cls):
        a, b = cls(), cls()
        a.peer, b.peer = b, a
        return a, b

    def send(self, datagram: bytes) -> None:
        if self.peer is None:
            raise ConnectionError("transport is not connected")
        self.peer._inbox.put(bytes(datagram))

    def recv(self, timeout: Optional[float] = None) -> Optional[bytes]:
        try:
            return self._inbox.get(timeout=timeout) if timeout else self._inbox.get_nowait()
        except queue.Empty:
            return None

    def close(self) -> None:
        self.peer = None


class UdpTransport:
    """One frame per UDP datagram."""

    def __init__(self, bind: Tuple[str, int] = ("127.0.0.1", 0), peer: Optional[Tuple[str, int]] = None):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.peer = peer
        self.last_sender = None

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def send(self, datagram: bytes, to: Optional[Tuple[str, int]] = None) -> None:
        target = to or self.peer
        if target is None:
            raise ConnectionError("no peer address")
        self.sock.sendto(datagram, target)

    def recv(self, timeout: Optional[float] = None) -> Optional[bytes]:
        self.sock.settimeout(timeout if timeout else 0.0)
        try:
            data, self.last_sender = self.sock.recvfrom(MAX_DATAGRAM)
        except (socket.timeout, BlockingIOError):
            return None
        return data

    def close(self) -> None:
        self.sock.close()


class Endpoint:
    """Publishes and receives frames; undecodable frames are dropped and counted."""

    def __init__(self, transport, address: int, signer, verifier=None,
                 types: TypeRegistry = DEFAULT_TYPES, filter_address: bool = True):
        self.transport = transport
        self.address = address
        self.signer = signer
        self.verifier = verifier if verifier is not None else signer
        self.types = types
        self.filter_address = filter_address
        self.drops: Counter = Counter()

    def publish(self, destination: int, type_id: int, payload=None) -> None:
        self.transport.send(encode_frame(self.address, destination, type_id, payload, self.signer, self.types))

    def receive(self, timeout: Optional[float] = None) -> Optional[Message]:
        """Next valid message, or ``None`` once the transport has nothing more."""
        while True:
            data = self.transport.recv(timeout)
            if data is None:
                return None
            try:
                return decode_frame(data, self.verifier, self.types,
                                    self.address if self.filter_address else None)
            except FrameError as exc:
                self.drops[type(exc).__name__] += 1
                logger.debug("dropped frame: %s", exc)

    def drain(self, timeout: Optional[float] = None) -> Iterator[Message]:
        while True:
            msg = self.receive(timeout)
            if msg is None:
                return
            yield msg


def serve_echo(transport: UdpTransport, address: int, signer, types: TypeRegistry = DEFAULT_TYPES,
               max_frames: Optional[int] = None, timeout: Optional[float] = None,
               on_message: Optional[Callable[[Message], None]] = None) -> Counter:
    """Echo each valid frame back to its sender with origin and destination swapped."""
    ep = Endpoint(transport, address, signer, types=types)
    served = 0
    while max_frames is None or served < max_frames:
        msg = ep.receive(timeout)
        if msg is None:
            if timeout:
                break
            continue
        if on_message:
            on_message(msg)
        frame = encode_frame(address, msg.origin, msg.type_id, msg.payload, signer, types)
        transport.send(frame, to=transport.last_sender)
        served += 1
    return ep.drops

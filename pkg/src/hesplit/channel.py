"""Signed, timestamped, sequence-numbered framing with public-key sealing.

Frame layout (little-endian)::

    len:u32 | type:u8 | t:u64 (unix ms) | seq:u64 | payload | sig[64]

``len`` counts every byte after itself.  ``sig`` is an Ed25519 signature over
``SHA-256(type | t | seq | payload)``.  Sealed payloads use X25519 + HKDF-SHA256
+ AES-256-GCM: ``eph_pub[32] | nonce[12] | ciphertext | tag[16]``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

FRESHNESS_WINDOW_S = 60.0
SIG_LEN = 64
HEADER = struct.Struct("<IBQQ")
FRAME_OVERHEAD = HEADER.size + SIG_LEN  # 85
SEAL_OVERHEAD = 32 + 12 + 16  # 60
MAX_FRAME = 1 << 31


class MsgType(enum.IntEnum):
    SYNC = 1
    M1_SETUP = 10
    M2_EVAL = 11
    M3_GRAD = 12
    M4_GRADPRIME = 13
    TRAIN_AM = 20
    TRAIN_OUT = 21
    TRAIN_GRAD_OUT = 22
    TRAIN_GRAD_AM = 23
    TRAIN_AM_HE = 30
    TRAIN_OUT_HE = 31
    TRAIN_GRAD_OUT_HE = 32
    TRAIN_GRAD_AM_HE = 33
    INFER_AM = 40
    INFER_OUT = 41
    INFER_AM_HE = 42
    INFER_OUT_HE = 43
    BYE = 60


# payloads carried under PKE sealing; HE ciphertexts and SYNC travel signed only
SEALED_TYPES = frozenset({
    MsgType.M3_GRAD, MsgType.M4_GRADPRIME,
    MsgType.TRAIN_AM, MsgType.TRAIN_OUT, MsgType.TRAIN_GRAD_OUT, MsgType.TRAIN_GRAD_AM,
    MsgType.TRAIN_GRAD_OUT_HE, MsgType.TRAIN_GRAD_AM_HE,
    MsgType.INFER_AM, MsgType.INFER_OUT,
})


class ProtocolAbort(Exception):
    """Any verification failure: the receiving party outputs bottom and stops."""


class BadSignature(ProtocolAbort):
    pass


class StaleTimestamp(ProtocolAbort):
    pass


class ReplayedSequence(ProtocolAbort):
    pass


class MalformedFrame(ProtocolAbort):
    pass


class ConnectionClosed(MalformedFrame):
    """The peer closed the stream at a frame boundary."""


class SyncMismatch(ProtocolAbort):
    pass


class UnexpectedMessage(ProtocolAbort):
    pass


# ---------------------------------------------------------------------------
# keys


def _seed_bytes(rng, n: int = 32) -> bytes:
    if rng is None:
        return os.urandom(n)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.bytes(n)


@dataclass(frozen=True)
class PublicKeys:
    pke: bytes  # X25519 public key
    ver: bytes  # Ed25519 verification key

    def to_bytes(self) -> bytes:
        return self.pke + self.ver

    @classmethod
    def from_bytes(cls, b: bytes) -> "PublicKeys":
        if len(b) != 64:
            raise ValueError("public key blob must be 64 bytes")
        return cls(b[:32], b[32:])


@dataclass
class KeyRing:
    pke_sk: X25519PrivateKey
    sign_sk: Ed25519PrivateKey
    peer: PublicKeys | None = None

    @property
    def public(self) -> PublicKeys:
        raw = serialization.Encoding.Raw, serialization.PublicFormat.Raw
        return PublicKeys(self.pke_sk.public_key().public_bytes(*raw),
                          self.sign_sk.public_key().public_bytes(*raw))

    def with_peer(self, peer: PublicKeys) -> "KeyRing":
        return KeyRing(self.pke_sk, self.sign_sk, peer)

    def private_bytes(self) -> bytes:
        raw = (serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
               serialization.NoEncryption())
        return self.pke_sk.private_bytes(*raw) + self.sign_sk.private_bytes(*raw)

    @classmethod
    def from_private_bytes(cls, b: bytes, peer: PublicKeys | None = None) -> "KeyRing":
        if len(b) != 64:
            raise ValueError("private key blob must be 64 bytes")
        return cls(X25519PrivateKey.from_private_bytes(b[:32]),
                   Ed25519PrivateKey.from_private_bytes(b[32:]), peer)

    def save(self, directory, name: str) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        secret = d / f"{name}.key"
        secret.write_bytes(self.private_bytes())
        secret.chmod(0o600)
        (d / f"{name}.pub").write_bytes(self.public.to_bytes())

    @classmethod
    def load(cls, directory, name: str, peer_name: str | None = None) -> "KeyRing":
        d = Path(directory)
        peer = PublicKeys.from_bytes((d / f"{peer_name}.pub").read_bytes()) if peer_name else None
        return cls.from_private_bytes((d / f"{name}.key").read_bytes(), peer)


def setup_keys(rng=None) -> KeyRing:
    """Fresh PKE and signing key pairs; an integer or Generator makes them reproducible."""
    return KeyRing(X25519PrivateKey.from_private_bytes(_seed_bytes(rng)),
                   Ed25519PrivateKey.from_private_bytes(_seed_bytes(rng)))


def paired_keys(seed=None) -> tuple[KeyRing, KeyRing]:
    """Client and server rings that already know each other's public keys."""
    if seed is None:
        kc, ks = setup_keys(), setup_keys()
    else:
        kc, ks = setup_keys(seed * 2 + 1), setup_keys(seed * 2 + 2)
    return kc.with_peer(ks.public), ks.with_peer(kc.public)


def sign(ring: KeyRing, data: bytes) -> bytes:
    return ring.sign_sk.sign(hashlib.sha256(data).digest())


def verify(ver: bytes, data: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(ver).verify(sig, hashlib.sha256(data).digest())
        return True
    except (InvalidSignature, ValueError):
        return False


def _kdf(shared: bytes, eph: bytes, recipient: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, None, b"hesplit-seal" + eph + recipient).derive(shared)


def seal_bytes(recipient_pke: bytes, data: bytes) -> bytes:
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    key = _kdf(eph.exchange(X25519PublicKey.from_public_bytes(recipient_pke)), eph_pub, recipient_pke)
    nonce = os.urandom(12)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, data, None)


def open_bytes(ring: KeyRing, blob: bytes) -> bytes:
    if len(blob) < SEAL_OVERHEAD:
        raise MalformedFrame("sealed payload too short")
    eph_pub, nonce, body = blob[:32], blob[32:44], blob[44:]
    own = ring.public.pke
    try:
        key = _kdf(ring.pke_sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub, own)
        return AESGCM(key).decrypt(nonce, body, None)
    except (InvalidTag, ValueError):
        raise MalformedFrame("sealed payload failed to open") from None


# ---------------------------------------------------------------------------
# frames


def signed_digest(msg_type: int, t_ms: int, seq: int, payload: bytes) -> bytes:
    return hashlib.sha256(struct.pack("<BQQ", msg_type, t_ms, seq) + payload).digest()


@dataclass
class WireMessage:
    msg_type: int
    timestamp_ms: int
    seq: int
    payload: bytes
    signature: bytes = b""

    def digest(self) -> bytes:
        return signed_digest(self.msg_type, self.timestamp_ms, self.seq, self.payload)

    def to_bytes(self) -> bytes:
        body_len = HEADER.size - 4 + len(self.payload) + SIG_LEN
        return HEADER.pack(body_len, self.msg_type, self.timestamp_ms, self.seq) + self.payload + self.signature

    @classmethod
    def from_bytes(cls, frame: bytes) -> "WireMessage":
        if len(frame) < FRAME_OVERHEAD:
            raise MalformedFrame(f"frame of {len(frame)} bytes is shorter than the {FRAME_OVERHEAD}-byte minimum")
        body_len, mt, t, seq = HEADER.unpack_from(frame)
        if body_len != len(frame) - 4:
            raise MalformedFrame("length field disagrees with frame size")
        return cls(mt, t, seq, bytes(frame[HEADER.size:-SIG_LEN]), bytes(frame[-SIG_LEN:]))


def frame_size(payload_len: int) -> int:
    return FRAME_OVERHEAD + payload_len


class ReplayCache:
    """Digests of accepted frames, shared by every session of one endpoint.

    Entries older than the freshness window can be dropped: such frames fail
    the timestamp check anyway.
    """

    def __init__(self, window_s: float = FRESHNESS_WINDOW_S):
        self.window_ms = int(window_s * 1000)
        self._seen: OrderedDict[bytes, int] = OrderedDict()
        self._lock = threading.Lock()

    def check_and_add(self, digest: bytes, t_ms: int, now_ms: int) -> bool:
        with self._lock:
            while self._seen:
                d, ts = next(iter(self._seen.items()))
                if now_ms - ts <= 2 * self.window_ms:
                    break
                self._seen.popitem(last=False)
            if digest in self._seen:
                return False
            self._seen[digest] = t_ms
            return True


@dataclass
class CommMeter:
    sent: int = 0
    received: int = 0
    epochs: list = field(default_factory=list)
    _mark: tuple = (0, 0)

    def end_epoch(self) -> tuple[int, int]:
        d = (self.sent - self._mark[0], self.received - self._mark[1])
        self.epochs.append(d)
        self._mark = (self.sent, self.received)
        return d

    def current(self) -> tuple[int, int]:
        return self.sent - self._mark[0], self.received - self._mark[1]

    def discard(self) -> None:
        """Forget traffic since the last mark (e.g. evaluation between epochs)."""
        self._mark = (self.sent, self.received)


class Session:
    """One connection's sending and receiving state (sequence numbers, clock, meter).

    ``transport`` needs ``sendall(bytes)`` and ``recv(n)``; a connected
    socket works.  ``clock`` returns seconds since the epoch.
    """

    def __init__(self, transport, keys: KeyRing, role: str = "client", *, clock=time.time,
                 window_s: float = FRESHNESS_WINDOW_S, replay_cache: ReplayCache | None = None,
                 max_frame: int = MAX_FRAME, log=None):
        if keys.peer is None:
            raise ValueError("key ring lacks the peer's public keys")
        self.transport = transport
        self.keys = keys
        self.role = role
        self.clock = clock
        self.window_ms = int(window_s * 1000)
        self.replay_cache = replay_cache
        self.max_frame = max_frame
        self.next_seq = 1
        self.last_seq = 0
        self.meter = CommMeter()
        self.config: dict | None = None
        self.log = log  # optional list collecting (direction, type, size)

    def now_ms(self) -> int:
        return int(self.clock() * 1000)

    # ---- build / check ----------------------------------------------------
    def seal(self, msg_type: int, payload: bytes) -> WireMessage:
        """Sign (and, for sealed types, encrypt to the peer) one outgoing message."""
        if msg_type in SEALED_TYPES:
            payload = seal_bytes(self.keys.peer.pke, payload)
        if frame_size(len(payload)) - 4 > self.max_frame:
            raise MalformedFrame(f"payload of {len(payload)} bytes exceeds the frame limit")
        msg = WireMessage(int(msg_type), self.now_ms(), self.next_seq, payload)
        msg.signature = self.keys.sign_sk.sign(msg.digest())
        self.next_seq += 1
        return msg

    def verify_and_open(self, frame: bytes) -> tuple[MsgType, bytes]:
        msg = WireMessage.from_bytes(frame)
        digest = msg.digest()
        try:
            Ed25519PublicKey.from_public_bytes(self.keys.peer.ver).verify(msg.signature, digest)
        except InvalidSignature:
            raise BadSignature(f"signature check failed on message seq={msg.seq}") from None
        now = self.now_ms()
        if abs(now - msg.timestamp_ms) > self.window_ms:
            raise StaleTimestamp(f"timestamp off by {(now - msg.timestamp_ms) / 1000:.1f}s")
        if msg.seq <= self.last_seq:
            raise ReplayedSequence(f"seq {msg.seq} not above last accepted {self.last_seq}")
        if self.replay_cache is not None and not self.replay_cache.check_and_add(digest, msg.timestamp_ms, now):
            raise ReplayedSequence("frame already accepted in another session")
        try:
            mt = MsgType(msg.msg_type)
        except ValueError:
            raise MalformedFrame(f"unknown message type {msg.msg_type}") from None
        self.last_seq = msg.seq
        payload = open_bytes(self.keys, msg.payload) if mt in SEALED_TYPES else msg.payload
        return mt, payload

    # ---- transport --------------------------------------------------------
    def send(self, msg_type: int, payload: bytes) -> int:
        frame = self.seal(msg_type, payload).to_bytes()
        self.transport.sendall(frame)
        self.meter.sent += len(frame)
        if self.log is not None:
            self.log.append(("out", MsgType(msg_type).name, len(frame)))
        return len(frame)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.transport.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise MalformedFrame("timed out waiting for frame bytes") from None
            except OSError as exc:
                raise MalformedFrame(f"connection error: {exc}") from None
            if not chunk:
                if buf:
                    raise MalformedFrame("connection closed mid-frame")
                raise ConnectionClosed("connection closed")
            buf += chunk
        return bytes(buf)

    def recv_frame(self) -> bytes:
        head = self._read_exact(4)
        (n,) = struct.unpack("<I", head)
        if n > self.max_frame or n < FRAME_OVERHEAD - 4:
            raise MalformedFrame(f"declared frame length {n} out of range")
        try:
            frame = head + self._read_exact(n)
        except ConnectionClosed:
            raise MalformedFrame("connection closed mid-frame") from None
        self.meter.received += len(frame)
        return frame

    def recv(self, *expected: MsgType) -> tuple[MsgType, bytes]:
        frame = self.recv_frame()
        mt, payload = self.verify_and_open(frame)
        if self.log is not None:
            self.log.append(("in", mt.name, len(frame)))
        if expected and mt not in expected:
            raise UnexpectedMessage(f"got {mt.name}, expected {'/'.join(e.name for e in expected)}")
        return mt, payload

    def drain(self) -> None:
        """After BYE: verify anything still arriving until the peer closes.

        A valid-looking extra frame is still a protocol violation, so every
        trailing frame raises; only a clean end of stream returns.
        """
        try:
            frame = self.recv_frame()
        except ConnectionClosed:
            return
        mt, _ = self.verify_and_open(frame)
        raise UnexpectedMessage(f"{mt.name} after BYE")

    def _half_close(self):
        try:
            self.transport.shutdown(socket.SHUT_WR)
        except (OSError, AttributeError):
            pass

    def close_initiate(self) -> None:
        self.send(MsgType.BYE, b"")
        self.recv(MsgType.BYE)
        self._half_close()
        self.drain()

    def close_respond(self) -> None:
        """Called after receiving BYE."""
        self.send(MsgType.BYE, b"")
        self.drain()
        self._half_close()


# ---------------------------------------------------------------------------
# hyperparameter agreement


def _canon(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()


def sync_hyperparams(session: Session, proposal: dict | None = None, pinned: dict | None = None) -> dict:
    """Agree on training hyperparameters.

    The client passes ``proposal``; the server passes its ``pinned`` values
    (or None to accept the proposal) and answers with the configuration it
    will use.  Either side aborts with :class:`SyncMismatch` on disagreement.
    """
    if session.role == "client":
        session.send(MsgType.SYNC, _canon(proposal))
        _, reply = session.recv(MsgType.SYNC)
        agreed = json.loads(reply)
        if agreed != json.loads(_canon(proposal)):
            diff = sorted(k for k in set(agreed) | set(proposal) if agreed.get(k) != proposal.get(k))
            raise SyncMismatch(f"server disagrees on {', '.join(diff)}")
    else:
        _, req = session.recv(MsgType.SYNC)
        offered = json.loads(req)
        agreed = dict(offered)
        if pinned:
            mine = json.loads(_canon(pinned))
            diff = sorted(k for k in mine if offered.get(k) != mine[k])
            if diff:
                session.send(MsgType.SYNC, _canon({**offered, **mine}))
                raise SyncMismatch(f"client proposed different {', '.join(diff)}")
        session.send(MsgType.SYNC, _canon(agreed))
    session.config = agreed
    return agreed


# ---------------------------------------------------------------------------
# payload containers


def pack_blobs(*blobs: bytes) -> bytes:
    out = [struct.pack("<I", len(blobs))]
    for b in blobs:
        out += [struct.pack("<I", len(b)), b]
    return b"".join(out)


def unpack_blobs(data: bytes) -> list[bytes]:
    try:
        (n,) = struct.unpack_from("<I", data)
        off, out = 4, []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + ln > len(data):
                raise MalformedFrame("blob runs past payload end")
            out.append(data[off:off + ln])
            off += ln
    except struct.error:
        raise MalformedFrame("truncated blob container") from None
    if off != len(data):
        raise MalformedFrame("trailing bytes in blob container")
    return out


def pack_arrays(*arrays: np.ndarray) -> bytes:
    """float64 arrays with their shapes (rank u8, dims u32...)."""
    parts = []
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape) + a.tobytes())
    return pack_blobs(*parts)


def unpack_arrays(data: bytes) -> list[np.ndarray]:
    out = []
    for b in unpack_blobs(data):
        try:
            (rank,) = struct.unpack_from("<B", b)
            dims = struct.unpack_from(f"<{rank}I", b, 1)
        except struct.error:
            raise MalformedFrame("truncated array header") from None
        off = 1 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if len(b) != off + 8 * count:
            raise MalformedFrame("array payload size mismatch")
        out.append(np.frombuffer(b, dtype="<f8", offset=off).reshape(dims).astype(np.float64))
    return out

"""Transparent TCP proxy that tampers with, replays, delays or reorders frames.

Messages are numbered in the order the proxy sees them, across both
directions; the lock-step protocol makes that order deterministic.  Each
scripted action runs against a fresh session so that one abort does not mask
the next action.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .. import channel
from ..channel import BadSignature, MalformedFrame, MsgType, ProtocolAbort, ReplayedSequence, paired_keys
from ..split import ClientEngine, ServerEngine, TrainConfig, _run_party, PartyResult

C2S, S2C = "c2s", "s2c"


@dataclass(frozen=True)
class Action:
    kind: str  # tamper | replay | delay | reorder
    index: int
    bit: int = 0  # tamper: bit position within the frame
    ms: int = 0  # delay
    source: int = -1  # reorder: earlier message delivered in place of ``index``

    def describe(self) -> str:
        extra = {"tamper": f"bit={self.bit}", "delay": f"ms={self.ms}", "reorder": f"source={self.source}"}
        return f"{self.kind}(#{self.index}{', ' + extra[self.kind] if self.kind in extra else ''})"


@dataclass
class Seen:
    index: int
    direction: str
    msg_type: str
    size: int


class MitmProxy:
    def __init__(self, target: tuple[str, int], actions=(), listen=("127.0.0.1", 0)):
        self.target = target
        self.actions = {a.index: a for a in actions}
        self._server = socket.create_server(listen)
        self.address = self._server.getsockname()
        self.seen: list[Seen] = []
        self.frames: list[bytes] = []
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._socks: list[socket.socket] = []

    def start(self) -> tuple[str, int]:
        t = threading.Thread(target=self._accept, daemon=True)
        t.start()
        self._threads.append(t)
        return self.address

    def _accept(self):
        try:
            down, _ = self._server.accept()
        except OSError:
            return
        finally:
            self._server.close()
        up = socket.create_connection(self.target)
        for s in (down, up):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks = [down, up]
        for src, dst, d in ((down, up, C2S), (up, down, S2C)):
            t = threading.Thread(target=self._pump, args=(src, dst, d), daemon=True)
            t.start()
            self._threads.append(t)

    def run(self) -> None:
        """Blocking variant of :meth:`start` for a standalone proxy."""
        self._accept()
        for t in list(self._threads):
            t.join()

    @staticmethod
    def _read(sock, n) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def _pump(self, src, dst, direction):
        try:
            while True:
                head = self._read(src, 4)
                if head is None:
                    break
                (n,) = struct.unpack("<I", head)
                body = self._read(src, n)
                if body is None:
                    break
                frame = head + body
                with self._lock:
                    idx = len(self.frames)
                    self.frames.append(frame)
                    try:
                        name = MsgType(frame[4]).name
                    except ValueError:
                        name = f"type{frame[4]}"
                    self.seen.append(Seen(idx, direction, name, len(frame)))
                    act = self.actions.get(idx)
                    out = [frame]
                    if act is not None:
                        out = self._apply(act, frame)
                for piece in out:
                    dst.sendall(piece)
            # orderly end of stream: pass the half-close on
            dst.shutdown(socket.SHUT_WR)
        except OSError:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def _apply(self, act: Action, frame: bytes) -> list[bytes]:
        if act.kind == "tamper":
            b = bytearray(frame)
            bit = act.bit % (8 * len(b))
            b[bit // 8] ^= 1 << (bit % 8)
            return [bytes(b)]
        if act.kind == "replay":
            return [frame, frame]
        if act.kind == "delay":
            time.sleep(act.ms / 1000.0)
            return [frame]
        if act.kind == "reorder":
            if not 0 <= act.source < len(self.frames) - 1:
                raise ValueError("reorder source must be an earlier message")
            return [self.frames[act.source]]
        raise ValueError(f"unknown action {act.kind}")

    def close(self):
        for s in self._socks + [self._server]:
            try:
                s.close()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# sessions under attack


@dataclass
class SessionOutcome:
    client: PartyResult
    server: PartyResult
    seen: list[Seen] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return self.client.error is None and self.server.error is None


def run_session(cfg: TrainConfig, train, test, actions=(), keys=None, timeout: float = 3.0,
                replay_cache=None, he_rng=None, clock_skew_s: float = 0.0) -> SessionOutcome:
    """One full client/server session over real TCP through the proxy."""
    kc, ks = keys or paired_keys(0)
    lst = socket.create_server(("127.0.0.1", 0))
    proxy = MitmProxy(lst.getsockname(), actions)
    proxy.start()
    res_c, res_s = PartyResult(), PartyResult()
    box = {}

    def server():
        conn, _ = lst.accept()
        lst.close()
        conn.settimeout(timeout)
        box["srv"] = conn
        sess = channel.Session(conn, ks, "server", replay_cache=replay_cache)
        return ServerEngine(sess).serve()

    ts = threading.Thread(target=lambda: _run_party(server, res_s, _Lazy(box, "srv")), daemon=True)
    ts.start()
    cli = socket.create_connection(proxy.address)
    cli.settimeout(timeout)
    clock = (lambda: time.time() + clock_skew_s) if clock_skew_s else time.time
    engine = ClientEngine(cfg, channel.Session(cli, kc, "client", clock=clock), train, test, he_rng=he_rng)
    _run_party(engine.run, res_c, cli)
    ts.join()
    cli.close()
    if "srv" in box:
        box["srv"].close()
    proxy.close()
    return SessionOutcome(res_c, res_s, list(proxy.seen))


class _Lazy:
    """Socket handle that may not exist yet when the party fails."""

    def __init__(self, box, key):
        self.box, self.key = box, key

    def shutdown(self, how):
        if self.key in self.box:
            self.box[self.key].shutdown(how)


def victim_of(direction: str) -> str:
    return "server" if direction == C2S else "client"


def expected_errors(act: Action, seen: list[Seen]) -> tuple[type, ...]:
    if act.kind == "tamper":
        # flips inside the length prefix break framing rather than the signature
        bit = act.bit % (8 * seen[act.index].size)
        return (MalformedFrame, BadSignature) if bit < 32 else (BadSignature,)
    if act.kind == "replay":
        return (ReplayedSequence,)
    if act.kind == "reorder":
        same = seen[act.source].direction == seen[act.index].direction
        return (ReplayedSequence,) if same else (BadSignature,)
    return ()


@dataclass
class Detection:
    action: Action
    victim: str
    expected: str
    observed: str
    detected: bool
    correct_class: bool


def judge(act: Action, outcome: SessionOutcome, reference: list[Seen]) -> Detection:
    direction = reference[act.index].direction
    victim = victim_of(direction)
    err = getattr(outcome, victim).error
    exp = expected_errors(act, reference)
    observed = type(err).__name__ if err is not None else "accepted"
    if act.kind == "delay":
        ok = outcome.clean
        return Detection(act, victim, "accepted", observed, ok, ok)
    detected = isinstance(err, ProtocolAbort)
    return Detection(act, victim, "/".join(e.__name__ for e in exp), observed, detected,
                     detected and isinstance(err, exp))


def fuzz_script(reference: list[Seen], tampers: int = 200, replays: int = 50, seed: int = 0) -> list[Action]:
    rng = np.random.default_rng(seed)
    acts = []
    for _ in range(tampers):
        i = int(rng.integers(len(reference)))
        acts.append(Action("tamper", i, bit=int(rng.integers(8 * reference[i].size))))
    for _ in range(replays):
        acts.append(Action("replay", int(rng.integers(len(reference)))))
    return acts


def run_campaign(cfg: TrainConfig, train, test, actions=None, tampers: int = 200, replays: int = 50,
                 seed: int = 0, timeout: float = 3.0, progress=None):
    """Honest control session, then one fresh session per action."""
    keys = paired_keys(seed)
    control = run_session(cfg, train, test, keys=keys, timeout=timeout, he_rng=seed)
    if not control.clean:
        raise RuntimeError(f"control session failed: {control.client.error or control.server.error}")
    if actions is None:
        actions = fuzz_script(control.seen, tampers, replays, seed)
    results = []
    for k, act in enumerate(actions):
        if not 0 <= act.index < len(control.seen):
            raise ValueError(f"{act.describe()} refers to an unobserved message")
        out = run_session(cfg, train, test, [act], keys=keys, timeout=timeout, he_rng=seed)
        results.append(judge(act, out, control.seen))
        if progress:
            progress(k, results[-1])
    return control, results

"""Local, plaintext-split and HE-split training loops.

The client owns the two conv blocks, the labels and the softmax/loss; the
server owns the final linear layer.  In HE mode the activation map crosses
the wire as CKKS ciphertexts and the server evaluates its layer on them.
"""

from __future__ import annotations

import enum
import socket
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ckks, nn
from .channel import (
    MsgType,
    ProtocolAbort,
    Session,
    UnexpectedMessage,
    paired_keys,
    open_bytes,
    pack_arrays,
    pack_blobs,
    seal_bytes,
    sync_hyperparams,
    unpack_arrays,
    unpack_blobs,
)
from .data import Dataset, one_hot


class Mode(str, enum.Enum):
    LOCAL = "local"
    SPLIT_PLAIN = "split-plain"
    SPLIT_HE = "split-he"


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 4
    epochs: int = 10
    model: str = "M1"
    mode: Mode = Mode.LOCAL
    he: ckks.HEParams | None = None
    batch_encrypt: bool = False
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.he, str):
            self.he = ckks.HEParams.parse(self.he)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epoch count must be >= 1")
        if self.model not in nn.ARCHITECTURES:
            raise ValueError(f"unknown model {self.model!r}")
        if (self.he is not None) != (self.mode is Mode.SPLIT_HE):
            raise ValueError("HE parameters are required for split-he and only for it")

    @property
    def arch(self) -> nn.Architecture:
        return nn.ARCHITECTURES[self.model]

    @property
    def layout(self) -> ckks.Layout:
        return ckks.Layout.BATCHED if self.batch_encrypt else ckks.Layout.PER_ROW

    def sync_view(self, n_batches: int) -> dict:
        return {"lr": self.lr, "n": self.batch_size, "N": n_batches, "E": self.epochs,
                "model": self.model, "mode": self.mode.value,
                "he": self.he.label() if self.he else None, "be": self.batch_encrypt, "seed": self.seed}


@dataclass
class EpochMetrics:
    epoch: int
    time_s: float
    loss: float
    train_acc: float
    test_acc: float
    bytes_c2s: int = 0
    bytes_s2c: int = 0

    def row(self) -> dict:
        return asdict(self)


def batches(n_samples: int, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle shared by every training mode."""
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def n_batches(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


def evaluate(model: nn.ModelParams, ds: Dataset) -> float:
    if len(ds) == 0:
        return 0.0
    return float((nn.predict(model, ds.x) == ds.y).mean() * 100.0)


def accuracy_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == y).mean() * 100.0) if len(y) else 0.0


# ---------------------------------------------------------------------------
# local


def train_local(cfg: TrainConfig, train: Dataset, test: Dataset | None = None,
                params: nn.ModelParams | None = None, on_batch=None):
    """Unsplit training with the same optimizer split as the split protocol."""
    model = params.copy() if params is not None else nn.init_params(cfg.arch, cfg.seed)
    t = model.tensors
    adam = nn.AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        losses, hits = [], 0
        for idx in batches(len(train), cfg.batch_size, cfg.seed, epoch):
            x, y = train.x[idx], one_hot(train.y[idx], cfg.arch.classes)
            cache = nn.ActivationCache()
            am = nn.client_forward(t, model.arch, x, cache)
            fc = nn.server_layer(t)
            logits = nn.linear_forward(fc, am)
            y_hat = nn.softmax(logits)
            losses.append(nn.cross_entropy_loss(y_hat, y))
            hits += int((logits.argmax(1) == train.y[idx]).sum())
            g = nn.softmax_ce_grad(y_hat, y)
            dw, db, da = nn.linear_backward(fc, am, g)
            nn.sgd_step(t, {"fc.w": dw, "fc.b": db}, cfg.lr)
            nn.adam_step(adam, t, nn.client_backward(t, model.arch, cache, da))
            if on_batch:
                on_batch(model)
        test_acc = evaluate(model, test) if test is not None else float("nan")
        history.append(EpochMetrics(epoch + 1, time.perf_counter() - start, float(np.mean(losses)),
                                    100.0 * hits / len(train), test_acc))
    return model, history


# ---------------------------------------------------------------------------
# split: client


class ClientEngine:
    """Client half: conv blocks, labels, softmax/loss and (HE mode) the secret key."""

    def __init__(self, cfg: TrainConfig, session: Session, train: Dataset, test: Dataset | None = None,
                 params: nn.ModelParams | None = None, he_rng=None, on_batch=None, infer_chunk: int = 64):
        self.cfg = cfg
        self.session = session
        self.train = train
        self.test = test
        full = params.copy() if params is not None else nn.init_params(cfg.arch, cfg.seed)
        self.params = full.client_part()
        self.arch = cfg.arch
        self.adam = nn.AdamState(lr=cfg.lr)
        self.cache = nn.ActivationCache()
        self.on_batch = on_batch
        self.infer_chunk = infer_chunk
        self.rng = np.random.default_rng(he_rng)
        self.he_private: ckks.PrivateContext | None = None
        self.handshake_done = False
        self.sent_am_bytes: list[bytes] = []  # for leakage inspection in tests

    # ---- HE helpers -------------------------------------------------------
    def _ensure_keys(self):
        if self.he_private is None:
            p = self.cfg.he
            rots = ckks.required_rotations(p, self.arch.am_features) if not self.cfg.batch_encrypt else []
            self.he_private, _ = ckks.keygen(p, rotations=rots, rng=self.rng)

    def _encrypt(self, am: np.ndarray) -> bytes:
        em = ckks.batch_encrypt_matrix(self.he_private, am, self.cfg.layout, rng=self.rng)
        return ckks.matrix_to_bytes(em)

    def _decrypt(self, blob: bytes) -> np.ndarray:
        em = ckks.matrix_from_bytes(blob, self.cfg.he)
        return ckks.batch_decrypt_matrix(self.he_private, em)

    # ---- protocol ---------------------------------------------------------
    def synchronize(self) -> dict:
        return sync_hyperparams(self.session, self.cfg.sync_view(n_batches(len(self.train), self.cfg.batch_size)))

    def forward_remote(self, am: np.ndarray) -> np.ndarray:
        """Send the activation map, return the server's logits."""
        s = self.session
        self.sent_am_bytes.append(np.ascontiguousarray(am, dtype="<f8").tobytes())
        if self.cfg.mode is Mode.SPLIT_PLAIN:
            s.send(MsgType.TRAIN_AM, pack_arrays(am))
            return unpack_arrays(s.recv(MsgType.TRAIN_OUT)[1])[0]
        self._ensure_keys()
        ct = self._encrypt(am)
        if not self.handshake_done:
            ctx_blob = ckks.public_context_to_bytes(self.he_private.public)
            s.send(MsgType.M1_SETUP, pack_blobs(seal_bytes(s.keys.peer.pke, ctx_blob), ct))
            return self._decrypt(s.recv(MsgType.M2_EVAL)[1])
        s.send(MsgType.TRAIN_AM_HE, ct)
        return self._decrypt(s.recv(MsgType.TRAIN_OUT_HE)[1])

    def backward_remote(self, am: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Send dJ/da_L (and dJ/dW in HE mode), return dJ/da_l."""
        s = self.session
        if self.cfg.mode is Mode.SPLIT_PLAIN:
            s.send(MsgType.TRAIN_GRAD_OUT, pack_arrays(g))
            return unpack_arrays(s.recv(MsgType.TRAIN_GRAD_AM)[1])[0]
        payload = pack_arrays(g, am.T @ g)
        if not self.handshake_done:
            s.send(MsgType.M3_GRAD, payload)
            (da,) = unpack_arrays(s.recv(MsgType.M4_GRADPRIME)[1])
            self.handshake_done = True
            return da
        s.send(MsgType.TRAIN_GRAD_OUT_HE, payload)
        return unpack_arrays(s.recv(MsgType.TRAIN_GRAD_AM_HE)[1])[0]

    def train_step(self, x: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
        y = one_hot(labels, self.arch.classes)
        am = nn.client_forward(self.params, self.arch, x, self.cache)
        logits = self.forward_remote(am)
        y_hat = nn.softmax(logits)
        loss = nn.cross_entropy_loss(y_hat, y)
        da = self.backward_remote(am, nn.softmax_ce_grad(y_hat, y))
        nn.adam_step(self.adam, self.params, nn.client_backward(self.params, self.arch, self.cache, da))
        return loss, int((logits.argmax(1) == labels).sum())

    def infer(self, x: np.ndarray) -> np.ndarray:
        s = self.session
        out = []
        for i in range(0, len(x), self.infer_chunk):
            am = nn.client_forward(self.params, self.arch, x[i:i + self.infer_chunk], nn.ActivationCache())
            self.sent_am_bytes.append(np.ascontiguousarray(am, dtype="<f8").tobytes())
            if self.cfg.mode is Mode.SPLIT_PLAIN:
                s.send(MsgType.INFER_AM, pack_arrays(am))
                out.append(unpack_arrays(s.recv(MsgType.INFER_OUT)[1])[0])
            else:
                self._ensure_keys()
                if not self.handshake_done:
                    raise ProtocolAbort("encrypted inference before the setup handshake")
                s.send(MsgType.INFER_AM_HE, self._encrypt(am))
                out.append(self._decrypt(s.recv(MsgType.INFER_OUT_HE)[1]))
        return np.concatenate(out) if out else np.zeros((0, self.arch.classes))

    def run(self) -> list[EpochMetrics]:
        self.synchronize()
        history = []
        meter = self.session.meter
        for epoch in range(self.cfg.epochs):
            start = time.perf_counter()
            losses, hits = [], 0
            for idx in batches(len(self.train), self.cfg.batch_size, self.cfg.seed, epoch):
                loss, h = self.train_step(self.train.x[idx], self.train.y[idx])
                losses.append(loss)
                hits += h
                if self.on_batch:
                    self.on_batch(self)
            elapsed = time.perf_counter() - start
            c2s, s2c = meter.end_epoch()
            test_acc = float("nan")
            if self.test is not None and len(self.test):
                test_acc = accuracy_from_logits(self.infer(self.test.x), self.test.y)
                meter.discard()
            history.append(EpochMetrics(epoch + 1, elapsed, float(np.mean(losses)),
                                        100.0 * hits / len(self.train), test_acc, c2s, s2c))
        self.session.close_initiate()
        return history


# ---------------------------------------------------------------------------
# split: server


class ServerEngine:
    """Server half: the linear layer and, in HE mode, only the public context."""

    def __init__(self, session: Session, cfg: TrainConfig | None = None, params: nn.ModelParams | None = None,
                 pinned: dict | None = None):
        self.session = session
        self.cfg = cfg
        self._init_params = params
        self.pinned = pinned
        self.params: dict | None = None
        self.he_public: ckks.PublicContext | None = None
        self.he_params: ckks.HEParams | None = None
        self.lr = None
        self.last_bias_grad: np.ndarray | None = None
        self.last_grad_out: np.ndarray | None = None
        self.received_plain: list[bytes] = []  # every opened payload, for leakage inspection
        self.batches_done = 0

    def _setup_from(self, agreed: dict):
        self.lr = float(agreed["lr"])
        model = agreed["model"]
        full = self._init_params.copy() if self._init_params is not None else \
            nn.init_params(model, int(agreed["seed"]))
        self.params = {k: v.copy() for k, v in full.server_part().items()}
        self.he_params = ckks.HEParams.parse(agreed["he"]) if agreed.get("he") else None
        self.mode = Mode(agreed["mode"])

    @property
    def layer(self) -> nn.LinearLayer:
        return nn.server_layer(self.params)

    def _recv(self, *expected):
        mt, payload = self.session.recv(*expected)
        self.received_plain.append(payload)
        return mt, payload

    def _apply_grads(self, am_t_g: np.ndarray, g: np.ndarray) -> np.ndarray:
        # dJ/da_l uses the weights the forward pass used
        da = g @ self.params["fc.w"].T
        db = g.sum(axis=0)
        self.last_bias_grad, self.last_grad_out = db, g
        nn.sgd_step(self.params, {"fc.w": am_t_g, "fc.b": db}, self.lr)
        self.batches_done += 1
        return da

    def _he_eval(self, blob: bytes) -> bytes:
        em = ckks.matrix_from_bytes(blob, self.he_params)
        if em.shape[1] != self.params["fc.w"].shape[0]:
            raise ProtocolAbort(f"activation width {em.shape[1]} does not match the layer")
        out = ckks.he_linear(self.he_public, em, self.params["fc.w"], self.params["fc.b"])
        return ckks.matrix_to_bytes(out)

    def serve(self) -> dict:
        s = self.session
        agreed = sync_hyperparams(s, pinned=self.pinned)
        self._setup_from(agreed)
        he = self.mode is Mode.SPLIT_HE
        first = (MsgType.M1_SETUP, MsgType.BYE) if he else (MsgType.TRAIN_AM, MsgType.INFER_AM, MsgType.BYE)
        expect = first
        while True:
            mt, payload = self._recv(*expect)
            if mt is MsgType.BYE:
                s.close_respond()
                return agreed
            if mt is MsgType.TRAIN_AM:
                (am,) = unpack_arrays(payload)
                s.send(MsgType.TRAIN_OUT, pack_arrays(nn.linear_forward(self.layer, am)))
                (g,) = unpack_arrays(self._recv(MsgType.TRAIN_GRAD_OUT)[1])
                dw = am.T @ g
                s.send(MsgType.TRAIN_GRAD_AM, pack_arrays(self._apply_grads(dw, g)))
            elif mt is MsgType.INFER_AM:
                (am,) = unpack_arrays(payload)
                s.send(MsgType.INFER_OUT, pack_arrays(nn.linear_forward(self.layer, am)))
            elif mt is MsgType.M1_SETUP:
                sealed_ctx, ct = unpack_blobs(payload)
                self.he_public = ckks.public_context_from_bytes(open_bytes(s.keys, sealed_ctx))
                if self.he_public.params != self.he_params:
                    raise ProtocolAbort("context parameters differ from the synchronized set")
                s.send(MsgType.M2_EVAL, self._he_eval(ct))
                g, dw = unpack_arrays(self._recv(MsgType.M3_GRAD)[1])
                s.send(MsgType.M4_GRADPRIME, pack_arrays(self._apply_grads(dw, g)))
                expect = (MsgType.TRAIN_AM_HE, MsgType.INFER_AM_HE, MsgType.BYE)
            elif mt is MsgType.TRAIN_AM_HE:
                s.send(MsgType.TRAIN_OUT_HE, self._he_eval(payload))
                g, dw = unpack_arrays(self._recv(MsgType.TRAIN_GRAD_OUT_HE)[1])
                s.send(MsgType.TRAIN_GRAD_AM_HE, pack_arrays(self._apply_grads(dw, g)))
            elif mt is MsgType.INFER_AM_HE:
                s.send(MsgType.INFER_OUT_HE, self._he_eval(payload))
            else:  # pragma: no cover - recv already filtered
                raise UnexpectedMessage(mt.name)


# ---------------------------------------------------------------------------
# in-process wiring over loopback TCP


@dataclass
class PartyResult:
    value: object = None
    error: BaseException | None = None
    elapsed: float = 0.0


def _run_party(fn, out: PartyResult, sock):
    t0 = time.perf_counter()
    try:
        out.value = fn()
    except BaseException as exc:  # noqa: BLE001 - reported to the caller
        out.error = exc
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
    finally:
        out.elapsed = time.perf_counter() - t0


def socket_pair(timeout: float | None = 30.0):
    """Connected loopback TCP sockets (client side, server side)."""
    lst = socket.create_server(("127.0.0.1", 0))
    cli = socket.create_connection(lst.getsockname())
    srv, _ = lst.accept()
    lst.close()
    for s in (cli, srv):
        s.settimeout(timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return cli, srv


def run_pair(client_fn, server_fn, client_sock, server_sock):
    """Run both parties in threads; returns (client PartyResult, server PartyResult)."""
    res_c, res_s = PartyResult(), PartyResult()
    ts = threading.Thread(target=_run_party, args=(server_fn, res_s, server_sock), daemon=True)
    tc = threading.Thread(target=_run_party, args=(client_fn, res_c, client_sock), daemon=True)
    ts.start()
    tc.start()
    tc.join()
    ts.join()
    for s in (client_sock, server_sock):
        s.close()
    return res_c, res_s


def run_formal_handshake(client: ClientEngine, server: ServerEngine, x: np.ndarray, labels: np.ndarray,
                         client_sock, server_sock):
    """SYNC, then one m1 -> m2 -> m3 -> m4 round on a single batch, then BYE.

    Returns the two :class:`PartyResult` objects; an aborted party carries
    its :class:`ProtocolAbort` in ``error``.
    """
    def cli():
        client.synchronize()
        out = client.train_step(x, labels)
        client.session.close_initiate()
        return out

    return run_pair(cli, server.serve, client_sock, server_sock)


def run_split(cfg: TrainConfig, train: Dataset, test: Dataset | None = None, params: nn.ModelParams | None = None,
              on_batch=None, he_rng=None, keys=None, timeout: float | None = 600.0):
    """Client and server engines in one process over loopback TCP.

    ``on_batch(client, server)`` runs after every completed batch.  Returns
    ``(history, client, server)``; a failure of either party is re-raised.
    """
    kc, ks = keys or paired_keys(cfg.seed)
    cs, ss = socket_pair(timeout)
    server = ServerEngine(Session(ss, ks, "server"), params=params)
    client = ClientEngine(cfg, Session(cs, kc, "client"), train, test, params=params, he_rng=he_rng,
                          on_batch=(lambda c: on_batch(c, server)) if on_batch else None)
    res_c, res_s = run_pair(client.run, server.serve, cs, ss)
    for res in (res_c, res_s):
        if res.error is not None:
            raise res.error
    return res_c.value, client, server

import json

import numpy as np
import pytest

from hesplit import ckks, nn
from hesplit.channel import frame_size
from hesplit.data import synth_for, train_test_split
from hesplit.split import (Mode, TrainConfig, batches, n_batches, run_split, train_local)

HE = ckks.HEParams(4096, (40, 20, 20), 21)


def data(model="M1", samples=40, seed=0):
    return train_test_split(synth_for(model, samples, seed), 0.8, seed)


def trajectories(cfg, train, test):
    local, split = [], []
    train_local(cfg, train, test, on_batch=lambda m: local.append(m.flat().copy()))

    def grab(client, server):
        split.append(np.concatenate([client.params[k].ravel() for k in nn.CLIENT_KEYS] +
                                    [server.params[k].ravel() for k in nn.SERVER_KEYS]))

    split_cfg = TrainConfig(**{**cfg.__dict__, "mode": Mode.SPLIT_PLAIN})
    history, _, _ = run_split(split_cfg, train, test, on_batch=grab)
    return local, split, history


@pytest.mark.parametrize("model,samples", [("M1", 30), ("M2", 30), ("M3", 10)])
def test_plain_split_matches_local_every_batch(model, samples):
    train, test = data(model, samples)
    cfg = TrainConfig(lr=0.01, batch_size=4, epochs=2, model=model, seed=3)
    local, split, _ = trajectories(cfg, train, test)
    assert len(local) == len(split) == 2 * n_batches(len(train), 4)
    assert max(np.abs(a - b).max() for a, b in zip(local, split)) <= 1e-9


def test_batches_cover_every_sample_once():
    for epoch in range(3):
        idx = np.concatenate(batches(23, 4, 7, epoch))
        assert sorted(idx) == list(range(23))
    assert not np.array_equal(np.concatenate(batches(23, 4, 7, 0)), np.concatenate(batches(23, 4, 7, 1)))
    np.testing.assert_array_equal(np.concatenate(batches(23, 4, 7, 1)), np.concatenate(batches(23, 4, 7, 1)))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode=Mode.SPLIT_HE)
    with pytest.raises(ValueError):
        TrainConfig(mode=Mode.SPLIT_PLAIN, he=HE)
    with pytest.raises(ValueError):
        TrainConfig(model="M9")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(mode="split-he", he=HE.label()).he == HE


def test_local_training_learns():
    train, test = train_test_split(synth_for("M1", 300, 1), 0.8, 1)
    _, hist = train_local(TrainConfig(epochs=3, seed=1), train, test)
    assert hist[-1].test_acc > 60.0 and hist[-1].loss < hist[0].loss


@pytest.mark.parametrize("be", [False, True])
def test_he_split_runs_and_tracks_plain(be):
    train, test = data("M1", 24, 2)
    cfg = TrainConfig(lr=0.01, batch_size=4, epochs=1, model="M1", mode=Mode.SPLIT_HE, he=HE,
                      batch_encrypt=be, seed=2)
    seen = []
    hist, client, server = run_split(cfg, train, test, he_rng=5,
                                     on_batch=lambda c, s: seen.append(s.params["fc.w"].copy()))
    assert len(hist) == 1 and hist[0].bytes_c2s > 0 and hist[0].bytes_s2c > 0
    _, plain = train_local(TrainConfig(lr=0.01, batch_size=4, epochs=1, seed=2), train, test)
    assert abs(hist[0].loss - plain[0].loss) < 1e-2
    # the server only ever held the public context
    assert isinstance(server.he_public, ckks.PublicContext)
    assert not isinstance(server.he_public, ckks.PrivateContext)
    assert len(seen) == n_batches(len(train), 4)


def _scan(needles, haystacks, width=32, probes=8):
    """True if any of ``probes`` evenly spaced ``width``-byte windows of a needle occurs in a haystack."""
    for n in needles:
        for i in np.linspace(0, len(n) - width, probes).astype(int):
            if any(n[i:i + width] in h for h in haystacks):
                return True
    return False


def test_server_never_receives_plaintext_activations_in_he_mode():
    train, test = data("M1", 16, 4)
    cfg = TrainConfig(batch_size=4, epochs=1, mode=Mode.SPLIT_HE, he=HE, seed=4)
    _, client, server = run_split(cfg, train, test, he_rng=1)
    assert client.sent_am_bytes and server.received_plain
    assert not _scan(client.sent_am_bytes, server.received_plain)
    raw = [np.ascontiguousarray(train.x, dtype="<f8").tobytes(), np.ascontiguousarray(test.x, dtype="<f8").tobytes()]
    assert not _scan(raw, server.received_plain)
    assert not _scan([ckks.private_context_to_bytes(client.he_private)[64:]], server.received_plain)


def test_scan_detects_plaintext_activations_in_plain_mode():
    train, test = data("M1", 16, 4)
    _, client, server = run_split(TrainConfig(batch_size=4, epochs=1, mode=Mode.SPLIT_PLAIN, seed=4), train, test)
    assert _scan(client.sent_am_bytes, server.received_plain)


def test_bias_gradient_is_batch_sum_of_received_gradient():
    train, test = data("M1", 12, 5)
    checks = []

    def check(client, server):
        checks.append(np.array_equal(server.last_bias_grad, server.last_grad_out.sum(axis=0)))

    run_split(TrainConfig(batch_size=4, epochs=1, mode=Mode.SPLIT_PLAIN), train, test, on_batch=check)
    assert checks and all(checks)


def test_history_bytes_exclude_evaluation():
    train, test = data("M1", 16, 6)
    cfg = TrainConfig(batch_size=4, epochs=2, mode=Mode.SPLIT_PLAIN)
    hist, client, _ = run_split(cfg, train, test)
    # epoch 1 additionally carries the SYNC frame
    sync = frame_size(len(json.dumps(cfg.sync_view(n_batches(len(train), 4)), sort_keys=True,
                                     separators=(",", ":"))))
    assert hist[0].bytes_c2s - hist[1].bytes_c2s == sync
    assert client.session.meter.sent > sum(h.bytes_c2s for h in hist)

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hesplit import ckks
from hesplit.ckks import calibration
from conftest import SMALL

SETS = list(ckks.STANDARD_PARAM_SETS)


def _ids(ps):
    return [p.label() for p in ps]


@pytest.fixture(scope="module")
def keys_by_set():
    cache = {}

    def get(p):
        if p not in cache:
            cache[p] = ckks.keygen(p, rotations=[1, -1, 3], rng=np.random.default_rng(1))
        return cache[p]
    return get


def test_params_parse_and_label_roundtrip():
    p = ckks.HEParams.parse("8192/[60,40,40,60]/2^40")
    assert p == ckks.HEParams(8192, (60, 40, 40, 60), 40)
    assert ckks.HEParams.parse(p.label()) == p
    assert ckks.HEParams.parse("4096:40,20,20:21") == SMALL


@pytest.mark.parametrize("bad", [(1000, (40, 20), 20), (4096, (), 20), (4096, (70, 20), 20), (4096, (20,), 30)])
def test_params_validation(bad):
    with pytest.raises(ckks.ParameterError):
        ckks.HEParams(*bad)


def test_weak_flag():
    assert ckks.HEParams(2048, (18, 18, 18), 16).is_weak
    assert not SMALL.is_weak


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=64))
def test_encode_decode_roundtrip(values):
    p = ckks.HEParams(8192, (60, 40, 40, 60), 40)
    got = ckks.decode(ckks.encode(p, values))
    np.testing.assert_allclose(got[: len(values)], values, atol=1e-6)
    assert np.all(np.abs(got[len(values):]) < 1e-6)


def test_encode_rejects_too_many_values():
    with pytest.raises(ckks.CapacityError):
        ckks.encode(SMALL, np.zeros(SMALL.slots + 1))


@pytest.mark.parametrize("p", SETS, ids=_ids(SETS))
def test_homomorphism_within_calibrated_bounds(p, keys_by_set):
    priv, _ = keys_by_set(p)
    rng = np.random.default_rng(2)
    v, w = rng.uniform(-1, 1, p.slots), rng.uniform(-1, 1, p.slots)
    cv, cw = ckks.encrypt_values(priv, v, rng), ckks.encrypt_values(priv, w, rng)
    assert np.abs(ckks.decrypt_values(priv, ckks.add(cv, cw)) - (v + w)).max() < calibration.tolerance(p, "add")
    prod = ckks.decrypt_values(priv, ckks.multiply_plain(cv, w))
    assert np.abs(prod - v * w).max() < calibration.tolerance(p, "mul_plain")


@pytest.mark.parametrize("p", SETS, ids=_ids(SETS))
def test_level_accounting(p, keys_by_set):
    priv, _ = keys_by_set(p)
    ct = ckks.encrypt_values(priv, [0.5], np.random.default_rng(0))
    assert ct.level == p.max_level
    assert ckks.add(ct, ct).level == ct.level
    for k in range(p.max_level):
        ct = ckks.multiply_plain(ct, [0.9])
        assert ct.level == p.max_level - k - 1
    with pytest.raises(ckks.DepthError):
        ckks.multiply_plain(ct, [0.9])
    # still decryptable at level 0
    assert ckks.decrypt_values(priv, ct)[0] == pytest.approx(0.5 * 0.9 ** p.max_level, abs=0.05)


@pytest.mark.parametrize("p", SETS[:4], ids=_ids(SETS[:4]))
def test_scale_after_rescale(p, keys_by_set):
    priv, _ = keys_by_set(p)
    ct = ckks.encrypt_values(priv, [0.25], np.random.default_rng(0))
    # default plaintext scale: the product is Delta^2 and rescale divides by a prime near Delta
    pt = ckks.encode(p, [2.0], level=ct.level)
    out = ckks.multiply_plain(ct, pt)
    assert abs(out.scale - p.scale) / p.scale < 2 ** -10 or p.coeff_bits[ct.level] != p.scale_bits
    # value encoding tracks the dropped prime exactly
    assert ckks.multiply_plain(ct, [2.0]).scale == ct.scale


def test_mismatched_operands_raise(small_keys):
    priv, _ = small_keys
    rng = np.random.default_rng(0)
    a = ckks.encrypt_values(priv, [1.0], rng)
    b = ckks.multiply_plain(ckks.encrypt_values(priv, [1.0], rng), [1.0])
    with pytest.raises(ckks.AlignmentError):
        ckks.add(a, b)
    with pytest.raises(ckks.AlignmentError):
        ckks.multiply_plain(a, ckks.encode(SMALL, [1.0], level=0))


def test_public_context_cannot_decrypt(small_keys):
    priv, pub = small_keys
    ct = ckks.encrypt_values(pub, [1.0, 2.0], np.random.default_rng(0))
    with pytest.raises(ckks.CapabilityError):
        ckks.decrypt_values(pub, ct)
    with pytest.raises(ckks.CapabilityError):
        ckks.encrypt_symmetric(pub, ckks.encode(SMALL, [1.0]))
    assert not hasattr(pub, "secret")
    np.testing.assert_allclose(ckks.decrypt_values(priv, ct)[:2], [1.0, 2.0], atol=5e-2)


def test_public_key_encryption_high_precision():
    p = ckks.HEParams(8192, (60, 40, 40, 60), 40)
    priv, pub = ckks.keygen(p, rotations=[], rng=np.random.default_rng(3))
    v = np.random.default_rng(3).uniform(-1, 1, 100)
    ct = ckks.encrypt_values(pub, v, np.random.default_rng(4))
    np.testing.assert_allclose(ckks.decrypt_values(priv, ct)[:100], v, atol=1e-6)


def test_rotation(small_keys):
    priv, pub = small_keys
    v = np.arange(SMALL.slots, dtype=float) / SMALL.slots
    ct = ckks.encrypt_values(priv, v, np.random.default_rng(0))
    for step in (1, 4, 5, 128):
        got = ckks.decrypt_values(priv, ckks.rotate(pub, ct, step))
        np.testing.assert_allclose(got, np.roll(v, -step), atol=1e-2)
    with pytest.raises(ckks.CapabilityError):
        ckks.rotate(ckks.keygen(SMALL, rotations=[], rng=0)[1], ct, 1)


def test_seeded_encryption_is_deterministic(small_keys):
    priv, _ = small_keys
    a = ckks.encrypt_values(priv, [0.1, 0.2], np.random.default_rng(9))
    b = ckks.encrypt_values(priv, [0.1, 0.2], np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)


def test_operations_do_not_mutate_inputs(small_keys):
    priv, pub = small_keys
    ct = ckks.encrypt_values(priv, [0.3], np.random.default_rng(0))
    before = ct.data.copy()
    ckks.add(ct, ct)
    ckks.multiply_plain(ct, [2.0])
    ckks.rotate(pub, ct, 1)
    np.testing.assert_array_equal(ct.data, before)


# ---- serialization ----------------------------------------------------------

def test_ciphertext_bytes_layout(small_keys):
    priv, _ = small_keys
    ct = ckks.encrypt_values(priv, [1.5], np.random.default_rng(0))
    buf = ckks.ciphertext_to_bytes(ct)
    magic, ver, n, chain, level, scale = struct.unpack_from("<4sBIBBd", buf)
    assert (magic, n, chain, level, scale) == (b"HECT", 4096, 3, 2, 2.0 ** 21)
    assert len(buf) == 19 + 8 * 2 * 3 * 4096 == ckks.serialized_size(ct)
    back = ckks.ciphertext_from_bytes(buf, SMALL)
    np.testing.assert_array_equal(back.data, ct.data)
    with pytest.raises(ckks.FormatError):
        ckks.ciphertext_from_bytes(buf[:-1], SMALL)
    with pytest.raises(ckks.FormatError):
        ckks.ciphertext_from_bytes(b"XXXX" + buf[4:], SMALL)
    with pytest.raises(ckks.FormatError):
        ckks.ciphertext_from_bytes(buf, ckks.HEParams(8192, (40, 20, 20), 21))


def test_public_context_export_excludes_secret(small_keys):
    priv, pub = small_keys
    blob = ckks.public_context_to_bytes(pub)
    back = ckks.public_context_from_bytes(blob)
    assert isinstance(back, ckks.PublicContext)
    assert back.params == SMALL and back.rotations == pub.rotations
    secret_bytes = np.ascontiguousarray(priv.secret[0], dtype="<u8").tobytes()[:64]
    assert secret_bytes not in blob
    # the round-tripped context still evaluates
    ct = ckks.encrypt_values(priv, np.arange(8.0), np.random.default_rng(0))
    np.testing.assert_allclose(ckks.decrypt_values(priv, ckks.rotate(back, ct, 1))[:7], np.arange(1.0, 8.0),
                               atol=1e-2)


def test_private_context_roundtrip(small_keys):
    priv, _ = small_keys
    back = ckks.private_context_from_bytes(ckks.private_context_to_bytes(priv))
    np.testing.assert_array_equal(back.secret, priv.secret)
    with pytest.raises(ckks.FormatError):
        ckks.public_context_from_bytes(ckks.private_context_to_bytes(priv))


# ---- encrypted matrices -----------------------------------------------------

@pytest.mark.parametrize("layout", [ckks.Layout.PER_ROW, ckks.Layout.BATCHED, ckks.Layout.PER_ELEMENT])
def test_matrix_roundtrip(small_keys, layout):
    priv, _ = small_keys
    m = np.random.default_rng(0).uniform(-1, 1, (3, 10))
    em = ckks.batch_encrypt_matrix(priv, m, layout, np.random.default_rng(1))
    assert len(em) == {ckks.Layout.PER_ROW: 3, ckks.Layout.BATCHED: 10, ckks.Layout.PER_ELEMENT: 30}[layout]
    np.testing.assert_allclose(ckks.batch_decrypt_matrix(priv, em), m, atol=1e-2)
    back = ckks.matrix_from_bytes(ckks.matrix_to_bytes(em), SMALL)
    np.testing.assert_allclose(ckks.batch_decrypt_matrix(priv, back), m, atol=1e-2)


@pytest.mark.parametrize("d,out", [(256, 5), (10, 3), (256, 16), (300, 7)])
def test_he_linear_per_row_and_batched(d, out):
    p = SMALL
    priv, pub = ckks.keygen(p, rotations=ckks.required_rotations(p, d), rng=np.random.default_rng(d))
    rng = np.random.default_rng(out)
    a, w, b = rng.uniform(-1, 1, (4, d)), rng.uniform(-0.3, 0.3, (d, out)), rng.uniform(-1, 1, out)
    ref = a @ w + b
    results = []
    for layout in (ckks.Layout.PER_ROW, ckks.Layout.BATCHED):
        em = ckks.batch_encrypt_matrix(priv, a, layout, rng)
        res = ckks.he_linear(pub, em, w, b)
        assert res.cts[0].level == p.max_level - 1
        got = ckks.batch_decrypt_matrix(priv, res)
        np.testing.assert_allclose(got, ref, atol=calibration.tolerance(p, "linear"))
        results.append(got)
    np.testing.assert_allclose(results[0], results[1], atol=2 * calibration.tolerance(p, "linear"))


def test_he_linear_hybrid_path_on_small_ring():
    """Outputs that cannot sit in side-by-side blocks use the diagonal method."""
    p = ckks.HEParams(2048, (30, 20, 30), 20)
    priv, pub = ckks.keygen(p, rotations=ckks.required_rotations(p, 256), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    a, w, b = rng.uniform(-1, 1, (2, 256)), rng.uniform(-0.2, 0.2, (256, 5)), rng.uniform(-1, 1, 5)
    assert 5 * 256 > p.slots
    em = ckks.batch_encrypt_matrix(priv, a, ckks.Layout.PER_ROW, rng)
    np.testing.assert_allclose(ckks.batch_decrypt_matrix(priv, ckks.he_linear(pub, em, w, b)), a @ w + b,
                               atol=5e-2)


def test_he_linear_shape_checks(small_keys):
    priv, pub = small_keys
    em = ckks.batch_encrypt_matrix(priv, np.zeros((2, 8)), ckks.Layout.BATCHED, 0)
    with pytest.raises(ckks.AlignmentError):
        ckks.he_linear(pub, em, np.zeros((9, 2)), np.zeros(2))
    with pytest.raises(ckks.AlignmentError):
        ckks.he_linear_per_row(pub, em, np.zeros((8, 2)), np.zeros(2))
    pe = ckks.batch_encrypt_matrix(priv, np.zeros((1, 2)), ckks.Layout.PER_ELEMENT, 0)
    with pytest.raises(ckks.AlignmentError):
        ckks.he_linear(pub, pe, np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ckks.CapacityError):
        ckks.batch_encrypt_matrix(priv, np.zeros((1, SMALL.slots + 1)), ckks.Layout.PER_ROW, 0)


def test_required_rotations():
    assert ckks.required_rotations(SMALL, 256) == [1, 2, 4, 8, 16, 32, 64, 128]
    assert ckks.required_rotations(SMALL, 2000) == [2 ** k for k in range(11)]

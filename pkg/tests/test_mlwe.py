import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzz_ops import FuzzRig
from qfhe import mlwe, ring
from qfhe.mlwe import KeyMismatch, PlaintextOverflow


@pytest.fixture(scope="module")
def toy():
    ctx = mlwe.make_context("toy")
    sk, pk = mlwe.keygen(ctx, 11)
    return ctx, sk, pk


def test_context_defaults():
    ctx = mlwe.make_context("teleport")
    assert (ctx.d, ctx.k, ctx.sigma) == (256, 3, 3)
    assert ctx.q > 2**50
    assert mlwe.make_context("toy", sigma=5).sigma == 5
    with pytest.raises(ValueError):
        mlwe.make_context("toy", k=4)


@pytest.mark.parametrize("preset", ["toy", "teleport"])
def test_pk_roundtrip_batch(preset):
    ctx = mlwe.make_context(preset)
    sk, pk = mlwe.keygen(ctx, 1)
    vals = np.array([[0.5, -0.25], [1.0, 0.125]])
    ct = mlwe.encrypt(pk, vals, 2)
    assert ct.shape == (2, 2)
    assert np.allclose(mlwe.decrypt(sk, ct), vals, atol=2.0**-18)
    assert mlwe.noise_actual(sk, ct, vals) <= ct.noise_bound


def test_sk_encryption_noise_is_tail_cut(toy):
    ctx, sk, _ = toy
    ct = mlwe.encrypt_sk(sk, np.zeros(50), 3)
    assert mlwe.noise_actual(sk, ct, np.zeros(50)) <= ctx.fresh_sk_bound == 18


def test_plaintext_overflow(toy):
    _, _, pk = toy
    with pytest.raises(PlaintextOverflow):
        mlwe.encrypt(pk, 100.0, 0)
    with pytest.raises(ValueError):
        mlwe.encrypt(pk, float("nan"), 0)


def test_wrong_key_is_rejected(toy):
    ctx, sk, pk = toy
    other, _ = mlwe.keygen(ctx, 99)
    ct = mlwe.encrypt(pk, 0.5, 0)
    with pytest.raises(KeyMismatch):
        mlwe.decrypt(other, ct)
    ct2 = mlwe.encrypt_sk(other, 0.5, 0)
    with pytest.raises(KeyMismatch):
        mlwe.he_add(ct, ct2)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-4, 4), b=st.floats(-4, 4), alpha=st.integers(-3, 3))
def test_homomorphic_linear_ops(a, b, alpha):
    ctx = mlwe.make_context("toy")
    sk, pk = mlwe.keygen(ctx, 5)
    x, y = mlwe.encrypt(pk, a, 1), mlwe.encrypt(pk, b, 2)
    for ct, ref in ((x + y, a + b), (x - y, a - b), (mlwe.he_const_mul(x, alpha), alpha * a)):
        assert abs(mlwe.decrypt(sk, ct) - ref) < 1e-4
        assert mlwe.noise_actual(sk, ct, ref) <= ct.noise_bound


def test_complex_constant_and_cap(toy):
    ctx, sk, pk = toy
    re, im = mlwe.encrypt(pk, 0.5, 1), mlwe.encrypt(pk, -0.25, 2)
    r2, i2 = mlwe.he_const_mul_complex(re, im, 1 + 2j)
    z = (0.5 - 0.25j) * (1 + 2j)
    assert abs(mlwe.decrypt(sk, r2) - z.real) < 1e-4
    assert abs(mlwe.decrypt(sk, i2) - z.imag) < 1e-4
    with pytest.raises(ValueError):
        mlwe.he_const_mul(re, mlwe.CONST_CAP + 1)
    with pytest.raises(ValueError):
        mlwe.he_const_mul_complex(re, im, 0.5 + 1j)


def test_linear_map_row_sum_rule(toy):
    ctx, sk, pk = toy
    vals = np.array([0.5, 0.25, -0.125])
    ct = mlwe.encrypt(pk, vals, 4)
    M = np.array([[1, -2, 0], [3, 1, 1]])
    out = mlwe.linear_map(ct, M)
    assert np.allclose(mlwe.decrypt(sk, out), M @ vals, atol=1e-4)
    assert out.noise_bound == ct.noise_bound * 5


def test_gsw_bits_and_external_product(toy):
    ctx, sk, pk = toy
    ct = mlwe.encrypt(pk, np.array([0.75, -0.5]), 6)
    for bit in (0, 1):
        g = mlwe.gsw_encrypt(sk, bit, 7)
        assert mlwe.gsw_decrypt(sk, g) == bit
        assert mlwe.gsw_decrypt(sk, mlwe.gsw_not(g)) == 1 - bit
        out = mlwe.external_product(ct, g)
        assert np.allclose(mlwe.decrypt(sk, out), bit * np.array([0.75, -0.5]), atol=1e-3)
        assert mlwe.noise_actual(sk, out, bit * np.array([0.75, -0.5])) <= out.noise_bound
        assert out.noise_bound == ct.noise_bound + ctx.gadget_noise(ctx.k + 1)


def test_cmux_selects(toy):
    ctx, sk, pk = toy
    a, b = mlwe.encrypt(pk, 0.25, 1), mlwe.encrypt(pk, -0.5, 2)
    for bit, want in ((0, 0.25), (1, -0.5)):
        g = mlwe.gsw_encrypt(sk, bit, 3)
        assert abs(mlwe.decrypt(sk, mlwe.cmux(g, a, b)) - want) < 1e-3


def test_decompose_reconstructs(toy):
    ctx, _, _ = toy
    for level in range(3):
        q = ctx.chain[level]
        x = np.array([0, 1, q // 2, q // 2 + 1, q - 1], dtype=np.int64)
        dig = mlwe.decompose(x[:, None], ctx, level)
        assert np.max(np.abs(dig)) <= ctx.gadget_base // 2
        rebuilt = sum(dig[:, l, 0].astype(object) * ctx.gadget_base**l for l in range(dig.shape[1]))
        assert [int(v) % q for v in rebuilt] == [int(v) for v in x]


def test_key_switch_then_mod_switch(toy):
    ctx, sk, pk = toy
    sk1, _ = mlwe.keygen(ctx, 12)
    hint = mlwe.gen_keyswitch_hint(sk, sk1, 13)
    ct = mlwe.encrypt(pk, np.array([0.5, -1.5]), 14)
    ks = mlwe.key_switch(ct, hint)
    assert ks.key_id == sk1.key_id
    assert np.allclose(mlwe.decrypt(sk1, ks), [0.5, -1.5], atol=1e-4)
    ms = mlwe.mod_switch(ks, 1)
    assert ms.modulus_index == 1 and ms.q == ctx.chain[1]
    assert np.allclose(mlwe.decrypt(sk1, ms), [0.5, -1.5], atol=1e-2)
    assert mlwe.noise_actual(sk1, ms, np.array([0.5, -1.5])) <= ms.noise_bound
    with pytest.raises(KeyMismatch):
        mlwe.key_switch(ms, hint)
    with pytest.raises(ValueError):
        mlwe.mod_switch(ms, 0)


def test_raw_bound_twin_matches_ciphertext_bookkeeping(toy):
    ctx, sk, pk = toy
    sk1, _ = mlwe.keygen(ctx, 21)
    hint = mlwe.gen_keyswitch_hint(sk, sk1, 22)
    g = mlwe.gsw_encrypt(sk, 1, 23)
    ct = mlwe.encrypt_sk(sk, 0.5, 24)
    ct = mlwe.he_const_mul(ct + ct, 3)
    ct = mlwe.external_product(ct, g)
    ct = mlwe.mod_switch(mlwe.key_switch(ct, hint), 1)
    trace = [("fresh",), ("double",), ("const", 3), ("ext",), ("ks",), ("ms", 1)]
    assert mlwe.raw_noise_bound_of(trace, ctx) == ct.noise_bound


def test_sigma_ledger_teleport_total():
    labels = ["BELL", "CNOT", "H", "MEAS", "CORR"]
    assert [mlwe.step_weight(x) for x in labels] == [1, 2, 1, 1, 1]
    assert mlwe.noise_bound_of(labels, sigma=3) == 18
    assert mlwe.noise_bound_of(labels, sigma=3, fresh=5) == 23
    assert mlwe.noise_bound_of([("WEAK", Fraction(66, 10))], sigma=3) == Fraction(99, 5)
    assert mlwe.noise_bound_of(["CTRL"], 3) == 9
    assert mlwe.noise_bound_of(["RZ 0"], 3) == 3


def test_serialization_roundtrips(toy):
    ctx, sk, pk = toy
    ct = mlwe.encrypt(pk, np.array([0.5, 0.25, 0.125]), 8)
    back = mlwe.deserialize_ciphertext(mlwe.serialize_ciphertext(ct), ctx)
    assert np.array_equal(np.asarray(back.data, dtype=np.int64), ct.data)
    assert (back.scale_log2, back.noise_bound, back.key_id) == (ct.scale_log2, ct.noise_bound, ct.key_id)
    pk2 = mlwe.deserialize_public_key(mlwe.serialize_public_key(pk), ctx)
    sk2 = mlwe.deserialize_secret_key(mlwe.serialize_secret_key(sk), ctx)
    assert np.allclose(mlwe.decrypt(sk2, mlwe.encrypt(pk2, 0.5, 9)), 0.5, atol=1e-4)
    other = mlwe.make_context("teleport")
    with pytest.raises(ring.ParameterMismatch):
        mlwe.deserialize_ciphertext(mlwe.serialize_ciphertext(ct), other)


def test_decrypt_warns_when_bound_passes_quarter(toy):
    ctx, sk, pk = toy
    ct = mlwe.encrypt(pk, 0.5, 1).with_data(mlwe.encrypt(pk, 0.5, 1).data, ctx.q)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        mlwe.decrypt(sk, ct)
    assert any("q/4" in str(x.message) for x in w)


def test_noise_soundness_fuzz_small():
    rig = FuzzRig(seed=7)
    for _ in range(200):
        measured, bound, _ = rig.run()
        assert measured <= bound

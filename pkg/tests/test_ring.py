import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfhe import ring
from qfhe.ring import ParameterMismatch, RingParams


def small_params(d=16, q=97):
    return RingParams(d, q)


@pytest.mark.parametrize("name", sorted(ring.PRESETS))
def test_preset_chains_are_ntt_friendly_primes(name):
    spec = ring.PRESETS[name]
    d = spec["d"]
    chain = spec["chain"]
    assert list(chain) == sorted(chain, reverse=True)
    for q in chain:
        assert q % (2 * d) == 1
        RingParams(d, q)  # validates primality


def test_teleport_modulus_is_first_prime_above_2_50():
    sympy = pytest.importorskip("sympy")
    d = ring.PRESETS["teleport"]["d"]
    q = ring.PRESETS["teleport"]["chain"][0]
    assert 2**50 < q < 2**50 + 2**20
    assert sympy.isprime(q)
    # no admissible prime between 2^50 and q
    for cand in range(2**50 + 1, q, 2 * d):
        if cand % (2 * d) == 1:
            assert not sympy.isprime(cand)


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        RingParams(16, 91)  # 91 = 7 * 13
    with pytest.raises(ValueError):
        RingParams(16, 101)  # prime but not 1 mod 32
    with pytest.raises(ValueError):
        RingParams(12, 97)
    with pytest.raises(ValueError):
        ring.preset("nope")


@pytest.mark.parametrize("name", ["toy", "teleport"])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ntt_roundtrip(name, seed):
    p = ring.preset(name)
    a = ring.uniform_array(p, ring.make_rng(seed), (2,))
    assert np.array_equal(ring.intt(ring.ntt(a, p), p), a)


@settings(max_examples=50, deadline=None)
@given(
    a=st.lists(st.integers(0, 96), min_size=16, max_size=16),
    b=st.lists(st.integers(0, 96), min_size=16, max_size=16),
)
def test_poly_mul_matches_schoolbook(a, b):
    p = small_params()
    x, y = ring.from_ints(a, p), ring.from_ints(b, p)
    assert (x * y).tolist() == ring.schoolbook_mul(a, b, p.q)


def test_negacyclic_wraparound():
    # x^(d-1) * x = x^d = -1
    p = small_params()
    x = ring.from_ints([0, 1], p)
    top = ring.from_ints([0] * 15 + [1], p)
    assert (top * x).tolist() == [p.q - 1] + [0] * 15


def test_object_dtype_product_matches_schoolbook():
    p = ring.preset("teleport")
    rng = ring.make_rng(3)
    a = ring.uniform_array(p, rng)
    b = ring.uniform_array(p, rng)
    got = ring.negacyclic_mul(a, b, p)
    assert [int(v) for v in got] == ring.schoolbook_mul(list(a), list(b), p.q)


def test_ring_element_arithmetic_and_mismatch():
    p = small_params()
    a = ring.from_ints([1, 2, 3], p)
    b = ring.from_ints([96, 0, 1], p)
    assert (a + b).tolist()[:3] == [0, 2, 4]
    assert (a - a) == ring.zero(p)
    assert (-a + a) == ring.zero(p)
    other = ring.from_ints([1], RingParams(16, 193))
    with pytest.raises(ParameterMismatch):
        a + other
    with pytest.raises(ParameterMismatch):
        a * other


def test_centered_and_norm():
    p = small_params()
    a = ring.from_ints([-5, 48, 49, 3], p)
    assert list(ring.centered(a.coeffs, p.q)[:4]) == [-5, 48, -48, 3]
    assert ring.inf_norm(a, p) == 48


def test_gaussian_sampler_shape_and_tail():
    p = ring.preset("toy")
    e = ring.gaussian_array(p, ring.make_rng(0), (200,))
    assert e.shape == (200, p.d)
    assert np.max(np.abs(e)) <= 6 * p.sigma
    assert abs(e.mean()) < 0.1
    assert abs(e.std() - p.sigma) < 0.2


def test_sampling_is_seed_deterministic():
    p = ring.preset("toy")
    a = ring.uniform_array(p, ring.make_rng("ff"))
    b = ring.uniform_array(p, ring.make_rng(0xFF))
    assert np.array_equal(a, b)


def test_serialize_roundtrip_and_validation():
    p = ring.preset("teleport")
    a = ring.sample_uniform(p, 5)
    buf = ring.serialize(a)
    assert len(buf) == ring.HEADER.size + 8 * p.d
    assert ring.deserialize(buf, preset_name="teleport") == a
    with pytest.raises(ValueError):
        ring.deserialize(b"XXXX" + buf[4:])
    bad = bytearray(buf)
    bad[ring.HEADER.size : ring.HEADER.size + 8] = (p.q).to_bytes(8, "little")
    with pytest.raises(ValueError):
        ring.deserialize(bytes(bad))

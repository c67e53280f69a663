"""Leveled Regev-form encryption over R_q with a noise ledger.

A ``Ciphertext`` holds an array of shape ``(*batch, k+1, d)``: components
``0..k-1`` are the mask vector ``a`` and component ``k`` is
``c = <a, s> + e + encode(m)``.  Plaintexts live in the constant coefficient
as fixed-point numbers at scale ``2**scale_log2`` (re-anchored by the ratio
``q_i / q_0`` after modulus switching).  ``noise_bound`` is a worst-case bound
on the infinity norm of the error over every ciphertext in the batch.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property

import numpy as np

from . import ring
from .ring import ParameterMismatch, RingParams


class PlaintextOverflow(ValueError):
    pass


class KeyMismatch(ValueError):
    pass


# preset -> (rank k, fresh scale bits, gadget base bits)
SCHEME_DEFAULTS = {
    "tiny": (2, 0, 4),
    "toy": (2, 24, 4),
    "teleport": (3, 32, 8),
    "wide": (3, 32, 8),
}
FRAC_BITS = 20
CONST_CAP = 1 << 24


@dataclass(frozen=True)
class Context:
    preset_name: str
    d: int
    chain: tuple[int, ...]
    sigma: int = 3
    k: int = 2
    frac_bits: int = FRAC_BITS
    fresh_scale_log2: int = 24
    gadget_log2: int = 8

    def __post_init__(self):
        if self.k not in (2, 3):
            raise ValueError("rank k must be 2 or 3")

    def ring(self, level: int = 0) -> RingParams:
        return _ring_params(self.d, self.chain[level], self.sigma, self.preset_name)

    @property
    def q(self) -> int:
        return self.chain[0]

    @property
    def gadget_base(self) -> int:
        return 1 << self.gadget_log2

    def gadget_levels(self, level: int = 0) -> int:
        # one spare bit: balanced digits top out just below B^L / 2
        return math.ceil((self.chain[level].bit_length() + 1) / self.gadget_log2)

    @property
    def fresh_sk_bound(self) -> int:
        return 6 * self.sigma

    @property
    def fresh_pk_bound(self) -> int:
        # <e, r> + e2 - <e1, s> with ternary r, s
        return 6 * self.sigma * (2 * self.k * self.d + 1)

    def gadget_noise(self, components: int, level: int = 0) -> int:
        """Additive worst case of sum_j digit_j * row_error_j."""
        return components * self.gadget_levels(level) * self.d * (self.gadget_base // 2) * 6 * self.sigma

    def modswitch_rounding(self) -> int:
        return (1 + self.k * self.d + 1) // 2 + 1


def _ring_params(d, q, sigma, name):
    return _cached_params(d, q, sigma, name)


_PARAM_CACHE: dict = {}


def _cached_params(d, q, sigma, name):
    key = (d, q, sigma, name)
    if key not in _PARAM_CACHE:
        _PARAM_CACHE[key] = RingParams(d, q, sigma, name)
    return _PARAM_CACHE[key]


def make_context(preset: str = "toy", sigma: int = 3, k: int | None = None, **overrides) -> Context:
    dk, scale, glog = SCHEME_DEFAULTS[preset]
    spec = ring.PRESETS[preset]
    ctx = Context(
        preset_name=preset,
        d=spec["d"],
        chain=spec["chain"],
        sigma=sigma,
        k=k or dk,
        fresh_scale_log2=scale,
        gadget_log2=glog,
    )
    return replace(ctx, **overrides) if overrides else ctx


# ---------------------------------------------------------------- keys


@dataclass(frozen=True, eq=False)
class SecretKey:
    s: np.ndarray  # (k, d) signed ternary
    ctx: Context = field(repr=False)
    key_id: str = ""

    @property
    def params(self) -> RingParams:
        return self.ctx.ring(0)

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def at_level(self, level: int) -> np.ndarray:
        return ring.asarray(self.s, self.ctx.ring(level))


@dataclass(frozen=True, eq=False)
class PublicKey:
    seed: bytes
    b: np.ndarray  # (k, d) mod q0
    ctx: Context = field(repr=False)
    key_id: str = ""

    @cached_property
    def A(self) -> np.ndarray:
        return expand_matrix(self.seed, self.ctx)


def expand_matrix(seed: bytes, ctx: Context) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(hashlib.sha256(seed).digest(), "little")))
    return ring.uniform_array(ctx.ring(0), rng, (ctx.k, ctx.k))


def _key_id(s: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(s, dtype=np.int64).tobytes()).hexdigest()[:16]


def _matvec(M: np.ndarray, v: np.ndarray, p: RingParams) -> np.ndarray:
    """(rows, cols, d) x (cols, d) -> (rows, d) over R_q."""
    prods = ring.negacyclic_mul(M, v[None, :, :], p)
    return prods.sum(axis=-2) % p.q


def keygen(ctx: Context, rng, zero_error: bool = False) -> tuple[SecretKey, PublicKey]:
    rng = ring.make_rng(rng)
    p = ctx.ring(0)
    s = ring.ternary_array(p, rng, (ctx.k,))
    seed = rng.bytes(32)
    A = expand_matrix(seed, ctx)
    e = np.zeros((ctx.k, ctx.d), dtype=np.int64) if zero_error else ring.gaussian_array(p, rng, (ctx.k,))
    b = (_matvec(A, ring.asarray(s, p), p) + ring.asarray(e, p)) % p.q
    kid = _key_id(s)
    return SecretKey(s, ctx, kid), PublicKey(seed, b, ctx, kid)


# ---------------------------------------------------------------- ciphertexts


@dataclass(frozen=True, eq=False)
class Ciphertext:
    data: np.ndarray
    scale_log2: int
    noise_bound: int
    modulus_index: int
    ctx: Context = field(repr=False)
    key_id: str = ""

    @property
    def params(self) -> RingParams:
        return self.ctx.ring(self.modulus_index)

    @property
    def q(self) -> int:
        return self.ctx.chain[self.modulus_index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape[:-2]

    @property
    def a(self) -> np.ndarray:
        return self.data[..., :-1, :]

    @property
    def c(self) -> np.ndarray:
        return self.data[..., -1, :]

    def __getitem__(self, idx) -> Ciphertext:
        if not isinstance(idx, tuple):
            idx = (idx,)
        return replace(self, data=self.data[idx + (Ellipsis,)] if len(idx) else self.data)

    def with_data(self, data, noise_bound=None, **kw) -> Ciphertext:
        nb = self.noise_bound if noise_bound is None else noise_bound
        return replace(self, data=data, noise_bound=int(nb), **kw)

    def __add__(self, other):
        return he_add(self, other)

    def __sub__(self, other):
        return he_sub(self, other)

    def __neg__(self):
        return self.with_data((-self.data) % self.q)


def stack(cts, axis: int = 0) -> Ciphertext:
    cts = list(cts)
    first = cts[0]
    for ct in cts[1:]:
        _check_compatible(first, ct)
    return first.with_data(
        np.stack([ct.data for ct in cts], axis=axis),
        noise_bound=max(ct.noise_bound for ct in cts),
    )


def _value_scale(ctx: Context, scale_log2: int, level: int) -> Fraction:
    return Fraction(2**scale_log2 * ctx.chain[level], ctx.chain[0])


def encode(m, scale_log2: int, ctx: Context, level: int = 0) -> int:
    """Exact fixed-point encoding: round(m * 2^S * q_i / q_0)."""
    if isinstance(m, (float, np.floating)) and not math.isfinite(m):
        raise ValueError("non-finite plaintext")
    v = Fraction(m) * _value_scale(ctx, scale_log2, level)
    return math.floor(v + Fraction(1, 2))


def _encode_array(m, scale_log2, ctx, level=0) -> np.ndarray:
    arr = np.asarray(m, dtype=object)
    return np.vectorize(lambda x: encode(x, scale_log2, ctx, level), otypes=[object])(arr) if arr.shape else np.array(
        encode(arr.item(), scale_log2, ctx, level), dtype=object
    )


def _embed_plaintext(ints: np.ndarray, ctx: Context, level: int) -> np.ndarray:
    p = ctx.ring(level)
    lim = p.q // 4
    if any(abs(int(v)) >= lim for v in np.asarray(ints).reshape(-1)):
        raise PlaintextOverflow("encoded plaintext exceeds q/4 headroom")
    out = np.zeros(np.shape(ints) + (p.d,), dtype=object)
    out[..., 0] = ints
    return ring.asarray(out, p)


def encrypt(pk: PublicKey, m, rng, scale_log2: int | None = None) -> Ciphertext:
    """Public-key encryption of a real scalar or an array of them."""
    ctx = pk.ctx
    rng = ring.make_rng(rng)
    S = ctx.fresh_scale_log2 if scale_log2 is None else scale_log2
    p = ctx.ring(0)
    ints = _encode_array(m, S, ctx)
    msg = _embed_plaintext(ints, ctx, 0)
    batch = ints.shape
    r = ring.asarray(ring.ternary_array(p, rng, batch + (ctx.k,)), p)
    e1 = ring.asarray(ring.gaussian_array(p, rng, batch + (ctx.k,)), p)
    e2 = ring.asarray(ring.gaussian_array(p, rng, batch), p)
    AT = np.swapaxes(pk.A, 0, 1)  # a_j = sum_i A[i][j] r_i
    a = (ring.negacyclic_mul(AT, r[..., None, :, :], p).sum(axis=-2) + e1) % p.q
    c = (ring.negacyclic_mul(pk.b, r, p).sum(axis=-2) + e2 + msg) % p.q
    data = np.concatenate((a, c[..., None, :]), axis=-2)
    return Ciphertext(data, S, ctx.fresh_pk_bound, 0, ctx, pk.key_id)


def _inner_s(a: np.ndarray, sk: SecretKey, level: int) -> np.ndarray:
    p = sk.ctx.ring(level)
    return ring.negacyclic_mul(a, sk.at_level(level), p).sum(axis=-2) % p.q


def encrypt_sk(sk: SecretKey, m, rng, scale_log2: int | None = None, level: int = 0) -> Ciphertext:
    """Secret-key encryption; the error is a single tail-cut Gaussian."""
    ctx = sk.ctx
    rng = ring.make_rng(rng)
    S = ctx.fresh_scale_log2 if scale_log2 is None else scale_log2
    p = ctx.ring(level)
    ints = _encode_array(m, S, ctx, level)
    msg = _embed_plaintext(ints, ctx, level)
    batch = ints.shape
    a = ring.uniform_array(p, rng, batch + (ctx.k,))
    e = ring.asarray(ring.gaussian_array(p, rng, batch), p)
    c = (_inner_s(a, sk, level) + e + msg) % p.q
    data = np.concatenate((a, c[..., None, :]), axis=-2)
    return Ciphertext(data, S, ctx.fresh_sk_bound, level, ctx, sk.key_id)


def trivial(value_ints, like: Ciphertext) -> Ciphertext:
    """Noise-free encryption of already-encoded integers (public operation)."""
    p = like.params
    data = np.zeros(np.shape(value_ints) + (like.ctx.k + 1, p.d), dtype=p.dtype)
    data[..., -1, :] = _embed_plaintext(np.asarray(value_ints, dtype=object), like.ctx, like.modulus_index)
    return like.with_data(data, noise_bound=0)


def phase(sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    """Centered c - <a, s>, all coefficients."""
    if ct.key_id != sk.key_id:
        raise KeyMismatch("ciphertext not under this key")
    p = ct.params
    return ring.centered((ct.c - _inner_s(ct.a, sk, ct.modulus_index)) % p.q, p.q)


def decrypt(sk: SecretKey, ct: Ciphertext, round_bits: int | None = None):
    """Decode the constant coefficient as a signed fixed-point value.

    Returns a float for a single ciphertext, an ndarray for a batch.
    """
    if ct.noise_bound >= ct.q // 4:
        warnings.warn("noise bound exceeds q/4; decryption may be wrong", RuntimeWarning)
    F = ct.ctx.frac_bits if round_bits is None else round_bits
    ph = phase(sk, ct)[..., 0]
    scale = _value_scale(ct.ctx, ct.scale_log2, ct.modulus_index)
    # value * 2^F, rounded to the nearest integer
    num = scale.denominator * (1 << F)

    def dec(x):
        n = int(x) * num
        return math.floor(Fraction(n, scale.numerator) + Fraction(1, 2)) / (1 << F)

    out = np.vectorize(dec, otypes=[float])(np.asarray(ph, dtype=object))
    return float(out) if out.ndim == 0 else out


def noise_actual(sk: SecretKey, ct: Ciphertext, reference_plaintext) -> int:
    """Infinity norm of c - <a,s> - encode(reference) over the whole batch."""
    ph = phase(sk, ct)
    ref = _encode_array(reference_plaintext, ct.scale_log2, ct.ctx, ct.modulus_index)
    ref = np.broadcast_to(ref, ct.shape)
    err = ph.astype(object).copy()
    err[..., 0] = err[..., 0] - ref
    return int(np.max(np.abs(err))) if err.size else 0


# ---------------------------------------------------------------- homomorphic ops


def _check_compatible(x: Ciphertext, y: Ciphertext):
    if x.key_id != y.key_id:
        raise KeyMismatch("ciphertexts under different keys")
    if x.modulus_index != y.modulus_index:
        raise ParameterMismatch("modulus index mismatch")
    if x.scale_log2 != y.scale_log2:
        raise ParameterMismatch("scale mismatch")


def he_add(ct1: Ciphertext, ct2: Ciphertext) -> Ciphertext:
    _check_compatible(ct1, ct2)
    return ct1.with_data((ct1.data + ct2.data) % ct1.q, ct1.noise_bound + ct2.noise_bound)


def he_sub(ct1: Ciphertext, ct2: Ciphertext) -> Ciphertext:
    _check_compatible(ct1, ct2)
    return ct1.with_data((ct1.data - ct2.data) % ct1.q, ct1.noise_bound + ct2.noise_bound)


def he_sum(cts) -> Ciphertext:
    cts = list(cts)
    out = cts[0]
    for ct in cts[1:]:
        out = he_add(out, ct)
    return out


def he_const_mul(ct: Ciphertext, alpha: int) -> Ciphertext:
    if isinstance(alpha, complex):
        raise TypeError("use he_const_mul_complex for Gaussian-integer constants")
    alpha = int(alpha)
    if abs(alpha) > CONST_CAP:
        raise ValueError(f"|alpha| exceeds cap {CONST_CAP}")
    return ct.with_data((ct.data * alpha) % ct.q, ct.noise_bound * abs(alpha))


def he_const_mul_complex(re: Ciphertext, im: Ciphertext, alpha: complex) -> tuple[Ciphertext, Ciphertext]:
    """(re + i im) * (x + i y) on a ciphertext pair."""
    x, y = int(alpha.real), int(alpha.imag)
    if complex(x, y) != complex(alpha):
        raise ValueError("alpha must be a Gaussian integer")
    if abs(x) > CONST_CAP or abs(y) > CONST_CAP:
        raise ValueError(f"|alpha| exceeds cap {CONST_CAP}")
    _check_compatible(re, im)
    q = re.q
    new_re = (re.data * x - im.data * y) % q
    new_im = (im.data * x + re.data * y) % q
    nb = max(re.noise_bound, im.noise_bound) * (abs(x) + abs(y))
    return re.with_data(new_re, nb), re.with_data(new_im, nb)


def linear_map(ct: Ciphertext, matrix, axis_len: int | None = None) -> Ciphertext:
    """Integer linear combination over the leading batch axis.

    ``ct`` has shape ``(n, ...)``; ``matrix`` is ``(m, n)``.  Rule (i): the
    bound grows by the largest absolute row sum of the matrix.
    """
    M = np.asarray(matrix, dtype=object)
    q = ct.q
    if ct.data.dtype == object:
        data = np.tensordot(M, ct.data, axes=(1, 0)) % q
    else:
        data = np.tensordot(M.astype(np.int64), ct.data, axes=(1, 0)) % q
    row = max((sum(abs(int(v)) for v in r) for r in M), default=0)
    return ct.with_data(data, ct.noise_bound * row)


def rescale_ledger(ct: Ciphertext, delta_bits: int) -> Ciphertext:
    """Reinterpret the scale; multiplies the plaintext by 2^-delta_bits exactly."""
    return replace(ct, scale_log2=ct.scale_log2 + delta_bits)


# ---------------------------------------------------------------- gadget / GSW


def decompose(data: np.ndarray, ctx: Context, level: int) -> np.ndarray:
    """Balanced base-B digits: (..., d) -> (..., levels, d), values in [-B/2, B/2)."""
    q = ctx.chain[level]
    B = ctx.gadget_base
    half = B // 2
    x = ring.centered(data, q)
    if x.dtype != object and q.bit_length() > ring.INT64_LIMIT_BITS:
        x = x.astype(object)
    digits = []
    for _ in range(ctx.gadget_levels(level)):
        dgt = (x + half) % B - half
        digits.append(dgt)
        x = (x - dgt) // B
    if np.any(x != 0):
        raise AssertionError("gadget decomposition did not terminate")
    return np.stack(digits, axis=-2)


@dataclass(frozen=True, eq=False)
class GswCiphertext:
    rows: np.ndarray  # ((k+1)*levels, k+1, d)
    ctx: Context = field(repr=False)
    modulus_index: int = 0
    key_id: str = ""
    noise_bound: int = 0

    @property
    def gadget_base_log2(self) -> int:
        return self.ctx.gadget_log2

    @property
    def levels(self) -> int:
        return self.ctx.gadget_levels(self.modulus_index)

    @cached_property
    def rows_ntt(self) -> np.ndarray:
        return ring.ntt(self.rows, self.ctx.ring(self.modulus_index))


def _gadget_rows(ctx: Context, level: int) -> np.ndarray:
    p = ctx.ring(level)
    L = ctx.gadget_levels(level)
    comps = ctx.k + 1
    G = np.zeros((comps * L, comps, p.d), dtype=object)
    for c in range(comps):
        for l in range(L):
            G[c * L + l, c, 0] = pow(ctx.gadget_base, l, p.q)
    return ring.asarray(G, p)


def gsw_encrypt(sk: SecretKey, bit: int, rng, level: int = 0) -> GswCiphertext:
    if bit not in (0, 1):
        raise ValueError("GSW plaintext must be a bit")
    ctx = sk.ctx
    rng = ring.make_rng(rng)
    p = ctx.ring(level)
    nrows = (ctx.k + 1) * ctx.gadget_levels(level)
    a = ring.uniform_array(p, rng, (nrows, ctx.k))
    e = ring.asarray(ring.gaussian_array(p, rng, (nrows,)), p)
    c = (_inner_s(a, sk, level) + e) % p.q
    rows = np.concatenate((a, c[:, None, :]), axis=1)
    if bit:
        rows = (rows + _gadget_rows(ctx, level)) % p.q
    return GswCiphertext(rows, ctx, level, sk.key_id, ctx.fresh_sk_bound)


def gsw_not(g: GswCiphertext) -> GswCiphertext:
    """Encryption of 1 - b: gadget matrix minus the rows."""
    p = g.ctx.ring(g.modulus_index)
    return replace(g, rows=(_gadget_rows(g.ctx, g.modulus_index) - g.rows) % p.q)


def gsw_decrypt(sk: SecretKey, g: GswCiphertext) -> int:
    ctx = g.ctx
    q = ctx.chain[g.modulus_index]
    L = g.levels
    top = max(l for l in range(L) if ctx.gadget_base**l <= q // 4)
    row = g.rows[ctx.k * L + top]
    ct = Ciphertext(row, 0, 0, g.modulus_index, ctx, g.key_id)
    ph = int(phase(sk, ct)[0])
    return int(round(ph / ctx.gadget_base**top)) & 1 if abs(ph) < q // 2 else 1


def external_product(ct: Ciphertext, g: GswCiphertext) -> Ciphertext:
    if ct.key_id != g.key_id:
        raise KeyMismatch("GSW ciphertext under a different key")
    if ct.modulus_index != g.modulus_index:
        raise ParameterMismatch("modulus index mismatch")
    ctx, level = ct.ctx, ct.modulus_index
    p = ctx.ring(level)
    dig = decompose(ct.data, ctx, level)  # (..., k+1, L, d)
    lead = dig.shape[:-3]
    dig = ring.asarray(dig.reshape(lead + (-1, p.d)), p)  # (..., R, d)
    dn = ring.ntt(dig, p)
    prod = (dn[..., :, None, :] * g.rows_ntt) % p.q  # (..., R, k+1, d)
    acc = prod.sum(axis=-3) % p.q
    out = ring.intt(acc, p)
    nb = ct.noise_bound + ctx.gadget_noise(ctx.k + 1, level)
    return ct.with_data(out, nb)


def gadget_digits_ntt(ct: Ciphertext) -> np.ndarray:
    """NTT of the balanced gadget digits of every component: (..., (k+1)L, d)."""
    ctx, level = ct.ctx, ct.modulus_index
    p = ctx.ring(level)
    dig = decompose(ct.data, ctx, level)
    lead = dig.shape[:-3]
    return ring.ntt(ring.asarray(dig.reshape(lead + (-1, p.d)), p), p)


def mac_digits(dn: np.ndarray, g: GswCiphertext) -> np.ndarray:
    """NTT-domain external product from precomputed digits; (..., k+1, d)."""
    q = g.ctx.chain[g.modulus_index]
    return ((dn[..., :, None, :] * g.rows_ntt) % q).sum(axis=-3) % q


def cmux(g: GswCiphertext, ct_if_zero: Ciphertext, ct_if_one: Ciphertext) -> Ciphertext:
    """b ? one : zero, as ct0 + (ct1 - ct0) [x] g."""
    diff = he_sub(ct_if_one, ct_if_zero)
    return he_add(ct_if_zero, external_product(diff, g))


# ---------------------------------------------------------------- key / modulus switching


@dataclass(frozen=True, eq=False)
class KeySwitchHint:
    from_key_id: str
    to_key_id: str
    hint: np.ndarray  # (k*levels, k+1, d)
    ctx: Context = field(repr=False)
    modulus_index: int = 0

    @cached_property
    def hint_ntt(self):
        return ring.ntt(self.hint, self.ctx.ring(self.modulus_index))


def gen_keyswitch_hint(sk_from: SecretKey, sk_to: SecretKey, rng, level: int = 0) -> KeySwitchHint:
    if sk_from.ctx.d != sk_to.ctx.d or sk_from.ctx.chain != sk_to.ctx.chain:
        raise ParameterMismatch("keys must share parameters")
    ctx = sk_to.ctx
    rng = ring.make_rng(rng)
    p = ctx.ring(level)
    L = ctx.gadget_levels(level)
    nrows = ctx.k * L
    a = ring.uniform_array(p, rng, (nrows, ctx.k))
    e = ring.asarray(ring.gaussian_array(p, rng, (nrows,)), p)
    c = (_inner_s(a, sk_to, level) + e) % p.q
    s_from = sk_from.at_level(level)
    for j in range(ctx.k):
        for l in range(L):
            c[j * L + l] = (c[j * L + l] + s_from[j] * pow(ctx.gadget_base, l, p.q)) % p.q
    rows = np.concatenate((a, c[:, None, :]), axis=1)
    return KeySwitchHint(sk_from.key_id, sk_to.key_id, rows, ctx, level)


def key_switch(ct: Ciphertext, hint: KeySwitchHint) -> Ciphertext:
    if ct.key_id != hint.from_key_id:
        raise KeyMismatch("hint does not start from the ciphertext's key")
    if ct.modulus_index != hint.modulus_index:
        raise ParameterMismatch("hint generated for another modulus level")
    ctx, level = ct.ctx, ct.modulus_index
    p = ctx.ring(level)
    dig = decompose(ct.a, ctx, level)  # (..., k, L, d)
    lead = dig.shape[:-3]
    dig = ring.asarray(dig.reshape(lead + (-1, p.d)), p)
    dn = ring.ntt(dig, p)
    acc = ((dn[..., :, None, :] * hint.hint_ntt) % p.q).sum(axis=-3) % p.q
    acc = ring.intt(acc, p)  # (..., k+1, d): encrypts <a, s_from> under s_to
    out = (-acc) % p.q
    out[..., -1, :] = (ct.c - acc[..., -1, :]) % p.q
    nb = ct.noise_bound + ctx.gadget_noise(ctx.k, level)
    return replace(ct, data=out, noise_bound=int(nb), key_id=hint.to_key_id)


def mod_switch(ct: Ciphertext, target_index: int) -> Ciphertext:
    ctx = ct.ctx
    if not 0 <= target_index < len(ctx.chain) or target_index < ct.modulus_index:
        raise ValueError(f"modulus index {target_index} not reachable in chain")
    if target_index == ct.modulus_index:
        return ct
    q, q2 = ct.q, ctx.chain[target_index]
    x = np.asarray(ct.data, dtype=object)
    scaled = (x * q2 + q // 2) // q % q2
    p2 = ctx.ring(target_index)
    nb = -(-ct.noise_bound * q2 // q) + ctx.modswitch_rounding()
    return replace(ct, data=ring.asarray(scaled, p2), noise_bound=int(nb), modulus_index=target_index)


# ---------------------------------------------------------------- analytic ledger


# Additive sigma-unit increments per step, as in the worst-case teleportation
# budget table.  Anything not listed costs one sigma.
SIGMA_WEIGHTS = {
    "BELL": 1, "H": 1, "CNOT": 2, "MEAS": 1, "CORR": 1,
    "CTRL": 3, "CAPSULE": 2, "TRACE": 0, "NORM": 0,
}


def step_weight(item) -> Fraction:
    """Sigma multiplier of one trace item: a label or a (label, multiplier) pair."""
    if isinstance(item, tuple):
        label, mult = item
        if label.upper() == "WEAK":
            return Fraction(mult).limit_denominator(10**9)
        return Fraction(SIGMA_WEIGHTS.get(label.upper(), 1)) * Fraction(mult)
    return Fraction(SIGMA_WEIGHTS.get(str(item).split()[0].upper(), 1))


def noise_bound_of(op_trace, sigma: int = 3, fresh: int = 0):
    """Analytic tracker: fresh start plus sigma times the summed step weights.

    The fresh level defaults to zero because the first table row (Bell
    preparation) already carries the encryption noise.
    """
    total = Fraction(fresh) + sigma * sum((step_weight(it) for it in op_trace), Fraction(0))
    return int(total) if total.denominator == 1 else total


def raw_noise_bound_of(op_trace, ctx: Context, start: int | None = None) -> int:
    """Worst-case raw bound from rules (i)-(iv) over a trace of ops.

    Trace items: ("fresh",) | ("add", other_bound) | ("double",) |
    ("linear", row_sum) | ("const", alpha) | ("ext",) | ("ks",) | ("ms", target).
    """
    eta = ctx.fresh_sk_bound if start is None else start
    level = 0
    for op in op_trace:
        kind = op[0]
        if kind == "fresh":
            eta = ctx.fresh_sk_bound
        elif kind == "double":
            eta = 2 * eta
        elif kind == "add":
            eta = eta + op[1]
        elif kind == "linear":
            eta = eta * op[1]
        elif kind == "const":
            eta = eta * abs(int(op[1]))
        elif kind == "ext":
            eta = eta + ctx.gadget_noise(ctx.k + 1, level)
        elif kind == "ks":
            eta = eta + ctx.gadget_noise(ctx.k, level)
        elif kind == "ms":
            q, q2 = ctx.chain[level], ctx.chain[op[1]]
            eta = -(-eta * q2 // q) + ctx.modswitch_rounding()
            level = op[1]
        else:
            raise ValueError(f"unknown op {kind!r}")
    return eta


# ---------------------------------------------------------------- serialization

_CT_META = struct.Struct("<IiQI")
_KEY_META = struct.Struct("<8sB")


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    count = int(np.prod(ct.shape, dtype=np.int64)) if ct.shape else 1
    head = ring.pack_header(ct.params)
    meta = _CT_META.pack(ct.modulus_index, ct.scale_log2, min(ct.noise_bound, 2**64 - 1), count)
    return head + meta + bytes.fromhex(ct.key_id or "0" * 16) + ring.coeff_bytes(ct.data)


def deserialize_ciphertext(buf: bytes, ctx: Context) -> Ciphertext:
    d, q = ring.unpack_header(buf)
    off = ring.HEADER.size
    level, scale, nb, count = _CT_META.unpack_from(buf, off)
    off += _CT_META.size
    kid = buf[off : off + 8].hex()
    off += 8
    if ctx.chain[level] != q or ctx.d != d:
        raise ParameterMismatch("ciphertext parameters do not match context")
    n = count * (ctx.k + 1) * d
    vals = ring.coeffs_from_bytes(buf, n, off)
    p = ctx.ring(level)
    data = ring.asarray(np.array(vals, dtype=object), p).reshape(((count,) if count > 1 else ()) + (ctx.k + 1, d))
    return Ciphertext(data, scale, nb, level, ctx, kid)


def serialize_public_key(pk: PublicKey) -> bytes:
    return (
        ring.pack_header(pk.ctx.ring(0))
        + _KEY_META.pack(bytes.fromhex(pk.key_id), pk.ctx.k)
        + pk.seed
        + ring.coeff_bytes(pk.b)
    )


def deserialize_public_key(buf: bytes, ctx: Context) -> PublicKey:
    d, q = ring.unpack_header(buf)
    off = ring.HEADER.size
    kid, k = _KEY_META.unpack_from(buf, off)
    off += _KEY_META.size
    if (d, q, k) != (ctx.d, ctx.q, ctx.k):
        raise ParameterMismatch("key parameters do not match context")
    seed = buf[off : off + 32]
    vals = ring.coeffs_from_bytes(buf, k * d, off + 32)
    b = ring.asarray(np.array(vals, dtype=object), ctx.ring(0)).reshape(k, d)
    return PublicKey(seed, b, ctx, kid.hex())


def serialize_secret_key(sk: SecretKey) -> bytes:
    codes = (np.asarray(sk.s, dtype=np.int64).reshape(-1) + 1).astype(np.uint8)  # {0,1,2}
    pad = (-codes.size) % 4
    codes = np.concatenate((codes, np.zeros(pad, dtype=np.uint8))).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return (
        ring.pack_header(sk.ctx.ring(0))
        + _KEY_META.pack(bytes.fromhex(sk.key_id), sk.rank)
        + packed.astype(np.uint8).tobytes()
    )


def deserialize_secret_key(buf: bytes, ctx: Context) -> SecretKey:
    d, q = ring.unpack_header(buf)
    off = ring.HEADER.size
    kid, k = _KEY_META.unpack_from(buf, off)
    off += _KEY_META.size
    packed = np.frombuffer(buf[off:], dtype=np.uint8)
    codes = np.stack([(packed >> sh) & 3 for sh in (0, 2, 4, 6)], axis=1).reshape(-1)[: k * d]
    s = codes.astype(np.int64).reshape(k, d) - 1
    return SecretKey(s, ctx, kid.hex())

"""Arithmetic in R_q = Z_q[x]/(x^d + 1).

Coefficient arrays are numpy arrays whose last axis has length ``d``; any
leading axes are treated as a batch.  Moduli below 2**31 use int64 storage
(products fit in 63 bits before reduction); larger moduli fall back to
object arrays of Python ints so that products are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAGIC = b"QFHE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHQ")  # 16 bytes

# Frozen modulus chains.  Level 0 is the smallest prime above 2**b with
# q = 1 (mod 2d); each later level is the largest admissible prime below the
# previous one divided by the chain ratio.
PRESETS: dict[str, dict] = {
    "tiny": {"d": 64, "chain": (65537, 3329, 257)},
    "toy": {"d": 64, "chain": (1073741953, 1048193, 769)},
    "teleport": {"d": 256, "chain": (1125899906844161, 1099511603713, 1073738753)},
    "wide": {"d": 512, "chain": (1125899906856961, 1099511592961, 1073738753)},
}

INT64_LIMIT_BITS = 31


class ParameterMismatch(ValueError):
    pass


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    r, s = n - 1, 0
    while r % 2 == 0:
        r //= 2
        s += 1
    for a in small:
        x = pow(a, r, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class RingParams:
    d: int
    q: int
    sigma: int = 3
    preset_name: str = "custom"

    def __post_init__(self):
        if self.d not in (8, 16, 32, 64, 128, 256, 512):
            raise ValueError(f"unsupported degree d={self.d}")
        if self.q % (2 * self.d) != 1:
            raise ValueError(f"q={self.q} is not 1 mod 2d")
        if not _is_prime(self.q):
            raise ValueError(f"q={self.q} is not prime")
        if self.sigma < 1:
            raise ValueError("sigma must be >= 1")

    @property
    def dtype(self):
        return np.int64 if self.q.bit_length() <= INT64_LIMIT_BITS else object

    def with_modulus(self, q: int) -> RingParams:
        return RingParams(self.d, q, self.sigma, self.preset_name)


def preset(name: str, sigma: int = 3, level: int = 0) -> RingParams:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}") from None
    return RingParams(spec["d"], spec["chain"][level], sigma, name)


def modulus_chain(name: str) -> tuple[int, ...]:
    return PRESETS[name]["chain"]


@dataclass(frozen=True, eq=False)
class RingElement:
    coeffs: np.ndarray
    params: RingParams = field(repr=False)

    def __post_init__(self):
        if self.coeffs.shape[-1] != self.params.d:
            raise ValueError("coefficient length must equal d")

    def __eq__(self, other):
        return (
            isinstance(other, RingElement)
            and self.params == other.params
            and np.array_equal(self.coeffs, other.coeffs)
        )

    def _check(self, other):
        if self.params != other.params:
            raise ParameterMismatch("ring elements under different parameters")

    def __add__(self, other):
        self._check(other)
        return RingElement((self.coeffs + other.coeffs) % self.params.q, self.params)

    def __sub__(self, other):
        self._check(other)
        return RingElement((self.coeffs - other.coeffs) % self.params.q, self.params)

    def __neg__(self):
        return RingElement((-self.coeffs) % self.params.q, self.params)

    def __mul__(self, other):
        return poly_mul(self, other, self.params)

    def tolist(self) -> list[int]:
        return [int(c) for c in self.coeffs]


def from_ints(values, p: RingParams) -> RingElement:
    """Build an element from (possibly negative) integers, padding to d."""
    vals = [int(v) % p.q for v in values]
    vals += [0] * (p.d - len(vals))
    return RingElement(np.array(vals, dtype=p.dtype), p)


def zero(p: RingParams) -> RingElement:
    return RingElement(np.zeros(p.d, dtype=p.dtype), p)


def asarray(values, p: RingParams) -> np.ndarray:
    arr = np.asarray(values)
    if p.dtype is object:
        return np.vectorize(int, otypes=[object])(arr) % p.q if arr.size else arr.astype(object)
    return arr.astype(np.int64) % p.q


# ---------------------------------------------------------------- NTT


def _bitrev(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


def _primitive_root_2d(d: int, q: int) -> int:
    order = 2 * d
    exp = (q - 1) // order
    for g in range(2, q):
        psi = pow(g, exp, q)
        if pow(psi, d, q) == q - 1:
            return psi
    raise ValueError("no primitive 2d-th root of unity")


@lru_cache(maxsize=None)
def _tables(d: int, q: int):
    psi = _primitive_root_2d(d, q)
    bits = d.bit_length() - 1
    zetas = [pow(psi, _bitrev(k, bits), q) for k in range(d)]
    dtype = np.int64 if q.bit_length() <= INT64_LIMIT_BITS else object
    return np.array(zetas, dtype=dtype), pow(d, -1, q)


def ntt(a: np.ndarray, p: RingParams) -> np.ndarray:
    """Forward negacyclic NTT along the last axis (bit-reversed output)."""
    d, q = p.d, p.q
    zetas, _ = _tables(d, q)
    x = np.array(a, dtype=p.dtype, copy=True)
    lead = x.shape[:-1]
    length = d // 2
    while length >= 1:
        blocks = d // (2 * length)
        v = x.reshape(lead + (blocks, 2, length))
        z = zetas[blocks : 2 * blocks].reshape(blocks, 1)
        t = (v[..., 1, :] * z) % q
        lo = v[..., 0, :]
        x = np.stack(((lo + t) % q, (lo - t) % q), axis=-2).reshape(lead + (d,))
        length //= 2
    return x


def intt(a: np.ndarray, p: RingParams) -> np.ndarray:
    d, q = p.d, p.q
    zetas, d_inv = _tables(d, q)
    x = np.array(a, dtype=p.dtype, copy=True)
    lead = x.shape[:-1]
    length = 1
    while length < d:
        blocks = d // (2 * length)
        v = x.reshape(lead + (blocks, 2, length))
        idx = np.arange(2 * blocks - 1, blocks - 1, -1)
        z = ((q - zetas[idx]) % q).reshape(blocks, 1)
        lo, hi = v[..., 0, :], v[..., 1, :]
        new_lo = (lo + hi) % q
        new_hi = ((lo - hi) % q * z) % q
        x = np.stack((new_lo, new_hi), axis=-2).reshape(lead + (d,))
        length *= 2
    return (x * d_inv) % q


def negacyclic_mul(a: np.ndarray, b: np.ndarray, p: RingParams) -> np.ndarray:
    """Batched a*b mod (x^d+1, q); broadcasting over leading axes."""
    return intt((ntt(a, p) * ntt(b, p)) % p.q, p)


def poly_mul(a: RingElement, b: RingElement, p: RingParams) -> RingElement:
    if a.params != p or b.params != p:
        raise ParameterMismatch("operands must share ring parameters")
    return RingElement(negacyclic_mul(a.coeffs, b.coeffs, p), p)


def schoolbook_mul(a, b, q: int) -> list[int]:
    """O(d^2) negacyclic product on plain integer lists; test oracle."""
    d = len(a)
    out = [0] * d
    for i in range(d):
        for j in range(d):
            k = i + j
            if k < d:
                out[k] += int(a[i]) * int(b[j])
            else:
                out[k - d] -= int(a[i]) * int(b[j])
    return [v % q for v in out]


# ---------------------------------------------------------------- samplers


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, str):
        seed = int(seed, 16)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)] if hasattr(
        rng.bit_generator, "spawn"
    ) else [np.random.Generator(np.random.PCG64(s)) for s in rng.integers(0, 2**63, n)]


def uniform_array(p: RingParams, rng: np.random.Generator, shape=()) -> np.ndarray:
    out = rng.integers(0, p.q, size=tuple(shape) + (p.d,), dtype=np.int64)
    return out if p.dtype is np.int64 else out.astype(object)


def gaussian_array(p: RingParams, rng: np.random.Generator, shape=(), sigma=None) -> np.ndarray:
    """Centered discrete Gaussian by rejection over [-6s, 6s]; returns signed ints."""
    s = p.sigma if sigma is None else sigma
    bound = 6 * s
    n = int(np.prod(shape, dtype=np.int64)) * p.d
    out = np.empty(0, dtype=np.int64)
    while out.size < n:
        need = n - out.size
        cand = rng.integers(-bound, bound + 1, size=2 * need + 16)
        keep = rng.random(cand.size) < np.exp(-(cand.astype(float) ** 2) / (2.0 * s * s))
        out = np.concatenate((out, cand[keep][:need]))
    return out.reshape(tuple(shape) + (p.d,))


def ternary_array(p: RingParams, rng: np.random.Generator, shape=()) -> np.ndarray:
    return rng.integers(-1, 2, size=tuple(shape) + (p.d,), dtype=np.int64)


def sample_uniform(p: RingParams, rng) -> RingElement:
    return RingElement(uniform_array(p, make_rng(rng)), p)


def sample_gaussian(p: RingParams, rng) -> RingElement:
    return RingElement(asarray(gaussian_array(p, make_rng(rng)), p), p)


# ---------------------------------------------------------------- norms


def centered(a: np.ndarray, q: int) -> np.ndarray:
    """Representatives in (-q/2, q/2]."""
    a = a % q
    return np.where(a > q // 2, a - q, a)


def inf_norm(a: RingElement | np.ndarray, p: RingParams) -> int:
    coeffs = a.coeffs if isinstance(a, RingElement) else a
    if np.size(coeffs) == 0:
        return 0
    return int(np.max(np.abs(centered(coeffs, p.q))))


# ---------------------------------------------------------------- wire format


def pack_header(p: RingParams) -> bytes:
    return HEADER.pack(MAGIC, FORMAT_VERSION, p.d, p.q)


def unpack_header(buf: bytes) -> tuple[int, int]:
    magic, version, d, q = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError("bad magic")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return d, q


def coeff_bytes(a: np.ndarray) -> bytes:
    flat = [int(v) for v in np.asarray(a).reshape(-1)]
    return struct.pack(f"<{len(flat)}Q", *flat)


def coeffs_from_bytes(buf: bytes, count: int, offset: int = 0) -> list[int]:
    return list(struct.unpack_from(f"<{count}Q", buf, offset))


def serialize(a: RingElement) -> bytes:
    return pack_header(a.params) + coeff_bytes(a.coeffs)


def deserialize(buf: bytes, sigma: int = 3, preset_name: str = "custom") -> RingElement:
    d, q = unpack_header(buf)
    p = RingParams(d, q, sigma, preset_name)
    vals = coeffs_from_bytes(buf, d, HEADER.size)
    if any(v >= q for v in vals):
        raise ValueError("coefficient out of range")
    return RingElement(np.array(vals, dtype=p.dtype), p)

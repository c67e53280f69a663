"""Dense density-matrix oracle: channels, exact gate superoperators, masks.

Qubit 0 is the most significant bit of a basis index.  Superoperators act on
row-major vectorized matrices, so ``vec(U rho U^dag) = (U kron conj(U)) vec(rho)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mlwe import SIGMA_WEIGHTS

MAX_DIM = 64
HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-9
PSD_TOL = -1e-6


class DimensionError(ValueError):
    pass


def _check_dim(dim: int):
    if dim > MAX_DIM:
        raise DimensionError(f"dimension {dim} exceeds dense limit {MAX_DIM}")
    if dim & (dim - 1):
        raise DimensionError("dimension must be a power of two")


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    entries: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=complex)
        object.__setattr__(self, "entries", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density matrix must be square")
        _check_dim(m.shape[0])

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_qubits(self) -> int:
        return self.dim.bit_length() - 1

    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def validate(self, tol: float = TRACE_TOL) -> None:
        m = self.entries
        if np.max(np.abs(m - m.conj().T)) > max(tol, HERMITIAN_TOL):
            raise ValueError("not Hermitian")
        tr = self.trace()
        if self.normalized and abs(tr - 1) > tol:
            raise ValueError(f"trace {tr} != 1")
        if not self.normalized and not (0 < tr <= 1 + tol):
            raise ValueError(f"branch trace {tr} outside (0, 1]")
        if np.min(np.linalg.eigvalsh((m + m.conj().T) / 2)) < PSD_TOL:
            raise ValueError("not positive semidefinite")

    def to_json(self) -> str:
        return json.dumps([[[float(z.real), float(z.imag)] for z in row] for row in self.entries])

    @classmethod
    def from_json(cls, text: str, normalized: bool = True) -> DensityMatrix:
        rows = json.loads(text)
        return cls(np.array([[complex(re, im) for re, im in row] for row in rows]), normalized)


def ket_to_dm(psi) -> DensityMatrix:
    v = np.asarray(psi, dtype=complex).reshape(-1)
    v = v / np.linalg.norm(v)
    return DensityMatrix(np.outer(v, v.conj()))


def basis_state(bits: str) -> DensityMatrix:
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1
    return ket_to_dm(v)


def random_density(n_qubits: int, rng, rank: int | None = None) -> DensityMatrix:
    """Ginibre-ensemble mixed state (pure when rank == 1)."""
    dim = 2**n_qubits
    r = dim if rank is None else rank
    g = rng.normal(size=(dim, r)) + 1j * rng.normal(size=(dim, r))
    m = g @ g.conj().T
    return DensityMatrix(m / np.trace(m).real)


def random_unitary(dim: int, rng) -> np.ndarray:
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / math.sqrt(2)
    qm, r = np.linalg.qr(z)
    ph = np.diag(r) / np.abs(np.diag(r))
    return qm * ph


def tensor(*rhos: DensityMatrix) -> DensityMatrix:
    out = np.array([[1.0 + 0j]])
    for r in rhos:
        out = np.kron(out, r.entries)
    return DensityMatrix(out)


def partial_trace(rho: DensityMatrix | np.ndarray, keep, n_qubits: int | None = None) -> np.ndarray:
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    n = n_qubits or (m.shape[0].bit_length() - 1)
    keep = sorted(keep)
    drop = [w for w in range(n) if w not in keep]
    t = m.reshape([2] * (2 * n))
    for k, w in enumerate(sorted(drop, reverse=True)):
        cur = n - k
        t = np.trace(t, axis1=w, axis2=w + cur)
    dk = 2 ** len(keep)
    return t.reshape(dk, dk)


# ---------------------------------------------------------------- channels


@dataclass(frozen=True, eq=False)
class Channel:
    kraus_ops: tuple
    label: str = ""
    instrument: bool = False

    @property
    def completeness(self) -> np.ndarray:
        return sum(k.conj().T @ k for k in self.kraus_ops)

    @property
    def trace_preserving(self) -> bool:
        c = self.completeness
        return bool(np.allclose(c, np.eye(c.shape[0]), atol=1e-9))

    @property
    def subnormalized(self) -> bool:
        """True when sum K^dag K <= I but != I."""
        c = self.completeness
        return not self.trace_preserving and float(np.max(np.linalg.eigvalsh(c))) <= 1 + 1e-9

    def is_cptp(self) -> bool:
        return self.trace_preserving


def channel(kraus, label: str = "", instrument: bool = False) -> Channel:
    return Channel(tuple(np.asarray(k, dtype=complex) for k in kraus), label, instrument)


def apply_channel(ch: Channel, rho: DensityMatrix) -> DensityMatrix:
    m = rho.entries
    if ch.kraus_ops[0].shape[1] != m.shape[0]:
        raise DimensionError("channel input dimension does not match state")
    out = sum(k @ m @ k.conj().T for k in ch.kraus_ops)
    return DensityMatrix(out, normalized=rho.normalized and ch.trace_preserving)


def unitary_channel(u, label: str = "U") -> Channel:
    return channel([u], label)


def conjugate(u: np.ndarray, rho: DensityMatrix) -> DensityMatrix:
    return DensityMatrix(u @ rho.entries @ u.conj().T, rho.normalized)


def depolarize(p: float, rho: DensityMatrix | np.ndarray):
    """p rho + (1 - p) Tr(rho) I / dim; linear, so unnormalized input is fine."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    dim = m.shape[0]
    out = p * m + (1 - p) * np.trace(m) * np.eye(dim) / dim
    return DensityMatrix(out, rho.normalized) if isinstance(rho, DensityMatrix) else out


def depolarizing_channel(p: float, dim: int) -> Channel:
    """Kraus form via the Pauli (Weyl) basis for qubit registers."""
    n = dim.bit_length() - 1
    paulis = [np.eye(2), PAULI["X"], PAULI["Y"], PAULI["Z"]]
    ops = []
    weight_rest = (1 - p) / dim**2
    for idx in range(4**n):
        m = np.array([[1.0 + 0j]])
        for k in range(n):
            m = np.kron(m, paulis[(idx >> (2 * (n - 1 - k))) & 3])
        w = p + weight_rest if idx == 0 else weight_rest
        if w > 0:
            ops.append(math.sqrt(w) * m)
    return channel(ops, f"depol({p})")


def amplitude_damping(gamma: float) -> Channel:
    k0 = np.array([[1, 0], [0, math.sqrt(1 - gamma)]])
    k1 = np.array([[0, math.sqrt(gamma)], [0, 0]])
    return channel([k0, k1], f"ampdamp({gamma})")


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "depolarizing"
    p: float = 0.75
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("depolarizing", "amplitude_damping", "pauli_twirl"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0 <= self.p <= 1 or not 0 <= self.gamma <= 1:
            raise ValueError("mask parameters must lie in [0, 1]")

    @property
    def diamond_bound(self) -> float:
        # analytic values per family; never computed by SDP
        if self.kind == "depolarizing":
            return self.p
        return 1.0

    def apply(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=complex)
        if self.kind == "depolarizing":
            return depolarize(self.p, m)
        if self.kind == "amplitude_damping":
            n = m.shape[0].bit_length() - 1
            out = m
            for w in range(n):
                out = apply_channel(embed_channel(amplitude_damping(self.gamma), w, n), DensityMatrix(out, False)).entries
            return out
        # uniform single-qubit Pauli twirl on every wire, mixed with weight 1 - p
        n = m.shape[0].bit_length() - 1
        out = m
        for w in range(n):
            tw = sum(embed(P, (w,), n) @ out @ embed(P, (w,), n).conj().T for P in _PAULI_LIST) / 4
            out = self.p * out + (1 - self.p) * tw
        return out


def embed_channel(ch: Channel, wire: int, n: int) -> Channel:
    return channel([embed(k, (wire,), n) for k in ch.kraus_ops], ch.label, ch.instrument)


# ---------------------------------------------------------------- gates

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
_PAULI_LIST = [PAULI[k] for k in "IXYZ"]

# integer (Gaussian) matrix M and power h with U = M / sqrt(2)^h
_CLIFFORD = {
    "I": (np.eye(2, dtype=complex), 0),
    "X": (PAULI["X"], 0),
    "Y": (PAULI["Y"], 0),
    "Z": (PAULI["Z"], 0),
    "S": (np.diag([1, 1j]), 0),
    "SDG": (np.diag([1, -1j]), 0),
    "H": (np.array([[1, 1], [1, -1]], dtype=complex), 1),
    "CNOT": (np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex), 0),
    "CZ": (np.diag([1, 1, 1, -1]).astype(complex), 0),
}
ARITY = {"I": 1, "X": 1, "Y": 1, "Z": 1, "S": 1, "SDG": 1, "H": 1, "RZ": 1, "CNOT": 2, "CZ": 2}



def embed(u: np.ndarray, targets, n: int) -> np.ndarray:
    """Lift a 2^k x 2^k operator on ``targets`` to n qubits."""
    targets = tuple(targets)
    k = len(targets)
    if any(t >= n for t in targets) or len(set(targets)) != k:
        raise ValueError("bad target wires")
    rest = [w for w in range(n) if w not in targets]
    order = list(targets) + rest
    big = np.kron(u, np.eye(2 ** (n - k)))
    t = big.reshape([2] * (2 * n))
    inv = np.argsort(order)
    t = t.transpose(list(inv) + [n + i for i in inv])
    return t.reshape(2**n, 2**n)


def rz_matrix(phi: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * phi), np.exp(0.5j * phi)])


def gate_unitary(label: str, targets=(0,), n: int | None = None, phi: float | None = None) -> np.ndarray:
    label = label.upper()
    n = len(targets) if n is None else n
    if label == "RZ":
        u = rz_matrix(phi)
    else:
        m, h = _CLIFFORD[label]
        u = m / math.sqrt(2) ** h
    return embed(u, targets, n)


@dataclass(frozen=True, eq=False)
class GateSuperop:
    gate_label: str
    targets: tuple
    n_qubits: int
    num_re: np.ndarray  # int64
    num_im: np.ndarray
    denom_log2: int
    phi: float | None = None

    @property
    def numerators(self) -> np.ndarray:
        return self.num_re + 1j * self.num_im

    @property
    def tau_max(self) -> int:
        return int(max(np.max(np.abs(self.num_re)), np.max(np.abs(self.num_im))))

    @property
    def table_weight(self) -> int:
        """Coefficient of sigma charged by the analytic tracker."""
        return int(SIGMA_WEIGHTS.get(self.gate_label, 1))

    @property
    def matrix(self) -> np.ndarray:
        return self.numerators / 2.0**self.denom_log2

    @property
    def unitary(self) -> np.ndarray:
        return gate_unitary(self.gate_label, self.targets, self.n_qubits, self.phi)

    def sparse(self):
        """Row-wise (indices, re, im) padded to the max fan-in."""
        return _sparse_rows(self.num_re, self.num_im)

    @property
    def fan_in(self) -> int:
        return int(np.max(np.count_nonzero((self.num_re != 0) | (self.num_im != 0), axis=1)))


def _sparse_rows(num_re, num_im):
    nz = (num_re != 0) | (num_im != 0)
    width = max(1, int(nz.sum(axis=1).max()))
    rows = num_re.shape[0]
    idx = np.zeros((rows, width), dtype=np.int64)
    re = np.zeros((rows, width), dtype=np.int64)
    im = np.zeros((rows, width), dtype=np.int64)
    for r in range(rows):
        cols = np.nonzero(nz[r])[0]
        idx[r, : len(cols)] = cols
        re[r, : len(cols)] = num_re[r, cols]
        im[r, : len(cols)] = num_im[r, cols]
    return idx, re, im


def _gaussian_int_kron(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sup = np.kron(m, m.conj())
    re, im = np.rint(sup.real).astype(np.int64), np.rint(sup.imag).astype(np.int64)
    if not np.allclose(sup, re + 1j * im):
        raise AssertionError("Clifford superoperator is not Gaussian-integer")
    return re, im


@lru_cache(maxsize=512)
def _superop_cached(label, targets, n, phi, frac_bits):
    if label == "RZ":
        if phi is None:
            raise ValueError("RZ needs an angle")
        u = embed(rz_matrix(phi), targets, n)
        sup = np.kron(u, u.conj()) * 2.0**frac_bits
        re, im = np.rint(sup.real).astype(np.int64), np.rint(sup.imag).astype(np.int64)
        return re, im, frac_bits
    if label not in _CLIFFORD:
        raise ValueError(f"unsupported gate {label!r}")
    m, h = _CLIFFORD[label]
    if len(targets) != ARITY[label]:
        raise ValueError(f"{label} acts on {ARITY[label]} wire(s)")
    re, im = _gaussian_int_kron(embed(m, targets, n))
    return re, im, h  # (M kron conj M) / 2^h


def gate_superop(label: str, targets=None, n_qubits: int | None = None, phi: float | None = None,
                 frac_bits: int = 20) -> GateSuperop:
    label = label.upper()
    if label not in ARITY:
        raise ValueError(f"unsupported gate {label!r}")
    targets = tuple(range(ARITY[label])) if targets is None else tuple(targets)
    n = len(targets) if n_qubits is None else n_qubits
    if 2**n > MAX_DIM:
        raise DimensionError("too many qubits for the dense simulator")
    re, im, t = _superop_cached(label, targets, n, None if phi is None else float(phi), frac_bits)
    return GateSuperop(label, targets, n, re, im, t, phi)


def apply_superop(sop: GateSuperop, rho: DensityMatrix) -> DensityMatrix:
    v = rho.entries.reshape(-1)
    return DensityMatrix((sop.matrix @ v).reshape(rho.dim, rho.dim), rho.normalized)


# ---------------------------------------------------------------- measurement


def weak_kraus(theta: float) -> Channel:
    """The weak-test pair exactly as printed; not trace preserving."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    k0 = np.diag([math.sqrt(theta), 1.0])
    k1 = np.diag([0.0, math.sqrt(1 - theta)])
    return channel([k0, k1], f"weak({theta})", instrument=True)


def z_measurement(wire: int = 0, n: int = 1) -> Channel:
    p0 = np.diag([1.0, 0.0])
    p1 = np.diag([0.0, 1.0])
    return channel([embed(p0, (wire,), n), embed(p1, (wire,), n)], f"Z{wire}", instrument=True)


def born_sample(instrument: Channel, rho: DensityMatrix, rng) -> tuple[int, DensityMatrix]:
    if len(instrument.kraus_ops) < 2:
        raise ValueError("instrument needs at least two branches")
    branches = [k @ rho.entries @ k.conj().T for k in instrument.kraus_ops]
    probs = np.array([max(np.trace(b).real, 0.0) for b in branches])
    i = int(rng.choice(len(branches), p=probs / probs.sum()))
    return i, DensityMatrix(branches[i], normalized=False)


def trace_distance(rho, sigma) -> float:
    a = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    b = sigma.entries if isinstance(sigma, DensityMatrix) else np.asarray(sigma)
    diff = a - b
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh((diff + diff.conj().T) / 2))))


def fidelity(rho, sigma) -> float:
    from scipy.linalg import sqrtm

    a = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    b = sigma.entries if isinstance(sigma, DensityMatrix) else np.asarray(sigma)
    s = sqrtm(a)
    return float(np.real(np.trace(sqrtm(s @ b @ s))) ** 2)


def teleport_oracle(rho: DensityMatrix) -> np.ndarray:
    """Deferred-measurement teleportation on the plaintext; returns the Q2 state."""
    full = tensor(rho, basis_state("00"))
    n = 3
    seq = [("H", (1,)), ("CNOT", (1, 2)), ("CNOT", (0, 1)), ("H", (0,)), ("CNOT", (1, 2)), ("CZ", (0, 2))]
    m = full.entries
    for g, t in seq:
        u = gate_unitary(g, t, n)
        m = u @ m @ u.conj().T
    return partial_trace(m, [2], n)

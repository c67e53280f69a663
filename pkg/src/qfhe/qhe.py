"""Encrypted density matrices: lifted gates, refresh scheduling, QC bridge.

An ``EncryptedState`` is one batched ``Ciphertext`` of shape ``(2, 2, D*D)``:
axis 0 selects the primary component (rho) or the mask component (Psi(rho)),
axis 1 selects the real or imaginary part, axis 2 is the row-major entry.

Two noise ledgers run side by side.  ``noise_tracker`` is the analytic
sigma-unit tracker that drives refresh decisions; ``ct.noise_bound`` is the
rigorous raw bound that always dominates the measured error.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import mlwe, qsim, ring
from .mlwe import Ciphertext, GswCiphertext, PublicKey, SecretKey
from .qsim import DensityMatrix, GateSuperop, MaskSpec


class RefreshNeeded(RuntimeError):
    def __init__(self, msg, gate_index=None):
        super().__init__(msg)
        self.gate_index = gate_index


class RefreshChainExhausted(RefreshNeeded):
    pass


class ScaleOverflow(ValueError):
    """Fixed-point headroom below q/4 is used up."""


# ---------------------------------------------------------------- state


@dataclass(frozen=True, eq=False)
class EncryptedState:
    ct: Ciphertext
    mask: MaskSpec
    n_qubits: int
    noise_tracker: Fraction | int = 0
    op_trace: tuple = ()
    ledger: tuple = ()  # (label, sigma-weight) per tracked step
    value_bound: float = 1.0
    trace_one: bool = True

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    @property
    def primary_component(self) -> Ciphertext:
        return self.ct[0]

    @property
    def mask_component(self) -> Ciphertext:
        return self.ct[1]

    @property
    def ctx(self) -> mlwe.Context:
        return self.ct.ctx

    @property
    def level(self) -> int:
        return self.ct.modulus_index

    @property
    def key_id(self) -> str:
        return self.ct.key_id

    @property
    def scale_log2(self) -> int:
        return self.ct.scale_log2

    @property
    def sigma(self) -> int:
        return self.ct.ctx.sigma

    def charged(self, label: str, weight, text: str | None = None) -> EncryptedState:
        w = Fraction(weight).limit_denominator(10**9)
        return replace(
            self,
            noise_tracker=_norm(Fraction(self.noise_tracker) + self.sigma * w),
            op_trace=self.op_trace + ((text or label),),
            ledger=self.ledger + ((label, w),),
        )


def _norm(x: Fraction):
    return int(x) if x.denominator == 1 else x


def budget_of(ctx: mlwe.Context) -> Fraction:
    """Fixed leveled-schedule budget, q/4 of the top modulus."""
    return Fraction(ctx.q, 4)


def _value_scale(ct: Ciphertext) -> float:
    return 2.0**ct.scale_log2 * ct.q / ct.ctx.q


def _check_headroom(ct: Ciphertext, value_bound: float):
    if value_bound * _value_scale(ct) + ct.noise_bound >= ct.q / 4 and value_bound * _value_scale(ct) >= ct.q / 4:
        raise ScaleOverflow(
            f"value bound {value_bound:.3g} at scale 2^{ct.scale_log2} leaves no room below q/4"
        )
    if value_bound * 2.0**ct.scale_log2 >= ct.ctx.q / 4:
        raise ScaleOverflow(f"scale 2^{ct.scale_log2} exhausts the fixed-point headroom")


def enc_state(pk: PublicKey, rho: DensityMatrix, mask: MaskSpec | None = None, rng=None,
              scale_log2: int | None = None) -> EncryptedState:
    """Encrypt (rho, Psi(rho)) entrywise under ``pk`` at the fresh scale.

    ``scale_log2`` lowers the starting scale for circuits that need more
    fixed-point headroom, e.g. an RZ adds ``frac_bits`` to the scale.
    """
    mask = mask or MaskSpec()
    if rho.dim > qsim.MAX_DIM:
        raise qsim.DimensionError("state too large")
    masked = mask.apply(rho.entries)
    vals = np.stack([np.stack([rho.entries.real, rho.entries.imag]), np.stack([masked.real, masked.imag])])
    vals = vals.reshape(2, 2, rho.dim * rho.dim)
    ct = mlwe.encrypt(pk, vals, ring.make_rng(rng if rng is not None else 0), scale_log2)
    tr = abs(rho.trace() - 1) < 1e-9
    return EncryptedState(ct, mask, rho.n_qubits, mlwe.noise_bound_of([], pk.ctx.sigma), trace_one=tr)


def _as_key(sk, key_id: str) -> SecretKey:
    if isinstance(sk, SecretKey):
        return sk
    return sk.secret_for(key_id)


def decrypt_values(sk, es: EncryptedState) -> tuple[np.ndarray, np.ndarray]:
    vals = mlwe.decrypt(_as_key(sk, es.key_id), es.ct)
    D = es.dim
    prim = (vals[0, 0] + 1j * vals[0, 1]).reshape(D, D)
    mask = (vals[1, 0] + 1j * vals[1, 1]).reshape(D, D)
    return prim, mask


def consistency_tolerance(es: EncryptedState) -> float:
    return 4 * 2.0**-es.ctx.frac_bits + 2 * es.ct.noise_bound / _value_scale(es.ct)


def dec_state(sk, es: EncryptedState) -> tuple[DensityMatrix, bool]:
    """Decrypt both components and check mask == Psi(primary)."""
    prim, mask = decrypt_values(sk, es)
    expected = es.mask.apply(prim)
    flag = bool(np.max(np.abs(mask - expected)) <= consistency_tolerance(es))
    normalized = abs(np.trace(prim).real - 1) < 1e-6
    return DensityMatrix(prim, normalized=normalized), flag


def measured_noise(sk, es: EncryptedState, reference: np.ndarray) -> int:
    """Raw error of the primary component against a plaintext reference."""
    D = es.dim
    ref = np.asarray(reference, dtype=complex).reshape(D * D)
    vals = np.stack([ref.real, ref.imag])
    return mlwe.noise_actual(_as_key(sk, es.key_id), es.primary_component, vals)


# ---------------------------------------------------------------- linear maps


def _apply_rows(ct: Ciphertext, idx, re, im, denom_log2: int) -> Ciphertext:
    """out[r] = sum_k (re + i im)[r, k] * in[idx[r, k]] on (comp, part, entry) batches."""
    X = ct.data
    q = ct.q
    if X.dtype == object:
        re, im = re.astype(object), im.astype(object)
    Xr = X[:, 0][:, idx]  # (2, R, K, k+1, d)
    Xi = X[:, 1][:, idx]
    cr = re[None, :, :, None, None]
    ci = im[None, :, :, None, None]
    out_re = (cr * Xr - ci * Xi).sum(axis=2) % q
    out_im = (cr * Xi + ci * Xr).sum(axis=2) % q
    row = int(np.max(np.sum(np.abs(re.astype(np.int64)) + np.abs(im.astype(np.int64)), axis=1))) if re.size else 0
    data = np.stack([out_re, out_im], axis=1)
    return replace(ct, data=data, noise_bound=int(ct.noise_bound * row), scale_log2=ct.scale_log2 + denom_log2)


def _apply_sparse(es: EncryptedState, idx, re, im, denom_log2: int, n_out: int | None = None,
                  value_bound: float | None = None) -> EncryptedState:
    ct = _apply_rows(es.ct, idx, re, im, denom_log2)
    vb = es.value_bound if value_bound is None else value_bound
    _check_headroom(ct, vb)
    return replace(es, ct=ct, n_qubits=es.n_qubits if n_out is None else n_out, value_bound=vb)


def lift(es: EncryptedState, sop: GateSuperop) -> EncryptedState:
    """Apply a gate superoperator to both components, no tracker charge."""
    if sop.n_qubits != es.n_qubits:
        raise ValueError(f"gate built for {sop.n_qubits} qubits, state has {es.n_qubits}")
    idx, re, im = sop.sparse()
    return _apply_sparse(es, idx, re, im, sop.denom_log2)


def apply_gate(es: EncryptedState, g: GateSuperop, label: str | None = None) -> EncryptedState:
    """Lifted gate with tracker update; refuses once the budget would be crossed."""
    w = g.table_weight
    if Fraction(es.noise_tracker) + es.sigma * w >= budget_of(es.ctx):
        raise RefreshNeeded(f"gate {g.gate_label} would push the tracker past q/4")
    out = lift(es, g)
    text = label or _gate_text(g)
    return out.charged(g.gate_label, w, text)


def _gate_text(g: GateSuperop) -> str:
    parts = [g.gate_label, *map(str, g.targets)]
    if g.phi is not None:
        parts.append(repr(float(g.phi)))
    return " ".join(parts)


def gate(es: EncryptedState, label: str, *wires, phi=None) -> EncryptedState:
    return apply_gate(es, qsim.gate_superop(label, wires, es.n_qubits, phi, es.ctx.frac_bits))


def scale_by_pow2(es: EncryptedState, k: int, value_bound: float | None = None) -> EncryptedState:
    """Multiply every plaintext by 2^k exactly by lowering the scale ledger."""
    ct = mlwe.rescale_ledger(es.ct, -k)
    if ct.scale_log2 < es.ctx.frac_bits:
        raise ScaleOverflow("rescaling would drop below the base precision")
    vb = es.value_bound * 2.0**k if value_bound is None else value_bound
    return replace(es, ct=ct, value_bound=vb)


def _index_bits(index: int, wires, n: int) -> tuple:
    return tuple((index >> (n - 1 - w)) & 1 for w in wires)


@lru_cache(maxsize=256)
def _trace_map(n: int, wires: tuple):
    keep = [w for w in range(n) if w not in wires]
    Dk, Dw = 2 ** len(keep), 2 ** len(wires)
    D = 2**n

    def full_index(kbits, wbits):
        bits = [0] * n
        for w, b in zip(keep, kbits):
            bits[w] = b
        for w, b in zip(wires, wbits):
            bits[w] = b
        return int("".join(map(str, bits)), 2) if n else 0

    def bits_of(x, m):
        return [(x >> (m - 1 - i)) & 1 for i in range(m)]

    idx = np.zeros((Dk * Dk, Dw), dtype=np.int64)
    for r in range(Dk):
        for c in range(Dk):
            for a in range(Dw):
                rr = full_index(bits_of(r, len(keep)), bits_of(a, len(wires)))
                cc = full_index(bits_of(c, len(keep)), bits_of(a, len(wires)))
                idx[r * Dk + c, a] = rr * D + cc
    return idx


def partial_trace(es: EncryptedState, wires) -> EncryptedState:
    """Trace out ``wires``; exact additions, covariant with the depolarizing mask."""
    wires = tuple(sorted(wires))
    idx = _trace_map(es.n_qubits, wires)
    ones = np.ones_like(idx)
    out = _apply_sparse(es, idx, ones, np.zeros_like(idx), 0, n_out=es.n_qubits - len(wires))
    return out.charged("TRACE", 0, "TRACE " + " ".join(map(str, wires)))


# ---------------------------------------------------------------- roles


@dataclass(frozen=True)
class PublicBundle:
    """Everything the server may hold: public key and key-switch hints."""

    ctx: mlwe.Context
    pk: PublicKey
    hints: tuple = ()  # hint i: key of level i -> key of level i+1 (at level i)


class Client:
    """Secret-key holder.  Only this role decrypts or samples outcomes."""

    def __init__(self, ctx: mlwe.Context, rng=0):
        self.ctx = ctx
        self.rng = ring.make_rng(rng)
        self._keys: list[SecretKey] = []
        pk = None
        for lvl in range(len(ctx.chain)):
            sk, p = mlwe.keygen(ctx, self.rng)
            self._keys.append(sk)
            if lvl == 0:
                pk = p
        self.pk = pk
        self._hints = tuple(
            mlwe.gen_keyswitch_hint(self._keys[i], self._keys[i + 1], self.rng, level=i)
            for i in range(len(ctx.chain) - 1)
        )
        self._by_id = {sk.key_id: sk for sk in self._keys}
        self._counter = 0

    @property
    def sk(self) -> SecretKey:
        return self._keys[0]

    def public_bundle(self) -> PublicBundle:
        return PublicBundle(self.ctx, self.pk, self._hints)

    def secret_for(self, key_id: str) -> SecretKey:
        return self._by_id[key_id]

    def encrypt_state(self, rho, mask=None, scale_log2=None) -> EncryptedState:
        return enc_state(self.pk, rho, mask, self.rng, scale_log2)

    def decrypt_state(self, es):
        return dec_state(self, es)

    def decrypt(self, ct: Ciphertext):
        return mlwe.decrypt(self.secret_for(ct.key_id), ct)

    def encrypt_bit(self, bit: int, key_id: str, level: int, provenance: str = "") -> CBit:
        g = mlwe.gsw_encrypt(self.secret_for(key_id), int(bit), self.rng, level)
        return CBit(g, provenance)

    def reissue_bit(self, b: CBit, key_id: str, level: int) -> CBit:
        """Re-encrypt a bit this client sampled under the key of a refreshed state."""
        bit = mlwe.gsw_decrypt(self.secret_for(b.value_ct.key_id), b.value_ct)
        return self.encrypt_bit(bit, key_id, level, b.provenance)

    def sample_outcome(self, weights: Ciphertext) -> int:
        """Decrypt branch weights and Born-sample an outcome index."""
        w = np.clip(np.atleast_1d(self.decrypt(weights)).astype(float), 0, None)
        if w.sum() <= 0:
            raise ValueError("all branch weights vanish")
        return int(self.rng.choice(len(w), p=w / w.sum()))

    def session(self, seed) -> Client:
        """Same keys, independent randomness; keeps concurrent jobs reproducible."""
        other = copy.copy(self)
        other.rng = ring.make_rng(seed)
        other._counter = 0
        return other

    def next_id(self, prefix: str) -> str:
        self._counter += 1
        return f"{prefix}{self._counter}"


class Server:
    """Evaluator role.  Holds public material only."""

    def __init__(self, bundle: PublicBundle):
        if not isinstance(bundle, PublicBundle):
            raise TypeError("server accepts a PublicBundle only")
        self.bundle = bundle
        assert_no_secrets(self)

    @property
    def ctx(self):
        return self.bundle.ctx

    def refresh(self, es: EncryptedState) -> EncryptedState:
        return refresh(es, self.bundle)


def assert_no_secrets(obj, _seen=None) -> None:
    """Runtime key-hygiene check over an object graph."""
    seen = _seen if _seen is not None else set()
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, (SecretKey, Client)):
        raise AssertionError("secret key material reached a public role")
    if isinstance(obj, (str, bytes, int, float, np.ndarray)) or obj is None:
        return
    if isinstance(obj, dict):
        for v in obj.values():
            assert_no_secrets(v, seen)
    elif isinstance(obj, (list, tuple, set)):
        for v in obj:
            assert_no_secrets(v, seen)
    elif hasattr(obj, "__dict__"):
        for v in vars(obj).values():
            assert_no_secrets(v, seen)


# ---------------------------------------------------------------- refresh and leveled scheduling


def refresh(es: EncryptedState, bundle: PublicBundle) -> EncryptedState:
    """Key switch to the next level's key, then switch modulus one step down."""
    lvl = es.level
    if lvl + 1 >= len(es.ctx.chain):
        raise RefreshChainExhausted("no modulus left in the chain")
    hint = bundle.hints[lvl]
    ct = mlwe.mod_switch(mlwe.key_switch(es.ct, hint), lvl + 1)
    q, q2 = es.ctx.chain[lvl], es.ctx.chain[lvl + 1]
    t = Fraction(es.noise_tracker) * q2 / q
    tracker = math.ceil(t) + es.sigma
    return replace(es, ct=ct, noise_tracker=tracker, op_trace=es.op_trace + ("REFRESH",))


@dataclass
class ScheduleEvent:
    index: int
    label: str
    increment: float
    tracker: float
    refreshed: bool = False
    level: int = 0


@dataclass
class SchedulePlan:
    events: list
    refreshes: list
    final: Fraction | int
    budget: Fraction
    level: int

    def to_json(self) -> dict:
        return {
            "budget": float(self.budget),
            "final": float(self.final),
            "refreshes": list(self.refreshes),
            "steps": [
                {"index": e.index, "gate": e.label, "increment": e.increment, "tracker": e.tracker,
                 "refresh": e.refreshed, "level": e.level}
                for e in self.events
            ],
        }


def plan_schedule(program, ctx: mlwe.Context, start=0, level: int = 0) -> SchedulePlan:
    """Analytic twin of ``eval_schedule``: the same tracker arithmetic, no data."""
    prog = parse_program(program) if isinstance(program, str) else list(program)
    budget = budget_of(ctx)
    noise = Fraction(start)
    events, refreshes = [], []
    for i, ins in enumerate(prog):
        w = ins.weight
        noise += ctx.sigma * w
        ev = ScheduleEvent(i, ins.text, float(ctx.sigma * w), float(noise), level=level)
        if noise > budget / 2:
            if level + 1 >= len(ctx.chain):
                raise RefreshChainExhausted(f"refresh chain exhausted at gate {i} ({ins.text})", i)
            q, q2 = ctx.chain[level], ctx.chain[level + 1]
            noise = Fraction(math.ceil(noise * q2 / q) + ctx.sigma)
            level += 1
            ev.refreshed, ev.level = True, level
            ev.tracker = float(noise)
            refreshes.append(i)
        events.append(ev)
    return SchedulePlan(events, refreshes, _norm(noise), budget, level)


@dataclass
class RunReport:
    events: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    cbits: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "refreshes": list(self.refreshes),
            "wall_time": self.wall_time,
            "steps": [
                {"index": e.index, "gate": e.label, "increment": e.increment, "tracker": e.tracker,
                 "refresh": e.refreshed, "level": e.level}
                for e in self.events
            ],
        }


def eval_schedule(es: EncryptedState, program, server: Server, client: Client | None = None,
                  report: RunReport | None = None, index_offset: int = 0, observer=None) -> EncryptedState:
    """Leveled evaluation with automatic refresh.

    budget <- q/4; after each gate the tracker grows by its table increment,
    and whenever it exceeds budget/2 the state is refreshed once.
    ``observer(label, es)`` sees every gate result and every refresh.
    """
    prog = parse_program(program) if isinstance(program, str) else list(program)
    report = report if report is not None else RunReport()
    budget = budget_of(es.ctx)
    t0 = time.perf_counter()
    for j, ins in enumerate(prog):
        i = index_offset + j
        try:
            es = execute(es, ins, server, client, report.cbits)
        except RefreshNeeded as exc:
            raise RefreshNeeded(f"gate {i} ({ins.text}): {exc}", i) from exc
        ev = ScheduleEvent(i, ins.text, float(es.sigma * ins.weight), float(es.noise_tracker), level=es.level)
        if observer is not None:
            observer(ins.text, es)
        if Fraction(es.noise_tracker) > budget / 2:
            try:
                es = server.refresh(es)
            except RefreshChainExhausted as exc:
                raise RefreshChainExhausted(f"refresh chain exhausted at gate {i} ({ins.text})", i) from exc
            ev.refreshed, ev.tracker, ev.level = True, float(es.noise_tracker), es.level
            report.refreshes.append(i)
            if observer is not None:
                observer("REFRESH", es)
        report.events.append(ev)
    report.wall_time += time.perf_counter() - t0
    return es


# ---------------------------------------------------------------- program text


GATE_OPS = {"H", "S", "SDG", "X", "Y", "Z", "CNOT", "CZ", "RZ"}
ALL_OPS = GATE_OPS | {"BELL", "MEAS", "CORR", "CTRL", "TRACE", "WEAK", "REFRESH"}


@dataclass(frozen=True)
class Instruction:
    op: str
    wires: tuple = ()
    phi: float | None = None
    mode: str | None = None
    theta: float | None = None
    steps: int = 1
    target: str | None = None  # gate label for CTRL

    @property
    def text(self) -> str:
        parts = [self.op]
        if self.op == "CTRL":
            parts.append(self.target)
        parts += [str(w) for w in self.wires]
        if self.phi is not None:
            parts.append(repr(self.phi))
        if self.mode:
            parts.append(self.mode)
        if self.op == "WEAK":
            parts += [repr(self.theta), str(self.steps)]
        return " ".join(parts)

    @property
    def weight(self) -> Fraction:
        if self.op == "WEAK":
            return Fraction(self.theta).limit_denominator(10**9) * self.steps
        if self.op == "MEAS" and self.mode == "weak":
            return Fraction(self.theta).limit_denominator(10**9)
        if self.op == "REFRESH":
            return Fraction(0)
        return mlwe.step_weight(self.op)


def parse_line(line: str) -> Instruction | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    tok = line.split()
    op = tok[0].upper()
    if op not in ALL_OPS:
        raise ValueError(f"unknown instruction {tok[0]!r}")
    args = tok[1:]
    if op == "RZ":
        return Instruction(op, (int(args[0]),), phi=float(args[1]))
    if op == "MEAS":
        wires, rest = [], []
        for a in args:
            (wires if not rest and a.isdigit() else rest).append(a)
        mode = rest[0].lower() if rest else "feedback"
        if mode not in ("feedback", "defer", "weak"):
            raise ValueError(f"unknown measurement mode {mode!r}")
        theta = float(rest[1]) if mode == "weak" and len(rest) > 1 else (0.1 if mode == "weak" else None)
        return Instruction(op, tuple(int(a) for a in wires), mode=mode, theta=theta)
    if op == "CTRL":
        return Instruction(op, tuple(int(a) for a in args[1:]), target=args[0].upper())
    if op == "WEAK":
        return Instruction(op, (int(args[0]),), theta=float(args[1]), steps=int(args[2]))
    return Instruction(op, tuple(int(a) for a in args))


def parse_program(text: str) -> list[Instruction]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        try:
            ins = parse_line(line)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {n}: {exc}") from None
        if ins is not None:
            out.append(ins)
    return out


def format_program(prog) -> str:
    return "".join(ins.text + "\n" for ins in prog)


TELEPORT_PROGRAM = """\
BELL 1 2
CNOT 0 1
H 0
MEAS 0 1 feedback
CORR 2
"""


# ---------------------------------------------------------------- QC bridge


@dataclass(frozen=True, eq=False)
class CBit:
    value_ct: GswCiphertext
    provenance: str = ""


@dataclass(frozen=True, eq=False)
class WeakBranches:
    branch0: EncryptedState
    branch1: EncryptedState
    theta: float
    steps: int = 1


def _outcome_weights(es: EncryptedState, wires) -> Ciphertext:
    """Encrypted Tr(P_o rho) for every outcome pattern o on ``wires``."""
    n, D = es.n_qubits, es.dim
    groups = [[] for _ in range(2 ** len(wires))]
    for r in range(D):
        bits = _index_bits(r, wires, n)
        groups[int("".join(map(str, bits)), 2) if bits else 0].append(r * D + r)
    prim_re = es.ct[0, 0]
    sums = [mlwe.he_sum([prim_re[e] for e in g]) for g in groups]
    return mlwe.stack(sums)


def _select(es: EncryptedState, wires, cbits) -> EncryptedState:
    """Keep the block whose measured bits equal the encrypted outcome."""
    n, D = es.n_qubits, es.dim
    data = es.ct.data.copy()
    zero = np.zeros_like(data[:, :, 0])
    by_pattern: dict = {}
    for r in range(D):
        br = _index_bits(r, wires, n)
        for c in range(D):
            e = r * D + c
            if br != _index_bits(c, wires, n):
                data[:, :, e] = zero
            else:
                by_pattern.setdefault(br, []).append(e)
    nb = es.ct.noise_bound
    for pattern, entries in by_pattern.items():
        sub = es.ct.with_data(es.ct.data[:, :, entries])
        for bit, cb in zip(pattern, cbits):
            g = cb.value_ct if bit else mlwe.gsw_not(cb.value_ct)
            sub = mlwe.external_product(sub, g)
        data[:, :, entries] = sub.data
        nb = sub.noise_bound
    return replace(es, ct=es.ct.with_data(data, nb), trace_one=False)


def _defer(es: EncryptedState, wires) -> EncryptedState:
    """Dephase ``wires`` and copy them into fresh pointer qubits at the end."""
    n, D = es.n_qubits, es.dim
    m = len(wires)
    n2 = n + m
    D2 = 2**n2
    if D2 > qsim.MAX_DIM:
        raise qsim.DimensionError("deferred measurement exceeds the dense limit")
    idx = np.zeros((D2 * D2, 1), dtype=np.int64)
    coef = np.zeros((D2 * D2, 1), dtype=np.int64)
    for R in range(D2):
        r, i = R >> m, R & (2**m - 1)
        for C in range(D2):
            c, j = C >> m, C & (2**m - 1)
            bits = tuple((i >> (m - 1 - k)) & 1 for k in range(m))
            if i == j and _index_bits(r, wires, n) == bits and _index_bits(c, wires, n) == bits:
                idx[R * D2 + C, 0] = r * D + c
                coef[R * D2 + C, 0] = 1
    out = _apply_sparse(es, idx, coef, np.zeros_like(coef), 0, n_out=n2)
    if es.trace_one:
        # Psi(V rho) - V(Psi rho) = (1-p)(I'/D' - V(I)/D) for trace-one rho
        vi = np.zeros((D2, D2))
        for R in range(D2):
            r, i = R >> m, R & (2**m - 1)
            if _index_bits(r, wires, n) == tuple((i >> (m - 1 - k)) & 1 for k in range(m)):
                vi[R, R] = 1.0 / D
        if out.mask.kind == "depolarizing":
            corr = (1 - out.mask.p) * (np.eye(D2) / D2 - vi)
            out = _add_public(out, component=1, matrix=corr)
    return out


def _add_public(es: EncryptedState, component: int, matrix: np.ndarray) -> EncryptedState:
    """Add a public real matrix to one component via noiseless trivial encryption."""
    D = es.dim
    ct = es.ct
    vals = np.asarray(matrix, dtype=float).reshape(D * D)
    ints = np.array([mlwe.encode(v, ct.scale_log2, ct.ctx, ct.modulus_index) for v in vals], dtype=object)
    triv = mlwe.trivial(ints, ct[component, 0])
    data = ct.data.copy()
    data[component, 0] = (data[component, 0] + triv.data) % ct.q
    return replace(es, ct=ct.with_data(data))


def q2c(es: EncryptedState, wire, mode: str = "feedback", client: Client | None = None,
        theta: float = 0.1):
    """Quantum-to-classical bridge.

    feedback: client decrypts branch weights, samples, returns GSW bits;
    defer: coherent copy into pointer qubits, no bit;
    weak: both unnormalized branches of the weak instrument.
    """
    wires = (wire,) if isinstance(wire, int) else tuple(wire)
    if any(w >= es.n_qubits or w < 0 for w in wires):
        raise ValueError("wire out of range")
    text = "MEAS " + " ".join(map(str, wires)) + " " + mode
    if mode == "feedback":
        if client is None:
            raise ValueError("feedback mode needs the client role")
        weights = _outcome_weights(es, wires)
        o = client.sample_outcome(weights)
        bits = [(o >> (len(wires) - 1 - k)) & 1 for k in range(len(wires))]
        cbits = tuple(
            client.encrypt_bit(b, es.key_id, es.level, client.next_id(f"m{w}:")) for w, b in zip(wires, bits)
        )
        out = _select(es, wires, cbits).charged("MEAS", 1, text)
        return out, (cbits[0] if len(cbits) == 1 else cbits)
    if mode == "defer":
        return _defer(es, wires).charged("MEAS", 1, text), None
    if mode == "weak":
        if len(wires) != 1:
            raise ValueError("weak mode acts on one wire")
        b0 = weak_update(es, theta, 1, wire=wires[0], branch=0)
        b1 = weak_update(es, theta, 1, wire=wires[0], branch=1)
        return b0, WeakBranches(b0, b1, theta, 1)
    raise ValueError(f"unknown mode {mode!r}")


def collapse(es: EncryptedState, wires) -> EncryptedState:
    """Trace out measured wires and renormalize by the uniform outcome weight."""
    out = partial_trace(es, wires)
    out = scale_by_pow2(out, len(tuple(wires)), value_bound=1.0)
    return replace(out, trace_one=True)


def he_control(U: GateSuperop, es: EncryptedState, b: CBit) -> EncryptedState:
    """U^b rho U^b^dag = U(rho [x] b) + rho [x] (1 - b)."""
    rest = mlwe.external_product(es.ct, b.value_ct)
    tmp = mlwe.external_product(es.ct, mlwe.gsw_not(b.value_ct))
    moved = lift(replace(es, ct=rest), U)
    if U.denom_log2:
        tmp = mlwe.he_const_mul(tmp, 1 << U.denom_log2)
        tmp = replace(tmp, scale_log2=moved.ct.scale_log2)
    ct = mlwe.he_add(moved.ct, tmp)
    out = replace(es, ct=ct)
    return out.charged("CTRL", 3, f"CTRL {_gate_text(U)}")


def _pauli_branch(es: EncryptedState, target: int, paulis: str) -> EncryptedState:
    out = es
    for p in paulis:
        out = lift(out, qsim.gate_superop(p, (target,), es.n_qubits))
    return out


def teleport_correct(es: EncryptedState, m1: CBit, m2: CBit, target: int = 0) -> EncryptedState:
    """(1-m1)(1-m2) I + m1(1-m2) Z + (1-m1)m2 X + m1 m2 ZX, each as a conjugation."""
    terms = []
    for bit1, bit2, paulis in ((0, 0, ""), (1, 0, "Z"), (0, 1, "X"), (1, 1, "XZ")):
        branch = _pauli_branch(es, target, paulis).ct
        g1 = m1.value_ct if bit1 else mlwe.gsw_not(m1.value_ct)
        g2 = m2.value_ct if bit2 else mlwe.gsw_not(m2.value_ct)
        terms.append(mlwe.external_product(mlwe.external_product(branch, g1), g2))
    out = replace(es, ct=mlwe.he_sum(terms))
    return out.charged("CORR", 1, f"CORR {target}")


# ---------------------------------------------------------------- weak measurement


def _quantize_mantissa(values: np.ndarray, bits: int) -> tuple[np.ndarray, int]:
    """Integers n and t with n / 2^t ~ values to ``bits`` significant bits."""
    top = float(np.max(np.abs(values)))
    if top == 0:
        return np.zeros(values.shape, dtype=np.int64), 0
    t = bits - math.floor(math.log2(top)) - 1
    t = max(t, 0)
    return np.rint(values * 2.0**t).astype(np.int64), t


def weak_diagonal(theta: float, steps: int, branch: int) -> np.ndarray:
    """Diagonal of K_branch^steps for the verbatim weak pair."""
    k = qsim.weak_kraus(theta).kraus_ops[branch]
    return np.diag(k).real ** steps


def weak_oracle(rho: np.ndarray, theta: float, steps: int, branch: int = 1, wire: int = 0) -> np.ndarray:
    m = np.asarray(rho, dtype=complex)
    n = m.shape[0].bit_length() - 1
    k = qsim.embed(qsim.weak_kraus(theta).kraus_ops[branch], (wire,), n)
    for _ in range(steps):
        m = k @ m @ k.conj().T
    return m


def weak_update(es: EncryptedState, theta: float, steps: int, wire: int = 0, branch: int = 1,
                mantissa_bits: int = 12) -> EncryptedState:
    """Apply K_branch ``steps`` times as one quantized diagonal map, both components."""
    if steps == 0:
        return es
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    n, D = es.n_qubits, es.dim
    kd = weak_diagonal(theta, steps, branch)
    coeff = np.empty(D * D)
    for r in range(D):
        br = _index_bits(r, (wire,), n)[0]
        for c in range(D):
            coeff[r * D + c] = kd[br] * kd[_index_bits(c, (wire,), n)[0]]
    nums, t = _quantize_mantissa(coeff, mantissa_bits)
    idx = np.arange(D * D, dtype=np.int64)[:, None]
    vb = es.value_bound * float(np.max(np.abs(coeff)))
    out = _apply_sparse(es, idx, nums[:, None], np.zeros_like(nums)[:, None], t, value_bound=vb)
    out = replace(out, trace_one=False)
    return out.charged("WEAK", Fraction(theta).limit_denominator(10**9) * steps, f"WEAK {wire} {theta!r} {steps}")


@dataclass(frozen=True)
class WeakQuery:
    theta: float
    epsilon: float
    tau: float

    @property
    def s(self) -> int:
        return weak_steps(self.theta, self.epsilon)

    @property
    def threshold(self) -> float:
        return self.tau * (1 - self.theta) ** self.s

    def discrepancy_notes(self) -> dict:
        return {
            "s_formula": self.s,
            "s_printed": 44,
            "s_log2": math.ceil(math.log2(1 / self.epsilon)),
        }


def weak_steps(theta: float, epsilon: float) -> int:
    return math.ceil(math.log(1 / epsilon) / math.log(1 / (1 - theta)))


def encrypted_trace(es: EncryptedState) -> Ciphertext:
    D = es.dim
    return mlwe.he_sum([es.ct[0, 0, r * D + r] for r in range(D)])


def amplitude_query(es: EncryptedState, query: WeakQuery, client: Client) -> bool:
    """Server sums the diagonal; the client decrypts one scalar and thresholds it."""
    w = encrypted_trace(es)
    return bool(client.decrypt(w) >= query.threshold)


# ---------------------------------------------------------------- instruction execution


def _current_bit(es: EncryptedState, b: CBit, client: Client | None) -> CBit:
    # a refresh between measurement and use moves the state to a new key
    if b.value_ct.key_id == es.key_id:
        return b
    if client is None:
        raise mlwe.KeyMismatch("classical bit predates a refresh and no client can re-issue it")
    return client.reissue_bit(b, es.key_id, es.level)


def execute(es: EncryptedState, ins: Instruction, server: Server | None, client: Client | None,
            cbits: dict) -> EncryptedState:
    op = ins.op
    n = es.n_qubits
    if op in GATE_OPS:
        g = qsim.gate_superop(op, ins.wires, n, ins.phi, es.ctx.frac_bits)
        return apply_gate(es, g, ins.text)
    if op == "BELL":
        a, b = ins.wires
        if Fraction(es.noise_tracker) + es.sigma >= budget_of(es.ctx):
            raise RefreshNeeded("Bell preparation would cross the budget")
        out = lift(es, qsim.gate_superop("H", (a,), n))
        out = lift(out, qsim.gate_superop("CNOT", (a, b), n))
        return out.charged("BELL", 1, ins.text)
    if op == "MEAS":
        out, res = q2c(es, ins.wires if len(ins.wires) > 1 else ins.wires[0], ins.mode, client,
                       ins.theta or 0.1)
        if ins.mode == "feedback":
            bits = res if isinstance(res, tuple) else (res,)
            for w, cb in zip(ins.wires, bits):
                cbits[w] = cb
            cbits["_last"] = ins.wires
        elif ins.mode == "defer":
            cbits["_deferred"] = (ins.wires, tuple(range(n, n + len(ins.wires))))
        elif ins.mode == "weak":
            out = replace(out, op_trace=out.op_trace[:-1] + (ins.text,),
                          ledger=out.ledger[:-1] + (("MEAS", out.ledger[-1][1]),))
        return out
    if op == "CORR":
        (t,) = ins.wires
        if "_deferred" in cbits:
            (w1, w2), (p1, p2) = cbits.pop("_deferred")
            out = lift(es, qsim.gate_superop("CNOT", (p2, t), n))
            out = lift(out, qsim.gate_superop("CZ", (p1, t), n))
            drop = tuple(w for w in range(n) if w != t)
            out = partial_trace(out, drop)
            out = replace(out, op_trace=out.op_trace[:-1], ledger=out.ledger[:-1])
            return out.charged("CORR", 1, ins.text)
        w1, w2 = cbits["_last"]
        drop = tuple(w for w in range(n) if w != t)
        measured = (w1, w2)
        out = collapse(es, measured)
        out = replace(out, op_trace=out.op_trace[:-1], ledger=out.ledger[:-1])
        if out.n_qubits != 1:
            extra = tuple(w for w in drop if w not in measured)
            raise ValueError(f"CORR expects only the target left; untouched wires {extra}")
        out = teleport_correct(out, _current_bit(out, cbits[w1], client), _current_bit(out, cbits[w2], client), 0)
        return replace(out, op_trace=out.op_trace[:-1] + (ins.text,))
    if op == "CTRL":
        (w, m) = ins.wires
        U = qsim.gate_superop(ins.target, (w,), n)
        return he_control(U, es, _current_bit(es, cbits[m], client))
    if op == "TRACE":
        return partial_trace(es, ins.wires)
    if op == "WEAK":
        return weak_update(es, ins.theta, ins.steps, wire=ins.wires[0])
    if op == "REFRESH":
        return server.refresh(es)
    raise ValueError(f"unsupported instruction {op}")


def teleport(es: EncryptedState, server: Server, client: Client, report: RunReport | None = None) -> EncryptedState:
    return eval_schedule(es, TELEPORT_PROGRAM, server, client, report)


# ---------------------------------------------------------------- circuit privacy


TWIRL_MASKS = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")


def _mask_matrix(label: str) -> np.ndarray:
    sign = -1 if label[0] == "-" else 1
    return sign * qsim.PAULI[label[1]]


@dataclass(frozen=True)
class CliffordGate:
    """A lifted gate given by an integer matrix M and U = M / sqrt(2)^h."""

    label: str
    wires: tuple
    matrix: np.ndarray
    h: int

    @property
    def unitary(self) -> np.ndarray:
        return self.matrix / math.sqrt(2) ** self.h

    def superop(self, n: int) -> GateSuperop:
        full = qsim.embed(self.matrix, self.wires, n)
        re, im = qsim._gaussian_int_kron(full)
        return GateSuperop(self.label, self.wires, n, re, im, self.h)


def as_clifford(ins: Instruction) -> CliffordGate:
    m, h = qsim._CLIFFORD[ins.op]
    return CliffordGate(ins.op, ins.wires, m, h)


@dataclass
class TwirlPlan:
    masks: list  # plaintext mask labels, client side only
    encrypted_masks: list = field(default_factory=list)
    offsets: list = field(default_factory=list)

    def public_view(self) -> dict:
        return {"gates": len(self.masks), "encrypted": len(self.encrypted_masks)}


def twirl_compile(gates, rng, client: Client | None = None, key_level: int = 0):
    """Insert R, R G R^dag, R^dag around every Clifford gate.

    The circuit list is in time order, so the composite operator is
    R^dag (R G R^dag) R = G.  Masks are encrypted as three GSW bits each when a
    client is supplied.
    """
    rng = ring.make_rng(rng)
    prog = parse_program(gates) if isinstance(gates, str) else list(gates)
    out, masks, enc = [], [], []
    for ins in prog:
        if ins.op not in qsim._CLIFFORD:
            out.append(ins)
            masks.append(None)
            continue
        label = TWIRL_MASKS[int(rng.integers(6))]
        masks.append(label)
        w = ins.wires[0]
        R = _mask_matrix(label)
        g = as_clifford(ins)
        Rfull = qsim.embed(R, (0,), len(ins.wires))
        conj = Rfull @ g.matrix @ Rfull.conj().T
        out.append(CliffordGate(f"{label[1]}{ins.op}{label[1]}", (w,), R, 0))
        out.append(CliffordGate(f"{ins.op}^{label}", ins.wires, conj, g.h))
        out.append(CliffordGate(f"{label}dag", (w,), R.conj().T, 0))
        if client is not None:
            code = TWIRL_MASKS.index(label)
            enc.append(tuple(
                client.encrypt_bit((code >> k) & 1, client.sk.key_id, key_level, f"mask{len(masks)}:{k}")
                for k in range(3)
            ))
    return out, TwirlPlan(masks, enc)


def circuit_unitary(gates, n: int) -> np.ndarray:
    u = np.eye(2**n, dtype=complex)
    for g in gates:
        if isinstance(g, CliffordGate):
            m = qsim.embed(g.unitary, g.wires, n)
        else:
            m = qsim.gate_unitary(g.op, g.wires, n, g.phi)
        u = m @ u
    return u


def apply_compiled(es: EncryptedState, gates) -> EncryptedState:
    for g in gates:
        if isinstance(g, CliffordGate):
            es = apply_gate(es, g.superop(es.n_qubits), g.label)
        else:
            es = apply_gate(es, qsim.gate_superop(g.op, g.wires, es.n_qubits, g.phi, es.ctx.frac_bits))
    return es


@dataclass(frozen=True, eq=False)
class AngleOffset:
    j: int
    grid_bits: int
    ct: Ciphertext | None = None

    @property
    def angle(self) -> float:
        return -2 * math.pi * self.j / 2**self.grid_bits


def angle_split(phi: float, rng, grid_bits: int = 8, client: Client | None = None):
    """Publish phi + 2 pi r (mod 2 pi) and keep -2 pi r as an encrypted offset."""
    rng = ring.make_rng(rng)
    j = int(rng.integers(2**grid_bits))
    published = (phi + 2 * math.pi * j / 2**grid_bits) % (2 * math.pi)
    ct = None
    if client is not None:
        ct = mlwe.encrypt(client.pk, j, rng, scale_log2=client.ctx.frac_bits)
    return published, AngleOffset(j, grid_bits, ct)


def rz_up_to_phase(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between two unitaries modulo a global phase."""
    k = np.vdot(a.reshape(-1), b.reshape(-1))
    ph = k / abs(k) if abs(k) > 0 else 1
    return float(np.max(np.abs(a * ph - b)))


# ---------------------------------------------------------------- parameter advisor


@dataclass
class Advice:
    preset: str | None
    n_ops_sigma: float
    q_required: int
    q_required_weak: int
    weak_steps: int
    refresh_plan: list
    feasible: bool
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "n_ops_sigma": self.n_ops_sigma,
            "q_required": self.q_required,
            "q_required_weak": self.q_required_weak,
            "weak_steps": self.weak_steps,
            "refresh_plan": self.refresh_plan,
            "feasible": self.feasible,
            "notes": self.notes,
        }


def advise_params(gates, sigma: int = 3, presets=("toy", "teleport", "wide")) -> Advice:
    """Smallest preset with q >= 4 N_ops sigma and, for weak programs, q >= 4 sigma sqrt(s) 2^depth.

    N_ops is the summed table weight, so N_ops * sigma is the analytic total.
    When no preset satisfies the depth rule the largest is returned with a
    refresh plan that cuts the program into segments that each satisfy it.
    """
    prog = parse_program(gates) if isinstance(gates, str) else list(gates)
    n_ops = sum((ins.weight for ins in prog), Fraction(0))
    total = sigma * n_ops
    if not prog:
        fresh = 6 * sigma
        return Advice(presets[0], 0.0, 4 * fresh, 0, 0, [], True, ["empty program: fresh-encryption bound only"])
    s = sum(ins.steps for ins in prog if ins.op == "WEAK") + sum(1 for ins in prog if ins.mode == "weak")
    depth = len(prog)
    q_lin = math.ceil(4 * total)
    # the depth rule is applied to every program, with at least one weak step
    q_weak = math.ceil(4 * sigma * math.sqrt(max(s, 1)) * 2.0 ** min(depth, 1000))
    chains = {p: mlwe.make_context(p, sigma).chain for p in presets}
    notes = []
    for p in presets:
        q = chains[p][0]
        if q >= q_lin and q >= q_weak:
            plan = plan_schedule(prog, mlwe.make_context(p, sigma))
            return Advice(p, float(total), q_lin, q_weak, s, plan.refreshes, True, notes)
    # depth-driven refresh plan on the largest preset
    p = presets[-1]
    ctx = mlwe.make_context(p, sigma)
    seg = max(1, int(math.log2(ctx.q / (4 * sigma * math.sqrt(max(s, 1))))))
    plan = list(range(seg - 1, depth - 1, seg))
    feasible = len(plan) <= len(ctx.chain) - 1
    try:
        plan_schedule(prog, ctx)
    except RefreshChainExhausted as exc:
        feasible = False
        notes.append(str(exc))
    notes.append(f"depth rule allows {seg} gates per segment at q={ctx.q}")
    return Advice(p, float(total), q_lin, q_weak, s, plan, feasible, notes)

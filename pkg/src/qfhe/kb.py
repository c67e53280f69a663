"""Knowledge-base masks, encrypted axiom capsules and plaintext term quotients.

Proof states use one qubit per proposition: |1><1| on a wire means the
proposition is proved, |0><0| means no proof is known.  A fact channel resets
its wire to |1>, an implication P => Q copies a proof of P onto Q.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from . import mlwe, qsim, ring
from .mlwe import GswCiphertext, KeyMismatch, SecretKey
from .qhe import Client, EncryptedState, _add_public, partial_trace
from .qsim import Channel, DensityMatrix, MaskSpec

PAD_WIRE = "_pad"
PACK_OPS = 3  # Kraus operators per capsule after padding
PAIR_DIM = 4
CAPSULE_WEIGHT = 2

_PROP = re.compile(r"^\s*([A-Z][A-Za-z0-9_]*)\s*\(\s*([a-z][A-Za-z0-9_]*)\s*\)\s*$")
_PRED = re.compile(r"^[A-Z][A-Za-z0-9_]*$")


# ---------------------------------------------------------------- axioms


@dataclass(frozen=True)
class Axiom:
    id: str
    kind: str  # "fact" | "implies"
    predicate: str  # fact predicate, or premise of an implication
    subject: str = ""  # facts only
    conclusion: str = ""  # implications only

    def __post_init__(self):
        if self.kind not in ("fact", "implies"):
            raise ValueError(f"unknown axiom kind {self.kind!r}")
        for name in (self.predicate,) + ((self.conclusion,) if self.kind == "implies" else ()):
            if not _PRED.match(name):
                raise ValueError(f"bad predicate name {name!r}")
        if self.kind == "fact" and not self.subject:
            raise ValueError("a fact needs a subject")
        if self.kind == "implies" and self.predicate == self.conclusion:
            raise ValueError("trivial implication")

    @property
    def predicates(self) -> tuple[str, ...]:
        return (self.predicate,) if self.kind == "fact" else (self.predicate, self.conclusion)

    def to_json(self) -> dict:
        if self.kind == "fact":
            return {"fact": f"{self.predicate}({self.subject})"}
        return {"implies": [self.predicate, self.conclusion]}

    def __str__(self) -> str:
        if self.kind == "fact":
            return f"{self.predicate}({self.subject})"
        return f"{self.predicate}=>{self.conclusion}"


def parse_proposition(text: str) -> tuple[str, str]:
    m = _PROP.match(text)
    if not m:
        raise ValueError(f"expected a proposition like P(a), got {text!r}")
    return m.group(1), m.group(2)


def fact(text: str, id: str | None = None) -> Axiom:
    pred, subj = parse_proposition(text)
    return Axiom(id or f"fact:{pred}({subj})", "fact", pred, subject=subj)


def implies(p: str, q: str, id: str | None = None) -> Axiom:
    return Axiom(id or f"imp:{p}=>{q}", "implies", p, conclusion=q)


def axiom_from_json(obj: dict, index: int = 0) -> Axiom:
    if "fact" in obj:
        return fact(obj["fact"], obj.get("id") or f"a{index}")
    if "implies" in obj:
        p, q = obj["implies"]
        return implies(p, q, obj.get("id") or f"a{index}")
    raise ValueError(f"unrecognised axiom {obj!r}")


def load_kb(text: str) -> tuple[Axiom, ...]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("a KB file is a JSON list of axioms")
    return tuple(axiom_from_json(o, i) for i, o in enumerate(data))


def dump_kb(axioms) -> str:
    return json.dumps([a.to_json() for a in axioms], indent=2)


def predicates_of(axioms) -> tuple[str, ...]:
    """Declared predicates in order of first mention."""
    seen: dict[str, None] = {}
    for a in axioms:
        for p in a.predicates:
            seen.setdefault(p)
    return tuple(seen)


def closure(axioms, subject: str) -> set[str]:
    """Forward-chaining set of predicates proved for ``subject``."""
    proved = {a.predicate for a in axioms if a.kind == "fact" and a.subject == subject}
    rules = [a for a in axioms if a.kind == "implies"]
    changed = True
    while changed:
        changed = False
        for r in rules:
            if r.predicate in proved and r.conclusion not in proved:
                proved.add(r.conclusion)
                changed = True
    return proved


def derivation(axioms, predicate: str, subject: str) -> list[Axiom] | None:
    """A shortest fact + modus-ponens chain proving predicate(subject)."""
    facts = {a.predicate: a for a in axioms if a.kind == "fact" and a.subject == subject}
    rules = [a for a in axioms if a.kind == "implies"]
    # breadth-first from the facts keeps chains short and deterministic
    parent: dict[str, Axiom] = dict(facts)
    frontier = list(facts)
    while frontier:
        nxt = []
        for p in frontier:
            for r in rules:
                if r.predicate == p and r.conclusion not in parent:
                    parent[r.conclusion] = r
                    nxt.append(r.conclusion)
        frontier = nxt
    if predicate not in parent:
        return None
    chain = []
    cur = predicate
    while True:
        a = parent[cur]
        chain.append(a)
        if a.kind == "fact":
            break
        cur = a.predicate
    return chain[::-1]


# ---------------------------------------------------------------- Kraus packs


def _pair_ops(ax: Axiom | None) -> list[np.ndarray]:
    """Kraus operators on a wire pair (first wire is the MSB)."""
    ket = np.eye(2)
    if ax is None:
        return [np.eye(PAIR_DIM)]
    if ax.kind == "fact":
        # reset the first wire to |1>, second untouched
        return [np.kron(np.outer(ket[1], ket[0]), np.eye(2)), np.kron(np.outer(ket[1], ket[1]), np.eye(2))]
    p0, p1 = np.outer(ket[0], ket[0]), np.outer(ket[1], ket[1])
    return [np.kron(p0, np.eye(2)), np.kron(p1, np.outer(ket[1], ket[0])), np.kron(p1, p1)]


def kraus_pack(ax: Axiom | None) -> np.ndarray:
    """Padded 0/1 pack of shape (3, 4, 4); ``None`` gives the identity pack."""
    ops = _pair_ops(ax)
    pack = np.zeros((PACK_OPS, PAIR_DIM, PAIR_DIM), dtype=np.int64)
    for j, k in enumerate(ops):
        pack[j] = np.rint(k.real).astype(np.int64)
    return pack


def _check_pack_policy(pack: np.ndarray) -> None:
    # at most one nonzero per row of every operator; the noise bound relies on it
    if pack.shape != (PACK_OPS, PAIR_DIM, PAIR_DIM) or not np.isin(pack, (0, 1)).all():
        raise ValueError("Kraus pack must be 3 binary 4x4 operators")
    if (pack.sum(axis=2) > 1).any():
        raise ValueError("Kraus pack rows may hold at most one nonzero entry")


def axiom_channel(ax: Axiom, wires: dict[str, int], n: int) -> Channel:
    """Phi for one axiom on an n-wire proposition register."""
    if ax.kind == "fact":
        pair = (wires[ax.predicate], _partner(wires[ax.predicate], n))
    else:
        pair = (wires[ax.predicate], wires[ax.conclusion])
    ops = [qsim.embed(k, pair, n) for k in _pair_ops(ax)]
    return qsim.channel(ops, str(ax))


def _partner(w: int, n: int) -> int:
    if n < 2:
        raise ValueError("capsules act on two wires; pad the register")
    return 1 if w == 0 else 0


# ---------------------------------------------------------------- public KB mask


@dataclass(frozen=True)
class KBMask:
    axioms: tuple
    register: tuple  # predicate per wire
    channels: tuple  # Phi_i in application order
    p_pad: float = 0.75
    combined: bool = False

    @property
    def n_qubits(self) -> int:
        return len(self.register)

    @property
    def diamond_bound(self) -> float:
        # every Phi_i is CPTP, so the composite has diamond norm exactly 1
        return 1.0

    @property
    def pad(self) -> MaskSpec:
        return MaskSpec("depolarizing", self.p_pad)

    def is_cptp(self) -> bool:
        return all(c.is_cptp() for c in self.channels)

    def apply(self, rho) -> np.ndarray:
        m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
        for ch in self.channels:
            m = qsim.apply_channel(ch, DensityMatrix(m, normalized=False)).entries
        return m


def kb_mask(axioms, register=None, p_pad: float = 0.75) -> KBMask:
    """Composite of the axiom channels, ordered so every chain closes.

    Facts act once; implications are swept once per implication so any
    modus-ponens chain reaches its end regardless of listing order.
    """
    axioms = tuple(axioms)
    reg = tuple(register) if register is not None else predicates_of(axioms)
    if len(reg) < 2:
        reg = reg + (PAD_WIRE,)
    wires = {p: i for i, p in enumerate(reg)}
    missing = [p for p in predicates_of(axioms) if p not in wires]
    if missing:
        raise ValueError(f"predicates {missing} are not on the register")
    facts = [a for a in axioms if a.kind == "fact"]
    rules = [a for a in axioms if a.kind == "implies"]
    order = facts + rules * len(rules)
    chans = tuple(axiom_channel(a, wires, len(reg)) for a in order)
    return KBMask(axioms, reg, chans, p_pad)


# ---------------------------------------------------------------- capsules


@dataclass(frozen=True, eq=False)
class Capsule:
    """Encrypted Kraus pack acting on a public wire pair."""

    wires: tuple[int, int]
    pack: tuple  # PACK_OPS * 16 GSW ciphertexts, row-major
    key_id: str
    level: int = 0
    axiom_id: str = field(default="", repr=False)  # owner-side only

    def gsw(self, j: int, a: int, b: int) -> GswCiphertext:
        return self.pack[(j * PAIR_DIM + a) * PAIR_DIM + b]

    def to_bytes(self) -> bytes:
        """Server-visible encoding: wires, level and ciphertext rows only."""
        ctx = self.pack[0].ctx
        head = ring.pack_header(ctx.ring(self.level)) + struct.pack("<HHHH", *self.wires, self.level, len(self.pack))
        return head + b"".join(ring.coeff_bytes(g.rows) for g in self.pack)

    def public_view(self) -> Capsule:
        return replace(self, axiom_id="")


def _owner_key(sk_owner, level: int = 0) -> SecretKey:
    if isinstance(sk_owner, Client):
        return sk_owner._keys[level]
    return sk_owner


def capsule_make(sk_owner, axiom: Axiom | None, wires=(0, 1), rng=None, level: int = 0) -> Capsule:
    """GSW-encrypt the padded Kraus pack of ``axiom``.

    For a fact the proposition sits on ``wires[0]``; for P => Q the premise is
    on ``wires[0]`` and the conclusion on ``wires[1]``.
    """
    sk = _owner_key(sk_owner, level)
    if rng is None:
        rng = sk_owner.rng if isinstance(sk_owner, Client) else ring.make_rng(None)
    rng = ring.make_rng(rng)
    w = tuple(int(x) for x in wires)
    if len(w) != 2 or w[0] == w[1]:
        raise ValueError("a capsule needs two distinct wires")
    pack = kraus_pack(axiom)
    _check_pack_policy(pack)
    cts = tuple(mlwe.gsw_encrypt(sk, int(b), rng, level) for b in pack.reshape(-1))
    return Capsule(w, cts, sk.key_id, level, axiom.id if axiom is not None else "identity")


def capsule_open(sk_owner, c: Capsule) -> np.ndarray:
    sk = _owner_key(sk_owner, c.level)
    bits = [mlwe.gsw_decrypt(sk, g) for g in c.pack]
    return np.array(bits, dtype=np.int64).reshape(PACK_OPS, PAIR_DIM, PAIR_DIM)


def _pair_layout(n: int, wires: tuple[int, int]) -> np.ndarray:
    """sel[a, x] = basis index with pair bits a and remaining bits x."""
    rest = [w for w in range(n) if w not in wires]
    sel = np.zeros((PAIR_DIM, 2 ** len(rest)), dtype=np.int64)
    for a in range(PAIR_DIM):
        for x in range(2 ** len(rest)):
            bits = [0] * n
            bits[wires[0]], bits[wires[1]] = a >> 1, a & 1
            for i, w in enumerate(rest):
                bits[w] = (x >> (len(rest) - 1 - i)) & 1
            sel[a, x] = reduce(lambda acc, b: 2 * acc + b, bits, 0)
    return sel


def capsule_noise(ctx: mlwe.Context, eta: int, level: int = 0) -> int:
    """Rigorous bound after one capsule: 3 eta + 24 gadget terms."""
    gn = ctx.gadget_noise(ctx.k + 1, level)
    return PACK_OPS * eta + 2 * PACK_OPS * PAIR_DIM * gn


def capsule_apply(es: EncryptedState, c: Capsule) -> EncryptedState:
    """sum_j K_j rho K_j^T by external products, on both components.

    Every one of the 96 products runs regardless of the hidden entries, so
    the access pattern is independent of the axiom.
    """
    if c.key_id != es.key_id:
        raise KeyMismatch("capsule encrypted under a different key")
    if c.level != es.level:
        raise ring.ParameterMismatch("capsule and state sit at different levels")
    if max(c.wires) >= es.n_qubits:
        raise ValueError("capsule wires exceed the register")
    if es.mask.kind != "depolarizing" or not es.trace_one:
        raise ValueError("capsules need a trace-one state under a depolarizing pad")
    n, D = es.n_qubits, es.dim
    ctx, level = es.ctx, es.level
    p = ctx.ring(level)
    # strip the public pad offset so the mask component is linear in rho
    offset = (1 - es.mask.p) * np.eye(D) / D
    es = _add_public(es, 1, -offset)

    sel = _pair_layout(n, c.wires)
    flat = (sel[:, :, None, None] * D + sel[None, None, :, :]).reshape(-1)
    R = sel.shape[1]
    data = es.ct.data[:, :, flat].reshape((2, 2, PAIR_DIM, R, PAIR_DIM, R) + es.ct.data.shape[-2:])
    src = es.ct.with_data(data)

    # stage 1: T_j[a, b] = sum_e rho[a, e] K_j[b, e]
    dn = mlwe.gadget_digits_ntt(src)  # (2, 2, 4, R, 4, R, rows, d)
    T = []
    for j in range(PACK_OPS):
        cols = []
        for b in range(PAIR_DIM):
            acc = sum(mlwe.mac_digits(dn[:, :, :, :, e], c.gsw(j, b, e)) for e in range(PAIR_DIM)) % p.q
            cols.append(ring.intt(acc, p))
        T.append(np.stack(cols, axis=4))  # (2, 2, 4, R, 4[b], R, k+1, d)
    # stage 2: out[a', b] = sum_j sum_a K_j[a', a] T_j[a, b]
    out_ntt = None
    for j in range(PACK_OPS):
        dt = mlwe.gadget_digits_ntt(src.with_data(T[j]))
        rows = []
        for a2 in range(PAIR_DIM):
            rows.append(sum(mlwe.mac_digits(dt[:, :, a], c.gsw(j, a2, a)) for a in range(PAIR_DIM)))
        blk = np.stack(rows, axis=2)
        out_ntt = blk if out_ntt is None else out_ntt + blk
    out = ring.intt(out_ntt % p.q, p)

    new = np.empty_like(es.ct.data)
    new[:, :, flat] = out.reshape((2, 2, -1) + out.shape[-2:])
    ct = es.ct.with_data(new, capsule_noise(ctx, es.ct.noise_bound, level))
    es = replace(es, ct=ct)
    es = _add_public(es, 1, offset)
    return es.charged("CAPSULE", CAPSULE_WEIGHT, f"CAPSULE {c.wires[0]} {c.wires[1]}")


# ---------------------------------------------------------------- epistemic worlds


@dataclass(frozen=True)
class EpistemicWorld:
    owner: str
    axioms: tuple = ()
    mask: KBMask | None = None
    capsules: tuple = ()
    parts: tuple = ()  # non-empty for a combined perspective

    @property
    def combined(self) -> bool:
        return bool(self.parts)


def world(owner: str, axioms=(), p_pad: float = 0.75) -> EpistemicWorld:
    axioms = tuple(axioms)
    return EpistemicWorld(owner, axioms, kb_mask(axioms, p_pad=p_pad))


def mask_combine(world_a: EpistemicWorld, world_b: EpistemicWorld) -> EpistemicWorld:
    """Direct sum of two perspectives: registers side by side."""
    parts = (world_a.parts or (world_a,)) + (world_b.parts or (world_b,))
    axioms = tuple(a for w in parts for a in w.axioms)
    mask = None
    if all(w.mask is not None for w in parts):
        chans = tuple(ch for w in parts for ch in w.mask.channels)
        reg = tuple(f"{w.owner}:{p}" for w in parts for p in w.mask.register)
        mask = KBMask(axioms, reg, chans, world_a.mask.p_pad, combined=True)
    return EpistemicWorld(f"{world_a.owner}+{world_b.owner}", axioms, mask, parts=parts)


def _plan(w: EpistemicWorld, pred: str, subject: str):
    """Owner-side layout: the predicates on the derivation plus the query."""
    chain = derivation(w.axioms, pred, subject) or []
    reg: dict[str, None] = {}
    for a in chain:
        for p in a.predicates:
            reg.setdefault(p)
    reg.setdefault(pred)
    return chain, tuple(reg)


def knows_eval(w: EpistemicWorld, proposition: str, es_context=None, pad_to: int | None = None):
    """Truth qubit(s) of K_owner proposition; one wire per part of ``w``.

    With ``es_context=None`` the plaintext mask runs and a DensityMatrix comes
    back.  With a Client the owner builds capsules along a derivation and the
    capsule pipeline runs on ciphertexts; ``pad_to`` appends identity
    capsules so every query costs the same number of applications.
    """
    pred, subject = parse_proposition(proposition)
    parts = w.parts or (w,)
    if es_context is None:
        return _knows_plain(parts, pred, subject)
    client: Client = es_context
    layout, wires_of, steps = [], [], []
    for i, part in enumerate(parts):
        chain, reg = _plan(part, pred, subject)
        base = len(layout)
        local = {p: base + k for k, p in enumerate(reg)}
        layout.extend(f"{part.owner}:{p}" for p in reg)
        wires_of.append(local[pred])
        steps.extend((a, local) for a in chain)
    if len(layout) < 2:
        layout.append(PAD_WIRE)
    n = len(layout)
    caps = []
    for a, local in steps:
        if a.kind == "fact":
            pair = (local[a.predicate], _partner(local[a.predicate], n))
        else:
            pair = (local[a.predicate], local[a.conclusion])
        caps.append(capsule_make(client, a, pair))
    while pad_to is not None and len(caps) < pad_to:
        caps.append(capsule_make(client, None, (0, 1)))
    es = client.encrypt_state(qsim.basis_state("0" * n), MaskSpec("depolarizing", 0.75))
    for c in caps:
        es = capsule_apply(es, c.public_view())
    drop = [k for k in range(n) if k not in wires_of]
    return partial_trace(es, drop) if drop else es


def _knows_plain(parts, pred: str, subject: str) -> DensityMatrix:
    out = None
    for part in parts:
        own = tuple(a for a in part.axioms if a.kind == "implies" or a.subject == subject)
        reg = predicates_of(own)
        if pred not in reg:
            reg += (pred,)
        p_pad = part.mask.p_pad if part.mask is not None else 0.75
        mask = kb_mask(own, reg, p_pad)
        n = mask.n_qubits
        rho = mask.apply(qsim.basis_state("0" * n))
        truth = DensityMatrix(qsim.partial_trace(rho, [mask.register.index(pred)], n))
        out = truth if out is None else qsim.tensor(out, truth)
    return out


def truth_value(rho: DensityMatrix | np.ndarray, tol: float = 1e-3) -> tuple[int, ...]:
    """Read a diagonal basis state as a tuple of bits; raise if it is not one."""
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    diag = np.real(np.diag(m))
    k = int(np.argmax(diag))
    if abs(diag[k] - 1) > tol or np.max(np.abs(m - np.diag(np.eye(len(diag))[k]))) > tol:
        raise ValueError("state is not a definite truth value")
    n = len(diag).bit_length() - 1
    return tuple((k >> (n - 1 - i)) & 1 for i in range(n))


def truth_table(proposition: str = "P(a)", es_context=None) -> list[dict]:
    """The four membership cases for two perspectives A and B."""
    pred, subj = parse_proposition(proposition)
    rows = []
    for in_a, in_b in ((1, 1), (1, 0), (0, 1), (0, 0)):
        wa = world("A", [fact(proposition)] if in_a else [])
        wb = world("B", [fact(proposition)] if in_b else [])
        both = mask_combine(wa, wb)
        res = knows_eval(both, proposition, es_context)
        if isinstance(res, EncryptedState):
            res, _ = es_context.decrypt_state(res)
        rows.append({"in_A": in_a, "in_B": in_b, "K_A,K_B": list(truth_value(res))})
    return rows


# ---------------------------------------------------------------- plaintext term quotient

VARIABLES = frozenset("xyzuvw")
_TOKEN = re.compile(r"\s*(?:(⁻¹|\^-1)|([·*.])|(\()|(\))|([A-Za-z_][A-Za-z0-9_]*))")


class NonConfluence(RuntimeError):
    """Step cap exceeded; carries the rewrite trace instead of a guess."""

    def __init__(self, msg: str, trace: tuple):
        super().__init__(msg)
        self.trace = trace

    def report(self) -> dict:
        return {"error": str(self), "steps": len(self.trace) - 1, "last_terms": list(self.trace[-5:])}


def _tokens(text: str):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"unexpected input at {text[pos:]!r}")
        kind = next(i for i, g in enumerate(m.groups()) if g is not None)
        out.append(("inv", "op", "(", ")", "id")[kind] + ("" if kind != 4 else ":" + m.group(5)))
        pos = m.end()
    return out


def parse_term(text: str):
    """Terms: identifiers, binary '·' (left associative), postfix '⁻¹'."""
    toks = _tokens(text)
    i = 0

    def peek():
        return toks[i] if i < len(toks) else None

    def factor():
        nonlocal i
        t = peek()
        if t == "(":
            i += 1
            node = product()
            if peek() != ")":
                raise ValueError("unbalanced parentheses")
            i += 1
        elif t is not None and t.startswith("id:"):
            node = ("c", t[3:])
            i += 1
        else:
            raise ValueError(f"unexpected token {t!r}")
        while peek() == "inv":
            i += 1
            node = ("inv", node)
        return node

    def product():
        nonlocal i
        node = factor()
        while peek() == "op":
            i += 1
            node = ("*", node, factor())
        return node

    node = product()
    if i != len(toks):
        raise ValueError("trailing input")
    return node


def format_term(t, top: bool = True) -> str:
    if t[0] == "c":
        return t[1]
    if t[0] == "inv":
        inner = format_term(t[1], False)
        return (inner if t[1][0] != "*" else f"({inner})") + "⁻¹"
    left = format_term(t[1], False)
    right = format_term(t[2], False)
    if t[2][0] == "*":
        right = f"({right})"
    return f"{left}·{right}"


@dataclass(frozen=True)
class Rule:
    lhs: tuple
    rhs: tuple

    def __post_init__(self):
        if self.lhs[0] == "c" and self.lhs[1] in VARIABLES:
            raise ValueError("a rule may not rewrite a bare variable")
        if not _vars(self.rhs) <= _vars(self.lhs):
            raise ValueError("right-hand side introduces a fresh variable")


def _vars(t) -> set:
    if t[0] == "c":
        return {t[1]} if t[1] in VARIABLES else set()
    return set().union(*(_vars(s) for s in t[1:]))


def load_rules(obj) -> tuple[Rule, ...]:
    if isinstance(obj, str):
        obj = json.loads(obj)
    return tuple(Rule(parse_term(r["lhs"]), parse_term(r["rhs"])) for r in obj)


GROUP_RULES = ({"lhs": "e·x", "rhs": "x"}, {"lhs": "x⁻¹·x", "rhs": "e"})


def _match(pat, t, env: dict) -> bool:
    if pat[0] == "c" and pat[1] in VARIABLES:
        bound = env.get(pat[1])
        if bound is None:
            env[pat[1]] = t
            return True
        return bound == t
    if pat[0] != t[0] or len(pat) != len(t):
        return False
    if pat[0] == "c":
        return pat[1] == t[1]
    return all(_match(p, s, env) for p, s in zip(pat[1:], t[1:]))


def _subst(t, env):
    if t[0] == "c":
        return env.get(t[1], t) if t[1] in VARIABLES else t
    return (t[0],) + tuple(_subst(s, env) for s in t[1:])


def _step(rules, t):
    """One leftmost-outermost rewrite, or None at a normal form."""
    for r in rules:
        env: dict = {}
        if _match(r.lhs, t, env):
            return _subst(r.rhs, env)
    if t[0] == "c":
        return None
    for k in range(1, len(t)):
        s = _step(rules, t[k])
        if s is not None:
            return t[:k] + (s,) + t[k + 1 :]
    return None


def rewrite_trace(kb_rewrites, term, max_steps: int = 1000) -> tuple[str, ...]:
    rules = kb_rewrites if kb_rewrites and isinstance(kb_rewrites[0], Rule) else load_rules(list(kb_rewrites))
    t = parse_term(term) if isinstance(term, str) else term
    trace = [format_term(t)]
    for _ in range(max_steps):
        nxt = _step(rules, t)
        if nxt is None:
            return tuple(trace)
        t = nxt
        trace.append(format_term(t))
    raise NonConfluence(f"no normal form within {max_steps} steps", tuple(trace))


def term_quotient(kb_rewrites, term, max_steps: int = 1000) -> str:
    """Normal form of ``term`` under oriented rewrites, applied to fixpoint."""
    return rewrite_trace(kb_rewrites, term, max_steps)[-1]


def kb_digest(axioms) -> str:
    return hashlib.sha256(dump_kb(axioms).encode()).hexdigest()

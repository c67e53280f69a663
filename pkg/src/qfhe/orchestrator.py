"""Deterministic multi-node evaluation with a hash-chained audit ledger.

Nodes are in-process mailboxes driven by a discrete-event loop.  A job
carries its encrypted state and remaining blocks from node to node; every
state transition appends one audit record whose ciphertext bytes are
archived so a third party can recheck the chain.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

from . import mlwe, ring
from .qhe import (
    Client,
    EncryptedState,
    Instruction,
    PublicBundle,
    RunReport,
    Server,
    assert_no_secrets,
    eval_schedule,
    format_program,
    parse_program,
)

HASH_LEN = 32
GENESIS_PREV = bytes(HASH_LEN)
DEFAULT_BARRIER_BITS = 3  # barrier threshold q / 2^3 = q / 8


class LedgerCorrupt(ValueError):
    def __init__(self, msg: str, index: int):
        super().__init__(msg)
        self.index = index


# ---------------------------------------------------------------- audit ledger


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _int_bytes(x: int) -> bytes:
    return x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")


@dataclass(frozen=True)
class AuditRecord:
    index: int
    job_id: str
    rule: str
    ct_hash: bytes
    noise_bound: int
    prev_hash: bytes

    def body(self) -> bytes:
        return (
            struct.pack("<I", self.index)
            + _blob(self.job_id.encode())
            + _blob(self.rule.encode())
            + self.ct_hash
            + _blob(_int_bytes(self.noise_bound))
            + self.prev_hash
        )

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.body()).digest()

    def to_bytes(self) -> bytes:
        return self.body() + self.digest

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple[AuditRecord, bytes]:
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(buf):
                raise ValueError("truncated record")
            out = buf[off : off + n]
            off += n
            return out

        def blob():
            (n,) = struct.unpack("<I", take(4))
            return take(n)

        (index,) = struct.unpack("<I", take(4))
        job_id = blob().decode()
        rule = blob().decode()
        ct_hash = take(HASH_LEN)
        noise = int.from_bytes(blob(), "big")
        prev = take(HASH_LEN)
        stored = take(HASH_LEN)
        if off != len(buf):
            raise ValueError("trailing bytes in record")
        return cls(index, job_id, rule, ct_hash, noise, prev), stored

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "job_id": self.job_id,
            "rule": self.rule,
            "ct_hash": self.ct_hash.hex(),
            "noise_bound": self.noise_bound,
            "prev_hash": self.prev_hash.hex(),
            "hash": self.digest.hex(),
        }


@dataclass(frozen=True)
class Ledger:
    records: tuple = ()
    archive: tuple = ()  # serialized ciphertext per record
    stored_digests: tuple = ()  # digests as written; recomputed on verify

    def __len__(self) -> int:
        return len(self.records)

    @property
    def head(self) -> bytes:
        return self.stored_digests[-1] if self.records else GENESIS_PREV

    def to_json(self) -> str:
        return json.dumps([r.to_json() for r in self.records], indent=2)


def make_record(ledger: Ledger, job_id: str, rule: str, ct_bytes: bytes, noise_bound: int) -> AuditRecord:
    return AuditRecord(len(ledger), job_id, rule, hashlib.sha256(ct_bytes).digest(), int(noise_bound), ledger.head)


def audit_append(ledger: Ledger, record: AuditRecord, ct_bytes: bytes) -> Ledger:
    if record.index != len(ledger) or record.prev_hash != ledger.head:
        raise ValueError("record does not extend the ledger head")
    return Ledger(
        ledger.records + (record,),
        ledger.archive + (bytes(ct_bytes),),
        ledger.stored_digests + (record.digest,),
    )


def record_state(ledger: Ledger, job_id: str, rule: str, es: EncryptedState) -> Ledger:
    blob = mlwe.serialize_ciphertext(es.ct)
    return audit_append(ledger, make_record(ledger, job_id, rule, blob, es.ct.noise_bound), blob)


def audit_verify(ledger: Ledger) -> tuple[bool, int | None]:
    """Recheck digests, links, archived ciphertext hashes and q/4 bounds."""
    prev = GENESIS_PREV
    for i, rec in enumerate(ledger.records):
        blob = ledger.archive[i] if i < len(ledger.archive) else b""
        ok = (
            rec.index == i
            and rec.prev_hash == prev
            and i < len(ledger.stored_digests)
            and rec.digest == ledger.stored_digests[i]
            and hashlib.sha256(blob).digest() == rec.ct_hash
        )
        if ok:
            try:
                _, q = ring.unpack_header(blob)
            except (ValueError, struct.error):
                ok = False
            else:
                ok = rec.noise_bound < q // 4
        if not ok:
            return False, i
        prev = ledger.stored_digests[i]
    return True, None


def ledger_bytes(ledger: Ledger) -> bytes:
    """Length-prefixed records, each followed by its archived ciphertext."""
    out = bytearray()
    for rec, stored, blob in zip(ledger.records, ledger.stored_digests, ledger.archive):
        out += _blob(rec.body() + stored)
        out += _blob(blob)
    return bytes(out)


def ledger_from_bytes(buf: bytes, partial: bool = False):
    """Parse a ledger file.  With ``partial`` return (prefix, failing index)."""
    records, archive, digests = [], [], []
    off = 0
    while off < len(buf):
        i = len(records)
        try:
            parts = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", buf, off)
                if off + 4 + n > len(buf):
                    raise ValueError("length prefix runs past the end")
                parts.append(buf[off + 4 : off + 4 + n])
                off += 4 + n
            rec, stored = AuditRecord.from_bytes(parts[0])
        except (ValueError, struct.error, UnicodeDecodeError) as exc:
            if partial:
                return Ledger(tuple(records), tuple(archive), tuple(digests)), i
            raise LedgerCorrupt(f"record {i}: {exc}", i) from exc
        records.append(rec)
        digests.append(stored)
        archive.append(parts[1])
    ledger = Ledger(tuple(records), tuple(archive), tuple(digests))
    return (ledger, None) if partial else ledger


def write_ledger(ledger: Ledger, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ledger_bytes(ledger))


def verify_bytes(buf: bytes) -> tuple[bool, int | None]:
    # a corrupted length prefix can break parsing one record later, so the
    # parsed prefix is verified first and reports the earlier index
    ledger, fail = ledger_from_bytes(buf, partial=True)
    ok, bad = audit_verify(ledger)
    if not ok:
        return ok, bad
    return (False, fail) if fail is not None else (True, None)


def verify_file(path) -> tuple[bool, int | None]:
    with open(path, "rb") as fh:
        return verify_bytes(fh.read())


# ---------------------------------------------------------------- nodes and pipelines


@dataclass
class Message:
    seq: int
    job_id: str
    block: int


@dataclass
class Node:
    id: str
    bundle: PublicBundle
    blocks: tuple = ()  # indices of the gate blocks assigned here
    budget: Fraction = Fraction(0)
    inbox: deque = field(default_factory=deque)

    def __post_init__(self):
        assert_no_secrets(self)

    @property
    def server(self) -> Server:
        return Server(self.bundle)

    def receive(self, msg: Message) -> None:
        if not isinstance(msg, Message):
            raise TypeError("nodes accept routing messages only")
        self.inbox.append(msg)


@dataclass
class Pipeline:
    nodes: tuple
    blocks: tuple  # each a tuple of Instructions
    assignment: tuple  # node index per block
    seed: int
    barrier_bits: int = DEFAULT_BARRIER_BITS

    @property
    def gate_count(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def program(self) -> list[Instruction]:
        return [ins for b in self.blocks for ins in b]

    def declared_budget(self) -> Fraction:
        return sum((n.budget for n in self.nodes), Fraction(0))

    def to_json(self) -> dict:
        return {
            "nodes": len(self.nodes),
            "seed": self.seed,
            "barrier_bits": self.barrier_bits,
            "blocks": [format_program(b) for b in self.blocks],
            "assignment": list(self.assignment),
        }


@dataclass
class PipelineJob:
    job_id: str
    remaining: deque  # block indices still to run
    state: EncryptedState
    budget: Fraction
    gate_index: int = 0


def _as_block(b) -> tuple:
    return tuple(parse_program(b) if isinstance(b, str) else b)


def pipeline_build(gate_blocks, node_count: int, seed: int = 0, bundle: PublicBundle | None = None,
                   barrier_bits: int = DEFAULT_BARRIER_BITS) -> Pipeline:
    """Round-robin assignment of blocks to ``node_count`` nodes."""
    if node_count < 1:
        raise ValueError("need at least one node")
    if bundle is not None and not isinstance(bundle, PublicBundle):
        raise TypeError("nodes take a PublicBundle")
    blocks = tuple(_as_block(b) for b in gate_blocks)
    assignment = tuple(i % node_count for i in range(len(blocks)))
    budget = Fraction(bundle.ctx.q, 2**barrier_bits) if bundle is not None else Fraction(0)
    nodes = tuple(
        Node(f"node{k}", bundle, tuple(i for i, a in enumerate(assignment) if a == k), budget)
        for k in range(node_count)
    )
    return Pipeline(nodes, blocks, assignment, seed, barrier_bits)


def load_pipeline(text: str, bundle: PublicBundle | None = None) -> Pipeline:
    spec = json.loads(text)
    return pipeline_build(spec["blocks"], int(spec["nodes"]), int(spec.get("seed", 0)), bundle,
                          int(spec.get("barrier_bits", DEFAULT_BARRIER_BITS)))


def job_seed(pipeline: Pipeline, job_id: str) -> int:
    h = hashlib.sha256(f"{pipeline.seed}:{job_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _node_step(pipeline: Pipeline, node: Node, job: PipelineJob, ledger: Ledger, client, report) -> Ledger:
    msg = node.inbox.popleft()
    if msg.job_id != job.job_id:
        raise RuntimeError("message for another job")
    server = node.server
    es = job.state
    if node.budget and Fraction(es.noise_tracker) > node.budget:
        es = server.refresh(es)
        report.refreshes.append(("barrier", job.gate_index))
        ledger = record_state(ledger, job.job_id, f"BARRIER_REFRESH@{node.id}", es)
    box = [ledger]

    def observe(label, state):
        box[0] = record_state(box[0], job.job_id, label, state)

    block = pipeline.blocks[msg.block]
    es = eval_schedule(es, block, server, client, report, index_offset=job.gate_index, observer=observe)
    ledger = box[0]
    job.gate_index += len(block)
    job.state = es
    return ledger


def job_run(pipeline: Pipeline, es0: EncryptedState, client: Client | None = None, job_id: str = "job0",
            report: RunReport | None = None) -> tuple[EncryptedState, Ledger]:
    """Route the job through its nodes in block order, one record per transition."""
    nodes = pipeline.nodes
    if nodes and nodes[0].bundle is not None and nodes[0].bundle.pk.key_id != es0.key_id:
        raise mlwe.KeyMismatch("input state is not under the pipeline key")
    report = report if report is not None else RunReport()
    session = client.session(job_seed(pipeline, job_id)) if client is not None else None
    job = PipelineJob(job_id, deque(range(len(pipeline.blocks))), es0, pipeline.declared_budget())
    ledger = record_state(Ledger(), job_id, "GENESIS", es0)
    seq = 0
    # discrete-event loop: one in-flight message, delivered in sequence order
    while job.remaining:
        b = job.remaining.popleft()
        node = nodes[pipeline.assignment[b]]
        node.receive(Message(seq, job_id, b))
        seq += 1
        ledger = _node_step(pipeline, node, job, ledger, session, report)
    return job.state, ledger


def run_monolithic(pipeline: Pipeline, es0: EncryptedState, client: Client | None = None,
                   job_id: str = "job0", report: RunReport | None = None) -> EncryptedState:
    """Reference: the concatenated program on one server with the job's session seed."""
    if not pipeline.nodes or pipeline.nodes[0].bundle is None:
        raise ValueError("pipeline has no public key material")
    session = client.session(job_seed(pipeline, job_id)) if client is not None else None
    return eval_schedule(es0, pipeline.program, Server(pipeline.nodes[0].bundle), session, report)


def run_jobs(pipeline: Pipeline, states, client: Client | None = None, workers: int = 1):
    """Independent jobs, optionally on threads; output order follows input order."""
    ids = [f"job{i}" for i in range(len(states))]

    def one(args):
        es, jid = args
        local = replace(pipeline, nodes=tuple(replace(n, inbox=deque()) for n in pipeline.nodes))
        return job_run(local, es, client, jid)

    if workers <= 1:
        return [one(a) for a in zip(states, ids)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, zip(states, ids)))

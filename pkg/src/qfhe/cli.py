"""Command-line driver: demos, reports and benchmarks over the library."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import kb, mlwe, qhe, qsim, ring
from . import orchestrator as orch

EXIT_OK, EXIT_USAGE, EXIT_NOISE, EXIT_AUDIT = 0, 2, 3, 4

DEFAULTS = {
    "preset": "toy",
    "sigma": 3,
    "seed": "0",
    "p": 0.75,
    "theta": 0.1,
    "epsilon": 1e-3,
    "tau": 0.5,
    "nodes": 3,
    "format": "text",
    "out": None,
    "state": "random",
    "reps": 20,
    "rules": None,
    "kb": None,
}
_TYPES = {"sigma": int, "nodes": int, "reps": int, "p": float, "theta": float, "epsilon": float, "tau": float}


@dataclass
class RunReport:
    command: str
    preset: str = ""
    summary: dict = field(default_factory=dict)
    columns: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _plain(x):
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render_report(r: RunReport, fmt: str = "json") -> bytes:
    """Deterministic rendering: dataclass field order, fixed-width text tables."""
    data = _plain(r.to_json())
    if fmt == "json":
        return (json.dumps(data, indent=2, ensure_ascii=False) + "\n").encode()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"command: {r.command}"]
    if r.preset:
        lines.append(f"preset: {r.preset}")
    width = max((len(k) for k in data["summary"]), default=0)
    lines += [f"{k.ljust(width)}  {_cell(v)}" for k, v in data["summary"].items()]
    if r.columns:
        cells = [[_cell(v) for v in row] for row in data["rows"]]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(r.columns)]
        lines.append("")
        lines.append("  ".join(c.ljust(w) for c, w in zip(r.columns, widths)).rstrip())
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    for title in ("refreshes", "timings", "outputs", "notes"):
        val = data[title]
        if val:
            lines.append(f"{title}: {json.dumps(val, ensure_ascii=False)}")
    return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------- config


def read_config(path: str) -> dict:
    """Plain ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in DEFAULTS:
                raise ValueError(f"{path}:{n}: unknown key {k!r}")
            out[k] = v
    return out


COMMAND_DEFAULTS = {"weak-amplitude": {"preset": "teleport"}}


def resolve(args: argparse.Namespace) -> dict:
    """flags > config file > preset defaults."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(getattr(args, "command", ""), {}))
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k, t in _TYPES.items():
        cfg[k] = t(cfg[k])
    return cfg


def _seed(cfg) -> int:
    s = str(cfg["seed"])
    return int(s, 16)


def _out_dir(cfg) -> str | None:
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


# ---------------------------------------------------------------- commands


def cmd_keygen(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    rng = ring.make_rng(_seed(cfg))
    sk, pk = mlwe.keygen(ctx, rng)
    pk_bytes = mlwe.serialize_public_key(pk)
    sk_bytes = mlwe.serialize_secret_key(sk)
    rep = RunReport("keygen", cfg["preset"])
    rep.summary = {
        "d": ctx.d, "k": ctx.k, "q": ctx.q, "chain": list(ctx.chain), "sigma": ctx.sigma,
        "key_id": pk.key_id, "public_key_bytes": len(pk_bytes), "secret_key_bytes": len(sk_bytes),
    }
    out = _out_dir(cfg)
    if out:
        for name, blob in (("public.key", pk_bytes), ("secret.key", sk_bytes)):
            path = os.path.join(out, name)
            with open(path, "wb") as fh:
                fh.write(blob)
            rep.outputs.append(path)
    return EXIT_OK, rep


def _input_state(cfg, rng) -> qsim.DensityMatrix:
    kind = cfg["state"]
    if kind == "random":
        return qsim.random_density(1, rng)
    if kind == "plus":
        return qsim.ket_to_dm(np.array([1, 1]) / np.sqrt(2))
    return qsim.basis_state(kind)


def cmd_teleport(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    seed = _seed(cfg)
    client = qhe.Client(ctx, seed)
    server = qhe.Server(client.public_bundle())
    rho = _input_state(cfg, ring.make_rng(seed + 1))
    es = client.encrypt_state(qsim.tensor(rho, qsim.basis_state("00")), qsim.MaskSpec("depolarizing", cfg["p"]))
    run = qhe.RunReport()
    out = qhe.teleport(es, server, client, run)
    got, flag = client.decrypt_state(out)
    analytic = mlwe.noise_bound_of([label for label, _ in out.ledger], ctx.sigma)
    measured = qhe.measured_noise(client, out, rho.entries)
    rep = RunReport("teleport-demo", cfg["preset"])
    rep.summary = {
        "trace_distance": qsim.trace_distance(got.entries, rho.entries),
        "fidelity": qsim.fidelity(got.entries, rho.entries),
        "consistency_flag": flag,
        "total_analytic_noise": analytic,
        "tracker": _plain(out.noise_tracker),
        "analytic_over_q4": float(Fraction(analytic) / Fraction(ctx.q, 4)),
        "measured_raw_noise": measured,
        "rigorous_raw_bound": out.ct.noise_bound,
        "final_scale_bits": out.scale_log2,
    }
    rep.columns = ["step", "label", "increment", "sigma_units", "tracker"]
    tracker = Fraction(0)
    for i, ((label, w), text) in enumerate(zip(out.ledger, out.op_trace)):
        inc = ctx.sigma * w
        tracker += inc
        rep.rows.append([i, text, _plain(inc), f"+{_plain(w)}σ", _plain(tracker)])
    rep.refreshes = list(run.refreshes)
    return EXIT_OK, rep


def _read_program(path: str) -> str:
    if path == "teleport":
        return qhe.TELEPORT_PROGRAM
    with open(path) as fh:
        return fh.read()


def cmd_noise_report(cfg, program_path: str) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    prog = qhe.parse_program(_read_program(program_path))
    rep = RunReport("noise-report", cfg["preset"])
    rep.columns = ["index", "op", "increment", "tracker", "refresh", "level"]
    status = EXIT_OK
    try:
        plan = qhe.plan_schedule(prog, ctx)
        rep.rows = [[e.index, e.label, e.increment, e.tracker, e.refreshed, e.level] for e in plan.events]
        rep.refreshes = list(plan.refreshes)
        final = plan.final
    except qhe.RefreshChainExhausted as exc:
        rep.notes["error"] = str(exc)
        final = None
        status = EXIT_NOISE
    advice = qhe.advise_params(prog, ctx.sigma)
    n_ops = sum((ins.weight for ins in prog), Fraction(0))
    rep.summary = {
        "ops": len(prog),
        "n_ops_weighted": _plain(n_ops),
        "total_analytic_noise": _plain(ctx.sigma * n_ops),
        "budget_q_over_4": _plain(qhe.budget_of(ctx)),
        "final_tracker": _plain(final) if final is not None else "exhausted",
        "recommended_q_min": advice.q_required,
        "recommendation": f"q >= 4*N_ops*sigma = {advice.q_required}",
        "recommended_preset": advice.preset,
        "feasible": advice.feasible,
    }
    rep.notes["advice"] = advice.to_json()
    return status, rep


def _state_for_query(cfg, rng):
    kind = cfg["state"]
    if kind == "random":
        return qsim.random_density(1, rng)
    if kind == "plus":
        return qsim.ket_to_dm(np.array([1, 1]) / np.sqrt(2))
    return qsim.basis_state(kind)


def cmd_weak(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    seed = _seed(cfg)
    client = qhe.Client(ctx, seed)
    query = qhe.WeakQuery(cfg["theta"], cfg["epsilon"], cfg["tau"])
    rho = _state_for_query(cfg, ring.make_rng(seed + 1))
    es = client.encrypt_state(rho)
    rep = RunReport("weak-amplitude", cfg["preset"])
    try:
        upd = qhe.weak_update(es, query.theta, query.s)
    except (qhe.ScaleOverflow, qhe.RefreshNeeded) as exc:
        rep.notes["error"] = str(exc)
        return EXIT_NOISE, rep
    accept = qhe.amplitude_query(upd, query, client)
    weight = float(np.real(np.trace(qhe.weak_oracle(rho.entries, query.theta, query.s))))
    rep.summary = {
        "theta": query.theta, "epsilon": query.epsilon, "tau": query.tau, "s": query.s,
        "threshold": query.threshold, "plaintext_weight": weight,
        "accept": accept, "oracle_accept": weight >= query.threshold,
        "tracker": _plain(upd.noise_tracker),
    }
    rep.notes = query.discrepancy_notes()
    return EXIT_OK, rep


def cmd_kb(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context("toy", cfg["sigma"])
    client = qhe.Client(ctx, _seed(cfg))
    rep = RunReport("kb-demo", "toy")
    rep.columns = ["P in KB_A", "P in KB_B", "(K_A P, K_B P)"]
    for row in kb.truth_table("P(a)", client):
        a, b = row["K_A,K_B"]
        rep.rows.append([row["in_A"], row["in_B"], f"(|{a}>,|{b}>)"])
    if cfg["kb"]:
        with open(cfg["kb"]) as fh:
            axioms = kb.load_kb(fh.read())
        query = "Q(a)"
    else:
        axioms = (kb.fact("P(a)"), kb.implies("P", "Q"))
        query = "Q(a)"
    bob = kb.world("Bob", axioms)
    es = kb.knows_eval(bob, query, client)
    rho, flag = client.decrypt_state(es)
    rep.summary = {
        "kb": [str(a) for a in axioms],
        "query": f"K_Bob {query}",
        "truth": list(kb.truth_value(rho)),
        "consistency_flag": flag,
        "capsules": sum(1 for t in es.op_trace if t.startswith("CAPSULE")),
        "tracker": _plain(es.noise_tracker),
    }
    return EXIT_OK, rep


def cmd_quotient(cfg, term: str) -> tuple[int, RunReport]:
    rules = kb.GROUP_RULES
    if cfg["rules"]:
        with open(cfg["rules"]) as fh:
            rules = json.load(fh)
    rep = RunReport("quotient")
    try:
        trace = kb.rewrite_trace(list(rules), term)
    except kb.NonConfluence as exc:
        rep.notes = exc.report()
        return EXIT_NOISE, rep
    rep.summary = {"term": term, "normal_form": trace[-1], "steps": len(trace) - 1}
    rep.columns = ["step", "term"]
    rep.rows = [[i, t] for i, t in enumerate(trace)]
    return EXIT_OK, rep


def cmd_pipeline(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    seed = _seed(cfg)
    client = qhe.Client(ctx, seed)
    blocks = ["BELL 1 2", "CNOT 0 1\nH 0", "MEAS 0 1 feedback", "CORR 2"]
    pl = orch.pipeline_build(blocks, cfg["nodes"], seed, client.public_bundle())
    rho = _input_state(cfg, ring.make_rng(seed + 1))
    es0 = client.encrypt_state(qsim.tensor(rho, qsim.basis_state("00")))
    es, ledger = orch.job_run(pl, es0, client)
    mono = orch.run_monolithic(pl, es0, client)
    ok, bad = orch.audit_verify(ledger)
    got, flag = client.decrypt_state(es)
    rep = RunReport("pipeline-demo", cfg["preset"])
    rep.summary = {
        "nodes": cfg["nodes"],
        "assignment": list(pl.assignment),
        "records": len(ledger),
        "audit_ok": ok,
        "first_bad_index": bad,
        "matches_monolithic": bool(np.array_equal(es.ct.data, mono.ct.data)),
        "trace_distance": qsim.trace_distance(got.entries, rho.entries),
        "consistency_flag": flag,
        "ledger_head": ledger.head.hex(),
    }
    rep.columns = ["index", "rule", "noise_bound", "ct_hash"]
    rep.rows = [[r.index, r.rule, r.noise_bound, r.ct_hash.hex()[:16]] for r in ledger.records]
    out = _out_dir(cfg)
    if out:
        bpath, jpath = os.path.join(out, "ledger.bin"), os.path.join(out, "ledger.json")
        orch.write_ledger(ledger, bpath)
        with open(jpath, "w") as fh:
            fh.write(ledger.to_json())
        rep.outputs += [bpath, jpath]
    return (EXIT_OK if ok else EXIT_AUDIT), rep


def cmd_bench(cfg) -> tuple[int, RunReport]:
    ctx = mlwe.make_context(cfg["preset"], cfg["sigma"])
    client = qhe.Client(ctx, _seed(cfg))
    rep = RunReport("bench", cfg["preset"])
    rep.columns = ["gate", "qubits", "p50_ms", "p90_ms", "max_ms"]
    es1 = client.encrypt_state(qsim.basis_state("0"))
    es2 = client.encrypt_state(qsim.basis_state("00"))
    for label, es, targets in (("H", es1, (0,)), ("S", es1, (0,)), ("X", es1, (0,)),
                               ("CNOT", es2, (0, 1)), ("CZ", es2, (0, 1))):
        sop = qsim.gate_superop(label, targets, es.n_qubits)
        times = []
        for _ in range(cfg["reps"]):
            t0 = time.perf_counter()
            qhe.lift(es, sop)
            times.append((time.perf_counter() - t0) * 1e3)
        p50, p90 = np.percentile(times, [50, 90])
        rep.rows.append([label, es.n_qubits, float(p50), float(p90), float(max(times))])
    rep.timings = {"reps": cfg["reps"]}
    rep.notes = {"measured_only": "timings are hardware dependent and not compared with any target"}
    return EXIT_OK, rep


# ---------------------------------------------------------------- argument parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(ring.PRESETS))
    common.add_argument("--sigma", type=int)
    common.add_argument("--seed", help="hex seed")
    common.add_argument("--p", type=float, help="depolarizing mask strength")
    common.add_argument("--theta", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--nodes", type=int)
    common.add_argument("--out", help="directory for artifacts")
    common.add_argument("--format", choices=("json", "text"))
    common.add_argument("--state", help="input state: random, plus, or a bit string")
    common.add_argument("--reps", type=int)
    common.add_argument("--rules", help="JSON rewrite file")
    common.add_argument("--kb", help="JSON knowledge-base file")
    common.add_argument("--config", help="key = value config file")
    ap = argparse.ArgumentParser(prog="qfhe", description="Encrypted density-matrix evaluation demos")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("keygen", parents=[common])
    sub.add_parser("teleport-demo", parents=[common])
    nr = sub.add_parser("noise-report", parents=[common])
    nr.add_argument("program", help="program file, or 'teleport' for the built-in one")
    sub.add_parser("weak-amplitude", parents=[common])
    sub.add_parser("kb-demo", parents=[common])
    qp = sub.add_parser("quotient", parents=[common])
    qp.add_argument("term")
    sub.add_parser("pipeline-demo", parents=[common])
    sub.add_parser("bench", parents=[common])
    return ap


def dispatch(argv) -> tuple[int, RunReport | None]:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return (EXIT_USAGE if exc.code else EXIT_OK), None
    try:
        cfg = resolve(args)
        _seed(cfg)
    except (ValueError, OSError) as exc:
        print(f"qfhe: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    cmd = args.command
    try:
        if cmd == "keygen":
            status, rep = cmd_keygen(cfg)
        elif cmd == "teleport-demo":
            status, rep = cmd_teleport(cfg)
        elif cmd == "noise-report":
            status, rep = cmd_noise_report(cfg, args.program)
        elif cmd == "weak-amplitude":
            status, rep = cmd_weak(cfg)
        elif cmd == "kb-demo":
            status, rep = cmd_kb(cfg)
        elif cmd == "quotient":
            status, rep = cmd_quotient(cfg, args.term)
        elif cmd == "pipeline-demo":
            status, rep = cmd_pipeline(cfg)
        else:
            status, rep = cmd_bench(cfg)
    except (qhe.RefreshNeeded, qhe.ScaleOverflow) as exc:
        rep = RunReport(cmd, cfg["preset"], notes={"error": str(exc)})
        status = EXIT_NOISE
    except OSError as exc:
        print(f"qfhe: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    rep.preset = rep.preset or ""
    out = cfg["out"]
    if out and os.path.isdir(out):
        ext = "json" if cfg["format"] == "json" else "txt"
        path = os.path.join(out, f"report.{ext}")
        rep.outputs.append(path)
        with open(path, "wb") as fh:
            fh.write(render_report(rep, cfg["format"]))
    rep._format = cfg["format"]
    return status, rep


def main(argv=None) -> int:
    status, rep = dispatch(sys.argv[1:] if argv is None else argv)
    if rep is not None:
        sys.stdout.buffer.write(render_report(rep, getattr(rep, "_format", "text")))
        sys.stdout.flush()
    return status


if __name__ == "__main__":
    sys.exit(main())

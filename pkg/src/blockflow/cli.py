"""Command-line front end and the text diagram format.

Diagram files are line oriented::

    # comment
    block c1 Constant value=5
    block g Gain gain=0.5
    block s Sum signs=++
    connect c1.out0 g.in0
    connect g.out0 s.in0
    param g gain=0.25

Parameter values are Python literals (numbers, lists, quoted strings);
anything else is taken as a bare string. Blocks must be declared before
they are connected or re-parameterized.
"""

from __future__ import annotations

import argparse
import ast
import math
import re
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autofocus  # noqa: F401  (registers the focus block kinds)
from . import stdblocks  # noqa: F401
from .graph import (BLOCK_REGISTRY, SCALAR, Diagram, Executor, GraphError, Port, SlotRef,
                    detect_algebraic_loops, resolve_execution_order, validate_diagram)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

# kinds whose parameters cannot be written as literals
UNWRITABLE_KINDS = {"Function", "FocusPlant", "FocusDirection"}


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


# ---------------------------------------------------------------------------
# parsing


def _split(line: str) -> List[str]:
    """Whitespace split that keeps bracketed and quoted values together."""
    tokens, cur, depth, quote = [], [], 0, None
    for ch in line:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "'\"":
            quote = ch
        elif ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif ch == "#" and depth == 0:
            break
        elif ch.isspace() and depth == 0:
            if cur:
                tokens.append("".join(cur))
                cur = []
            continue
        cur.append(ch)
    if quote or depth:
        raise ValueError("unbalanced quote or bracket")
    if cur:
        tokens.append("".join(cur))
    return tokens


_SPECIAL = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan, "None": None,
            "true": True, "false": False}


def parse_value(text: str):
    if text in _SPECIAL:
        return _SPECIAL[text]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(v) -> str:
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, str):
        # bare when it would read back as the same string
        if v and parse_value(v) == v and not re.search(r"[\s#'\"\[\]()]", v):
            return v
        return repr(v)
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return repr(v).replace(" ", "")


def _params(tokens: Sequence[str], lineno: int) -> dict:
    out = {}
    for tok in tokens:
        key, eq, val = tok.partition("=")
        if not eq or not key.isidentifier():
            raise ParseError(lineno, f"expected key=value, got {tok!r}")
        if key in out:
            raise ParseError(lineno, f"parameter {key!r} given twice")
        out[key] = parse_value(val)
    return out


_SLOT = re.compile(r"^(?P<name>[^.\s]+)\.(?P<port>out|in|p)(?P<index>\d+)$")
_PORTS = {"out": Port.OUTPUT, "in": Port.INPUT, "p": Port.PARAMETER}


def _slot(d: Diagram, text: str, lineno: int) -> SlotRef:
    m = _SLOT.match(text)
    if not m:
        raise ParseError(lineno, f"bad slot {text!r}; expected name.outN, name.inN or name.pN")
    if m["name"] not in d:
        raise ParseError(lineno, f"unknown block {m['name']!r} (blocks must be declared first)")
    return SlotRef(d[m["name"]].id, _PORTS[m["port"]], int(m["index"]))


def parse_diagram(text: str) -> Diagram:
    d = Diagram()
    for lineno, raw in enumerate(text.splitlines(), 1):
        try:
            tokens = _split(raw)
        except ValueError as err:
            raise ParseError(lineno, str(err)) from None
        if not tokens:
            continue
        cmd, args = tokens[0], tokens[1:]
        if cmd == "block":
            if len(args) < 2:
                raise ParseError(lineno, "expected: block <name> <Kind> key=value...")
            name, kind = args[0], args[1]
            if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
                raise ParseError(lineno, f"bad block name {name!r}")
            if name in d:
                raise ParseError(lineno, f"duplicate block name {name!r}")
            cls = BLOCK_REGISTRY.get(kind)
            if cls is None:
                raise ParseError(lineno, f"unknown block kind {kind!r}")
            if kind in UNWRITABLE_KINDS:
                raise ParseError(lineno, f"{kind} blocks cannot be described in a diagram file")
            params = _params(args[2:], lineno)
            try:
                block = cls(**params)
            except (TypeError, ValueError, GraphError) as err:
                raise ParseError(lineno, f"bad parameters for {kind}: {err}") from None
            d.add(block, name)
        elif cmd == "connect":
            if len(args) != 2:
                raise ParseError(lineno, "expected: connect <src>.outN <dst>.inN")
            src, dst = _slot(d, args[0], lineno), _slot(d, args[1], lineno)
            try:
                d.connect(src, dst)
            except GraphError as err:
                raise ParseError(lineno, f"{type(err).__name__}: {err}") from None
        elif cmd == "param":
            if len(args) < 2:
                raise ParseError(lineno, "expected: param <name> key=value...")
            if args[0] not in d:
                raise ParseError(lineno, f"unknown block {args[0]!r} (blocks must be declared first)")
            for key, value in _params(args[1:], lineno).items():
                try:
                    d.set_param(args[0], key, value)
                except (TypeError, ValueError, GraphError) as err:
                    raise ParseError(lineno, f"bad parameter {key!r}: {err}") from None
        else:
            raise ParseError(lineno, f"unknown statement {cmd!r}")
    return d


def dump_diagram(d: Diagram) -> str:
    lines = []
    for bid in sorted(d.blocks):
        b = d.blocks[bid]
        if b.kind in UNWRITABLE_KINDS:
            raise ValueError(f"{b.label}: {b.kind} blocks cannot be written to a diagram file")
        params = " ".join(f"{k}={format_value(v)}" for k, v in b.params.items() if v is not None)
        lines.append(f"block {b.name} {b.kind}" + (f" {params}" if params else ""))
    port = {Port.OUTPUT: "out", Port.INPUT: "in", Port.PARAMETER: "p"}
    for e in d.sorted_edges():
        s, t = e.source, e.sink
        lines.append(f"connect {d.blocks[s.block_id].name}.{port[s.port]}{s.index} "
                     f"{d.blocks[t.block_id].name}.{port[t.port]}{t.index}")
    return "\n".join(lines) + "\n"


def diagram_structure(d: Diagram):
    """Comparable summary: blocks with kinds and parameters, plus edges."""
    def norm(v):
        if isinstance(v, np.ndarray):
            return norm(v.tolist())
        if isinstance(v, (list, tuple)):
            return tuple(norm(x) for x in v)
        return v

    blocks = tuple((bid, b.name, b.kind, tuple(sorted((k, norm(v)) for k, v in b.params.items() if v is not None)))
                   for bid, b in sorted(d.blocks.items()))
    edges = tuple((e.source, e.sink) for e in d.sorted_edges())
    return blocks, edges


# ---------------------------------------------------------------------------
# commands


def _load(path: str) -> Diagram:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    return parse_diagram(text)


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", newline="")


def _cmd_validate(args) -> int:
    d = _load(args.file)
    report = validate_diagram(d)
    if not report.ok:
        for v in report.violations:
            print(f"{args.file}: {v}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {len(d.blocks)} blocks, {len(d.edges)} connections")
    return EXIT_OK


def _require_valid(d: Diagram, path: str) -> Optional[int]:
    report = validate_diagram(d)
    if report.ok:
        return None
    for v in report.violations:
        print(f"{path}: {v}", file=sys.stderr)
    return EXIT_INVALID


def _cmd_order(args) -> int:
    d = _load(args.file)
    bad = _require_valid(d, args.file)
    if bad is not None:
        return bad
    schedule = resolve_execution_order(d)
    names = []
    for item in schedule.items:
        if isinstance(item, int):
            names.append(f"#{item} {d.blocks[item].name}")
        else:
            names.append("{" + ",".join(map(str, item.member_blocks)) + "}")
    print("schedule: " + " -> ".join(names))
    clusters = detect_algebraic_loops(d)
    if not clusters:
        print("loops: none")
    for c in clusters:
        unknowns = ", ".join(s for s, _ in c.unknowns)
        ext = ", ".join(s for s, _ in c.external_inputs) or "-"
        print("loop {" + ",".join(map(str, c.member_blocks)) + f"}} unknowns: {unknowns}; external: {ext}")
    return EXIT_OK


def _columns(d: Diagram):
    cols = []
    for bid in sorted(d.blocks):
        b = d.blocks[bid]
        for k, t in enumerate(b.output_types):
            if t == SCALAR:
                cols.append((f"{b.name}.out{k}", (bid, k), None))
            elif t.kind == "vector":
                cols.extend((f"{b.name}.out{k}[{j}]", (bid, k), j) for j in range(t.shape[0]))
    return cols


def _cmd_run(args) -> int:
    d = _load(args.file)
    bad = _require_valid(d, args.file)
    if bad is not None:
        return bad
    ex = Executor(d, seed=args.seed)
    cols = _columns(d)
    out = _open_out(args.csv)
    try:
        out.write(",".join(["cycle"] + [c[0] for c in cols]) + "\n")
        for n in range(args.cycles):
            sig = ex.step()
            vals = [sig[s] if j is None else np.asarray(sig[s])[j] for _, s, j in cols]
            out.write(",".join([str(n)] + [repr(float(v)) for v in vals]) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cmd_codegen(args) -> int:
    from .codegen import emit_c_header, emit_c_source, lower_to_flat_program

    d = _load(args.file)
    bad = _require_valid(d, args.file)
    if bad is not None:
        return bad
    name = args.name or re.sub(r"\W", "_", Path(args.file).stem) or "diagram"
    program = lower_to_flat_program(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.h").write_text(emit_c_header(program, name))
    (out / f"{name}.c").write_text(emit_c_source(program, name))
    if args.dump:
        (out / f"{name}.flat").write_text(program.dump())
    print(f"wrote {out / (name + '.h')} and {out / (name + '.c')}")
    return EXIT_OK


def parse_matrix(text: str) -> np.ndarray:
    """``"1,2;3,4"`` (rows separated by ``;``) or a Python literal."""
    text = text.strip()
    if text.startswith("["):
        return np.atleast_2d(np.array(ast.literal_eval(text), dtype=float))
    rows = [r for r in text.split(";")]
    return np.array([[float(x) for x in r.replace(",", " ").split()] for r in rows], dtype=float)


def parse_vector(text: str) -> np.ndarray:
    return parse_matrix(text).reshape(-1)


def _cmd_synth(args) -> int:
    from . import control as ctl

    if args.method == "dlqr":
        K, P = ctl.dlqr(parse_matrix(args.A), parse_matrix(args.B), parse_matrix(args.Q), parse_matrix(args.R))
        A, B = parse_matrix(args.A), parse_matrix(args.B)
        print(ctl.format_matrix("K", K))
        print(ctl.format_matrix("P", P))
        print(f"closed-loop spectral radius = {ctl.spectral_radius(A - B @ K)!r}")
    elif args.method == "c2d":
        sys_c = ctl.StateSpace(parse_matrix(args.A), parse_matrix(args.B), parse_matrix(args.C),
                               parse_matrix(args.D) if args.D else None)
        sd = ctl.c2d(sys_c, args.T, args.discretization)
        for n in "ABCD":
            print(ctl.format_matrix(n, getattr(sd, n)))
    elif args.method == "ss2tf":
        tf = ctl.ss2tf(ctl.StateSpace(parse_matrix(args.A), parse_matrix(args.B), parse_matrix(args.C),
                                      parse_matrix(args.D) if args.D else None))
        print(ctl.format_matrix("num", tf.num))
        print(ctl.format_matrix("den", tf.den))
    else:
        ss = ctl.tf2ss(ctl.TransferFunction(parse_vector(args.num), parse_vector(args.den)))
        for n in "ABCD":
            print(ctl.format_matrix(n, getattr(ss, n)))
    return EXIT_OK


def _cmd_demo(args) -> int:
    if args.which == "autofocus":
        from .autofocus import PlantConfig, settle_cycle, simulate, write_trace_csv

        pc = PlantConfig(true_focus=args.true_focus, seed=args.seed)
        rows = simulate(pc, cycles=args.cycles)
        if args.csv:
            write_trace_csv(rows, sys.stdout if args.csv == "-" else args.csv)
        settled = settle_cycle(rows)
        final = rows[-1]
        print(f"autofocus: settled at cycle {settled}, final motor {final[4]:.4f}, "
              f"setpoint {final[3]:.4f}, true focus {pc.true_focus}",
              file=sys.stderr if args.csv == "-" else sys.stdout)
    else:
        from .stdblocks import AntiWindup, peak_overshoot, simulate_joint_servo

        traces = {s: simulate_joint_servo(s, cycles=args.cycles) for s in AntiWindup}
        if args.csv:
            out = _open_out(args.csv)
            try:
                names = [s.value for s in AntiWindup]
                out.write("cycle,reference," + ",".join(f"position_{n},torque_{n}" for n in names) + "\n")
                ref = traces[AntiWindup.NONE]
                for k in range(args.cycles):
                    vals = [repr(float(ref[k, 1]))]
                    for s in AntiWindup:
                        vals += [repr(float(traces[s][k, 2])), repr(float(traces[s][k, 3]))]
                    out.write(f"{k}," + ",".join(vals) + "\n")
            finally:
                if out is not sys.stdout:
                    out.close()
        info = sys.stderr if args.csv == "-" else sys.stdout
        for s, rows in traces.items():
            print(f"pid {s.value}: peak overshoot {peak_overshoot(rows):.6f}", file=info)
    return EXIT_OK


def _parse_address(text: str):
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def _cmd_net_echo(args) -> int:
    from .net import HmacSigner, UdpTransport, serve_echo

    try:
        key = bytes.fromhex(args.key)
    except ValueError:
        print("--key must be hex", file=sys.stderr)
        return EXIT_INVALID
    transport = UdpTransport(_parse_address(args.listen))
    print(f"echoing on {transport.address[0]}:{transport.address[1]} as node {args.address}", flush=True)
    try:
        drops = serve_echo(transport, args.address, HmacSigner(key), max_frames=args.max_frames,
                           timeout=args.timeout)
    except KeyboardInterrupt:
        drops = None
    finally:
        transport.close()
    if drops:
        print("dropped: " + ", ".join(f"{k}={v}" for k, v in sorted(drops.items())))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockflow", description="Block-diagram simulation and code generation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a diagram file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("order", help="print the execution schedule and algebraic loops")
    p.add_argument("file")
    p.set_defaults(func=_cmd_order)

    p = sub.add_parser("run", help="run cycles and write scalar signals as CSV")
    p.add_argument("file")
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--csv", default="-", help="output path, '-' for stdout")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("codegen", help="emit C89 source for a diagram")
    p.add_argument("file")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--dump", action="store_true", help="also write the flat program listing")
    p.set_defaults(func=_cmd_codegen)

    p = sub.add_parser("synth", help="controller synthesis and conversions")
    p.add_argument("method", choices=["dlqr", "c2d", "ss2tf", "tf2ss"])
    p.add_argument("--A")
    p.add_argument("--B")
    p.add_argument("--C")
    p.add_argument("--D")
    p.add_argument("--Q")
    p.add_argument("--R")
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--discretization", choices=["zoh", "tustin"], default="zoh")
    p.add_argument("--num")
    p.add_argument("--den")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("demo", help="closed-loop demos")
    p.add_argument("which", choices=["autofocus", "pid"])
    p.add_argument("--cycles", type=int, default=800)
    p.add_argument("--csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--true-focus", type=float, default=0.45)
    p.set_defaults(func=_cmd_demo)

    p = sub.add_parser("net-echo", help="echo signed frames over UDP")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--key", required=True)
    p.add_argument("--address", type=int, default=1)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=_cmd_net_echo)
    return ap


_SYNTH_NEEDS = {"dlqr": "ABQR", "c2d": "ABCT", "ss2tf": "ABC", "tf2ss": ("num", "den")}


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "synth":
        missing = [n for n in _SYNTH_NEEDS[args.method] if getattr(args, n) is None]
        if missing:
            print(f"synth {args.method} needs " + ", ".join(f"--{n}" for n in missing), file=sys.stderr)
            return EXIT_INVALID
    try:
        return args.func(args)
    except ParseError as err:
        print(f"{getattr(args, 'file', '')}: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID if isinstance(err, (FileNotFoundError, ValueError)) else EXIT_RUNTIME
    except Exception as err:  # runtime failures during a run or synthesis
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

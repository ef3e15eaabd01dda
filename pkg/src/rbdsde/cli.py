"""Command-line front end: ``rbdsde <command> --config run.ini``.

Commands: check-assumptions, envelope, solve, iterate, compare, lemma, oracle.
Each run writes CSV files plus ``manifest.json`` (written last, atomically)
into the output directory. Exit status is 0 on success, 2 when a hypothesis
gate refuses the run and 1 on configuration or numerical errors. A config
that fails validation writes nothing.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import inspect
import json
import logging
import os
import struct
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .condexp import RegressionBasis
from .envelope import inf_envelope, sup_envelope, tabulate
from .model import BANK, audit_assumptions, builtin_problem
from .noise import enumerate_tree, make_grid, sample_noise
from .scheme import MonotonicityError, UnsupportedConfiguration, iterate_maximal, iterate_minimal
from .solver import SolverConfig, residual_check, solve_lipschitz
from .verification import (
    HypothesisRefused,
    PreconditionError,
    compare,
    comparison_bank,
    lemma_positivity,
    lemma_scenarios,
    snell_oracle,
    tree_bruteforce,
)

logger = logging.getLogger(__name__)

COMMANDS = ("check-assumptions", "envelope", "solve", "iterate", "compare", "lemma", "oracle")
OUT_ENV = "RBDSDE_OUT"
DEFAULT_OUT = "rbdsde-out"
EXIT_OK, EXIT_ERROR, EXIT_REFUSED = 0, 1, 2

BINARY_MAGIC = b"RBDS"
BINARY_VERSION = 1

# section -> key -> (parser, default)
_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _bool(s):
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {s!r}") from None


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _ridge(s):
    return None if s.strip().lower() == "auto" else float(s)


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


SCHEMA = {
    "grid": {"T": (float, 1.0), "N": (int, 4)},
    "noise": {"mode": (_choice("tree", "gaussian"), "tree"), "P": (int, 10000), "seed": (int, 0),
              "d": (int, 1), "l": (int, 1)},
    "solver": {"engine": (_choice("auto", "tree", "regression"), "auto"),
               "y_update": (_choice("implicit", "explicit"), "implicit"),
               "basis": (_choice("monomial", "indicator", "partition"), "monomial"),
               "degree": (int, 2), "bins": (int, 8), "ridge": (_ridge, None),
               "picard_tol": (float, 1e-12), "picard_max": (int, 50), "threads": (int, 1)},
    "scheme": {"tol": (_ridge, None), "max_n": (int, 50), "selection": (_choice("minimal", "maximal"), "minimal"),
               "envelope_n": (_floats, [2.0, 8.0, 32.0]), "y_min": (float, -8.0), "y_max": (float, 8.0),
               "G": (int, 2049), "direction": (_choice("auto", "inf", "sup"), "auto")},
    "command": {"case": (str, "all"), "scenario": (str, "all"), "oracle": (_choice("auto", "bruteforce", "snell"), "auto"),
                "budget": (int, 512), "tol": (_ridge, None), "t": (float, 0.0)},
    "output": {"dir": (str, None), "binary": (_bool, False)},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "step-generator"
    constants: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    source: str | None = None

    def get(self, section, key):
        return self.values[section][key]

    def echo(self) -> dict:
        return {"problem": {"name": self.problem, **self.constants}, **self.values}


def _line_of(text, section, key=None):
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and line and line[0] not in "#;":
            name = line.split("=", 1)[0].split(":", 1)[0].strip()
            if name.lower() == key.lower():
                return n
    return 0


def parse_config(text: str, source: str | None = None) -> RunConfig:
    """Parse and validate an INI config; errors name the offending line."""
    where = source or "<config>"
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None) or (exc.errors[0][0] if getattr(exc, "errors", None) else 0)
        raise ConfigError(f"{where}:{lineno}: {exc.message if hasattr(exc, 'message') else exc}") from None

    cfg = RunConfig(source=source)
    for section in parser.sections():
        if section != "problem" and section not in SCHEMA:
            raise ConfigError(f"{where}:{_line_of(text, section)}: unknown section [{section}]")

    if parser.has_section("problem"):
        sec = parser["problem"]
        cfg.problem = sec.get("name", cfg.problem).strip()
        if cfg.problem not in BANK:
            raise ConfigError(f"{where}:{_line_of(text, 'problem', 'name')}: unknown problem {cfg.problem!r}; "
                              f"known: {', '.join(sorted(BANK))}")
        allowed = set(inspect.signature(BANK[cfg.problem]).parameters)
        for key, raw in sec.items():
            if key == "name":
                continue
            if key not in allowed:
                raise ConfigError(f"{where}:{_line_of(text, 'problem', key)}: unknown key {key!r} for problem "
                                  f"{cfg.problem!r} (allowed: {', '.join(sorted(allowed))})")
            try:
                cfg.constants[key] = float(raw)
            except ValueError:
                raise ConfigError(f"{where}:{_line_of(text, 'problem', key)}: {key} must be a number") from None

    for section, keys in SCHEMA.items():
        values = {k: default for k, (_, default) in keys.items()}
        if parser.has_section(section):
            for key, raw in parser[section].items():
                if key not in keys:
                    raise ConfigError(f"{where}:{_line_of(text, section, key)}: unknown key {key!r} in [{section}]")
                try:
                    values[key] = keys[key][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"{where}:{_line_of(text, section, key)}: {section}.{key}: {exc}") from None
        cfg.values[section] = values

    _validate(cfg, where)
    return cfg


def _validate(cfg: RunConfig, where: str):
    v = cfg.values
    checks = [
        (v["grid"]["T"] > 0, "grid", "T", "must be positive"),
        (v["grid"]["N"] >= 1, "grid", "N", "must be >= 1"),
        (v["noise"]["P"] >= 1, "noise", "P", "must be >= 1"),
        (v["noise"]["d"] == 1 and v["noise"]["l"] == 1, "noise", "d", "bank problems have d = l = 1"),
        (v["solver"]["threads"] >= 1, "solver", "threads", "must be >= 1"),
        (v["scheme"]["y_max"] > v["scheme"]["y_min"], "scheme", "y_max", "must exceed y_min"),
        (v["scheme"]["G"] >= 2, "scheme", "G", "must be >= 2"),
        (len(v["scheme"]["envelope_n"]) > 0, "scheme", "envelope_n", "needs at least one level"),
    ]
    for ok, section, key, msg in checks:
        if not ok:
            raise ConfigError(f"{where}: [{section}] {key} {msg}")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config("", None)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# file output
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return "" if x is None else str(x)


def write_csv(path: Path, header, rows):
    """CSV with a header row, RFC-4180 quoting and 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_binary(path: Path, field, l: int = 1):  # noqa: E741
    """Dump Y, Z, dK as little-endian doubles after a small fixed header."""
    P, n1 = field.Y.shape
    d = field.Z.shape[2]
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<5I", BINARY_VERSION, n1 - 1, P, d, l))
        for arr in (field.Y, field.Z, field.dK):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_binary(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise ValueError("not an RBDS dump")
    version, N, P, d, l = struct.unpack_from("<5I", raw, 4)  # noqa: E741
    if version != BINARY_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    off = 4 + 20
    out = {"N": N, "P": P, "d": d, "l": l}
    for name, shape in (("Y", (P, N + 1)), ("Z", (P, N + 1, d)), ("dK", (P, N + 1))):
        count = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    if off != len(raw):
        raise ValueError("trailing bytes in dump")
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, manifest: dict):
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=out)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        os.replace(tmp, out / "manifest.json")
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class Run:
    """Shared state of one command invocation."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.files: list[str] = []
        self.metrics: dict = {}
        v = cfg.values
        self.grid = make_grid(v["grid"]["T"], v["grid"]["N"])
        self._noise = None
        s = v["solver"]
        self.solver = SolverConfig(
            y_update=s["y_update"], picard_tol=s["picard_tol"], picard_max=s["picard_max"],
            engine=None if s["engine"] == "auto" else s["engine"],
            basis=RegressionBasis(degree=s["degree"], ridge=s["ridge"], kind=s["basis"], bins=s["bins"]),
            threads=s["threads"],
        )

    @property
    def noise(self):
        if self._noise is None:
            n = self.cfg.values["noise"]
            if n["mode"] == "tree":
                self._noise = enumerate_tree(self.grid)
            else:
                self._noise = sample_noise(self.grid, n["P"], n["d"], n["l"], seed=n["seed"],
                                           threads=self.cfg.values["solver"]["threads"])
        return self._noise

    def spec(self):
        return builtin_problem(self.cfg.problem, **self.cfg.constants)

    def csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def solution_csv(self, name, fld):
        P = fld.P
        K = fld.K
        znorm = np.linalg.norm(fld.Z, axis=2)
        rows = [(self.grid.t(i), fld.Y[:, i].mean(), fld.Y[:, i].std() / np.sqrt(P), K[:, i].mean(), znorm[:, i].mean())
                for i in range(fld.N + 1)]
        self.csv(name, ["t", "mean_Y", "stderr_Y", "mean_K", "mean_norm_Z"], rows)
        if self.cfg.values["output"]["binary"]:
            bname = Path(name).with_suffix(".bin").name
            write_binary(self.out / bname, fld, self.noise.l)
            self.files.append(bname)


def cmd_check_assumptions(run: Run):
    spec = run.spec()
    rep = audit_assumptions(spec, budget=run.cfg.values["command"]["budget"], seed=run.cfg.values["noise"]["seed"],
                            horizon=run.grid.T)
    run.csv("assumptions.csv", ["hypothesis", "status", "witness", "note"], rep.rows())
    run.metrics.update({k: v.status for k, v in rep.verdicts.items()})
    run.metrics["budget"] = rep.budget
    return EXIT_OK


def cmd_envelope(run: Run):
    spec = run.spec()
    sch = run.cfg.values["scheme"]
    t = run.cfg.values["command"]["t"]
    z0 = np.zeros((sch["G"], spec.d))
    base = tabulate(lambda y: spec.generator.f(t, y, z0), sch["y_min"], sch["y_max"], sch["G"])
    direction = sch["direction"]
    if direction == "auto":
        direction = "sup" if spec.generator.regularity.startswith("right") else "inf"
    cols, header = [base.nodes, base.values], ["y", "f"]
    for n in sch["envelope_n"]:
        if n < spec.generator.kappa:
            raise PreconditionError(f"envelope level {n} is below kappa = {spec.generator.kappa}")
        env = (inf_envelope if direction == "inf" else sup_envelope)(base, n)
        cols.append(env.values)
        header.append(f"f_{n:g}")
    run.csv("envelope.csv", header, zip(*cols))
    run.metrics.update({"direction": direction, "levels": sch["envelope_n"], "t": t})
    return EXIT_OK


def cmd_solve(run: Run):
    spec = run.spec()
    if spec.generator.lipschitz_C is None:
        raise HypothesisRefused("H0", None, f"generator of {spec.name!r} is not Lipschitz; use iterate")
    fld = solve_lipschitz(spec, run.noise, run.solver)
    run.solution_csv("solution.csv", fld)
    res = residual_check(spec, run.noise, fld, run.solver)
    run.metrics.update({"mean_Y0": fld.mean_Y0(), "mean_K_T": float(fld.K[:, -1].mean()),
                        "residual_projected_max": res.projected_max, "invariants_ok": res.invariants_ok})
    return EXIT_OK


def cmd_iterate(run: Run):
    spec = run.spec()
    sch = run.cfg.values["scheme"]
    rep = audit_assumptions(spec, budget=run.cfg.values["command"]["budget"], horizon=run.grid.T)
    side = "H3" if sch["selection"] == "minimal" else "H3R"
    if not (rep.passed("H2", "H4") and (rep.passed("H1") or rep.passed(side))):
        bad = next(k for k in ("H2", "H4", side) if not rep.passed(k))
        raise HypothesisRefused(bad, rep[bad].witness)
    fn = iterate_minimal if sch["selection"] == "minimal" else iterate_maximal
    fld, trace = fn(spec, run.noise, run.solver, tol=sch["tol"], max_n=sch["max_n"])
    rows = [(s.n, s.Y0_mean, s.delta, s.theta_norm, s.z_energy, s.monotone_margin, s.floor_margin, s.ceiling_margin)
            for s in trace]
    run.csv("trace.csv", ["n", "mean_Y0", "delta", "theta_norm", "z_energy", "monotone_margin", "floor_margin",
                          "ceiling_margin"], rows)
    run.solution_csv("solution.csv", fld)
    run.metrics.update({"selection": sch["selection"], "steps": len(trace), "mean_Y0": fld.mean_Y0(),
                        "final_delta": trace[-1].delta if trace else None})
    return EXIT_OK


def _select(items, wanted, what):
    if wanted == "all":
        return items
    names = {w.strip() for w in wanted.split(",")}
    picked = [it for it in items if it[0] in names]
    missing = names - {it[0] for it in picked}
    if missing:
        raise PreconditionError(f"unknown {what}: {', '.join(sorted(missing))}")
    return picked


def cmd_compare(run: Run):
    cases = _select([(c.name, c) for c in comparison_bank()], run.cfg.values["command"]["case"], "comparison case")
    rows, status, refused = [], EXIT_OK, []
    for name, case in cases:
        try:
            r = compare(case, run.noise, run.solver, tol=run.cfg.values["command"]["tol"])
        except HypothesisRefused as exc:
            rows.append((name, case.variant, "refused", None, None, None, None, None, None, str(exc)))
            refused.append(name)
            status = EXIT_REFUSED
            continue
        wp, wi = r.witness if r.witness else (None, None)
        rows.append((name, case.variant, "ok" if r.count == 0 else "violated", r.max_positive, r.count, wp, wi,
                     r.Y0_first, r.Y0_second, case.note))
    run.csv("comparison.csv", ["case", "variant", "status", "max_violation", "count", "witness_path", "witness_index",
                               "mean_Y0_first", "mean_Y0_second", "note"], rows)
    run.metrics.update({"cases": len(rows), "violations": sum(1 for r in rows if r[2] == "violated"),
                        "refused": refused})
    return status


def cmd_lemma(run: Run):
    scen = _select([(s[0], s) for s in lemma_scenarios()], run.cfg.values["command"]["scenario"], "lemma scenario")
    rows = []
    for name, (_, phi, xi, h) in scen:
        r = lemma_positivity(phi, xi, h, run.noise, run.solver, name=name)
        rows.append((name, r.min_free, r.min_reflected))
    run.csv("lemma.csv", ["scenario", "min_Y_free", "min_Y_reflected"], rows)
    run.metrics["min_Y"] = min(min(r[1], r[2]) for r in rows)
    return EXIT_OK


def cmd_oracle(run: Run):
    spec = run.spec()
    kind = run.cfg.values["command"]["oracle"]
    if kind == "auto":
        kind = "snell" if run.cfg.problem == "snell-only" else "bruteforce"
    fld = solve_lipschitz(spec, run.noise, run.solver)
    if kind == "snell":
        ref = snell_oracle(spec.obstacle, spec.terminal, run.noise)
    else:
        ref = tree_bruteforce(spec, run.noise, run.solver)
    rows = [(q, float(np.max(np.abs(getattr(fld, q) - getattr(ref, q))))) for q in ("Y", "Z", "dK")]
    run.csv("oracle.csv", ["quantity", "max_abs_diff"], rows)
    run.metrics.update({"oracle": kind, **{f"max_abs_diff_{q}": d for q, d in rows}})
    return EXIT_OK


HANDLERS = {
    "check-assumptions": cmd_check_assumptions,
    "envelope": cmd_envelope,
    "solve": cmd_solve,
    "iterate": cmd_iterate,
    "compare": cmd_compare,
    "lemma": cmd_lemma,
    "oracle": cmd_oracle,
}

REFUSALS = (HypothesisRefused, PreconditionError)
NUMERICAL = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError, MonotonicityError,
             UnsupportedConfiguration)


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run_command(command: str, cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    started = _stamp()
    error = None
    try:
        status = HANDLERS[command](run)
    except REFUSALS as exc:
        status, error = EXIT_REFUSED, f"{type(exc).__name__}: {exc}"
    except NUMERICAL as exc:
        status, error = EXIT_ERROR, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"rbdsde {command}: {error}", file=sys.stderr)
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.echo(),
        "config_source": cfg.source,
        "seed": cfg.values["noise"]["seed"],
        "started": started,
        "finished": _stamp(),
        "exit_status": status,
        "error": error,
        "metrics": run.metrics,
        "files": {name: sha256(out / name) for name in run.files},
    }
    write_manifest(out, manifest)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbdsde", description="Reflected BDSDE solver and verification harness.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__ or name.replace("-", " "))
        sp.add_argument("--config", help="INI file with [problem], [grid], [noise], [solver], [scheme], "
                                         "[command] and [output] sections")
        sp.add_argument("--problem", help="bank problem name (overrides [problem] name)")
        sp.add_argument("--seed", type=int, help="noise seed (overrides [noise] seed)")
        sp.add_argument("--threads", type=int, help="worker threads (overrides [solver] threads)")
        sp.add_argument("--out", help=f"output directory (default: [output] dir, ${OUT_ENV}, ./{DEFAULT_OUT})")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.problem is not None:
            if args.problem not in BANK:
                raise ConfigError(f"--problem: unknown problem {args.problem!r}")
            extra = set(cfg.constants) - set(inspect.signature(BANK[args.problem]).parameters)
            if extra:
                raise ConfigError(f"--problem {args.problem}: config constants {sorted(extra)} do not apply")
            cfg.problem = args.problem
        if args.seed is not None:
            cfg.values["noise"]["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg.values["solver"]["threads"] = args.threads
    except ConfigError as exc:
        print(f"rbdsde: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out or cfg.values["output"]["dir"] or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    return run_command(args.command, cfg, out)


if __name__ == "__main__":
    sys.exit(main())

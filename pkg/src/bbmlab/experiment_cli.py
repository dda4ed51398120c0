"""Command-line front end: config parsing, experiment runs, manifests and output audit.

Every command writes its primary outputs into ``--out-dir`` together with a
``<command>.manifest.json`` that lists them. Primary outputs depend only on the
command, its parameters, the seed and the replica count, so reruns are
byte-identical; the manifest also records the wall time and is not.

Exit codes: 0 success, 2 configuration error, 3 memory refusal, 4 sampler
budget exhausted, 5 output audit failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import stats

from . import bbm_core, fkpp_front, limit_process, observables
from .errors import DomainError, MemoryBudgetError, SamplerBudgetError
from .stochastic_kit import BETA_C, RngStream, log_sum_exp

OUT_ENV = "BBMLAB_OUT"
MANIFEST_SUFFIX = ".manifest.json"
EXIT_OK, EXIT_CONFIG, EXIT_MEMORY, EXIT_SAMPLER, EXIT_AUDIT = 0, 2, 3, 4, 5


class ConfigError(Exception):
    pass


# parameter parsing --------------------------------------------------------------

def parse_real(text: str) -> float:
    """A real number; the suffix ``bc`` multiplies by beta_c (``2bc`` = 2 sqrt2)."""
    s = str(text).strip()
    try:
        if s.endswith("bc"):
            return float(s[:-2] or 1.0) * BETA_C
        return float(s)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def parse_list(text: str) -> list:
    items = [p for p in str(text).replace(";", ",").split(",") if p.strip()]
    return [parse_real(p) for p in items]


def _opt_real(text):
    return None if str(text).strip().lower() in ("", "none") else parse_real(text)


# defaults per command; the type of each default decides how values are parsed
SCHEMAS = {
    "free-energy": {"betas": "0.5bc, 1bc, 2bc", "horizons": "8, 10, 12", "cutoff": "none"},
    "overlap-bbm": {"t": "12", "beta": "2bc", "beta_prime": "2bc", "a": "0.5", "n_pairs": "200",
                    "cutoff": "none"},
    "overlap-limit": {"beta": "2bc", "beta_prime": "2bc", "truncation_lower": "-5.656854249492381",
                      "bank_size": "500", "T_max": "20", "gamma_horizon": "400", "window_depth": "4",
                      "margin": "3", "fkpp_t_max": "400", "degenerate": "false"},
    "compare-rem": {"beta": "1.5bc", "beta_prime": "3bc", "truncation_lower": "-5.656854249492381",
                    "bank_size": "500", "T_max": "20", "gamma_horizon": "400", "window_depth": "4",
                    "margin": "3", "fkpp_t_max": "400", "degenerate": "false"},
    "fkpp": {"t_max": "100", "dx": "0.05", "dt": "none", "frame": "comoving", "level": "0.5"},
    "decoration": {"T_max": "20", "gamma_horizon": "400", "window_depth": "4", "margin": "3",
                   "conditioning_budget": "10000", "fkpp_t_max": "400", "beta": "2bc"},
}
_LISTS = {"betas", "horizons"}
_INTS = {"n_pairs", "bank_size", "conditioning_budget"}
_OPTIONAL = {"cutoff", "dt"}
_STRINGS = {"frame"}
_BOOLS = {"degenerate"}
DEFAULT_REPLICAS = {"free-energy": 100, "overlap-bbm": 100, "overlap-limit": 1000, "compare-rem": 10000,
                    "fkpp": 1, "decoration": 100}


def load_config(command: str, path=None) -> dict:
    """Resolve parameters: schema defaults, then the ``[common]`` and ``[<command>]`` sections."""
    raw = dict(SCHEMAS[command])
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            read = cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for sec in cp.sections():
            if sec not in ("common", command) and sec not in SCHEMAS:
                raise ConfigError(f"unknown section [{sec}]")
        for sec in ("common", command):
            if cp.has_section(sec):
                for k, v in cp.items(sec):
                    if k not in raw and sec == command:
                        raise ConfigError(f"unknown key {k!r} in [{sec}]")
                    if k in raw:
                        raw[k] = v
    out = {}
    for k, v in raw.items():
        if k in _LISTS:
            out[k] = parse_list(v)
            if not out[k]:
                raise ConfigError(f"{k} must not be empty")
        elif k in _INTS:
            x = parse_real(v)
            if x != int(x) or x <= 0:
                raise ConfigError(f"{k} must be a positive integer")
            out[k] = int(x)
        elif k in _OPTIONAL:
            out[k] = _opt_real(v)
        elif k in _STRINGS:
            out[k] = str(v).strip()
        elif k in _BOOLS:
            s = str(v).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{k} must be a boolean")
            out[k] = s in ("true", "1", "yes")
        else:
            out[k] = parse_real(v)
    return out


# manifests -------------------------------------------------------------------------

def config_digest(command: str, params: dict, seed: int, replicas: int) -> str:
    blob = json.dumps({"command": command, "params": params, "seed": seed, "replicas": replicas},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _versions() -> dict:
    out = {"python": sys.version.split()[0]}
    for name in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "unknown"
    return out


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seeds: list
    replicas: int
    parameters: dict
    outputs: list
    versions: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"{self.command}{MANIFEST_SUFFIX}"
        path.write_text(self.to_json())
        return path


def audit_outputs(out_dir) -> list:
    """Problems found in ``out_dir``: files in no manifest, in several, or missing."""
    out_dir = Path(out_dir)
    refs = {}
    problems = []
    for m in sorted(out_dir.glob("*" + MANIFEST_SUFFIX)):
        try:
            man = RunManifest.from_json(m.read_text())
        except (ValueError, TypeError) as exc:
            problems.append(f"unreadable manifest {m.name}: {exc}")
            continue
        for name in man.outputs:
            refs.setdefault(name, []).append(m.name)
            if not (out_dir / name).exists():
                problems.append(f"{m.name} lists missing output {name}")
    for f in sorted(out_dir.iterdir()):
        if f.is_dir() or f.name.endswith(MANIFEST_SUFFIX):
            continue
        owners = refs.get(f.name, [])
        if not owners:
            problems.append(f"orphan output {f.name}")
        elif len(owners) > 1:
            problems.append(f"{f.name} claimed by {', '.join(owners)}")
    return problems


# output helpers -------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_fmt) + "\n")


def _pool_map(fn, items, threads: int):
    """Order-preserving map; a process pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


# work units (top level so that worker processes can pickle them) -----------------------------

def _log_z_unit(args):
    seed, k, t, betas, cutoff = args
    x = bbm_core.simulate_positions(t, cutoff=cutoff, rng=RngStream(seed, k))
    return [log_sum_exp(b * x) for b in betas]


def _overlap_unit(args):
    seed, k, p = args
    st = RngStream(seed, k)
    tree = bbm_core.simulate(p["t"], pruning=p["cutoff"], rng=st)
    snap = bbm_core.snapshot(tree)
    return observables.replica_row(snap, seed, k, p["beta"], p["beta_prime"], p["a"], p["n_pairs"], st.child(1))


def _decoration_unit(args):
    seed, k, p, fkpp_path = args
    table = fkpp_front.load_table(fkpp_path)
    st = RngStream(seed, k)
    path = limit_process.sample_backward_path(p["gamma_horizon"], 0.01, table, rng=st.child(0).generator())
    dec = limit_process.sample_decoration_abbs(path, p["T_max"], table, p.get("conditioning_budget", 10 ** 4),
                                               rng=st.child(1), window_depth=p["window_depth"],
                                               margin=p["margin"], seed=seed)
    return path, dec


# commands --------------------------------------------------------------------------------

def _fkpp_table_path(t_max: float) -> Path:
    fkpp_front.cached_solve(t_max)
    key = fkpp_front.cache_key(t_max, None, 0.05, None, "comoving")
    return fkpp_front.default_cache_dir() / f"fkpp_{key}.bin"


def cmd_free_energy(p, seed, replicas, out_dir, threads):
    if replicas < 2:
        raise ConfigError("free-energy needs at least two replicas")
    rows = []
    for t in p["horizons"]:
        units = [(seed, k, t, p["betas"], p["cutoff"]) for k in range(replicas)]
        logz = np.array(_pool_map(_log_z_unit, units, threads))
        for i, b in enumerate(p["betas"]):
            f = logz[:, i] / t
            corr = f - b * bbm_core.centering(t) / t + np.sqrt(2.0) * b
            se = f.std(ddof=1) / np.sqrt(replicas)
            rows.append({"t": t, "beta": b, "replicas": replicas, "f_mean": f.mean(), "f_std_error": se,
                         "f_corrected_mean": corr.mean(), "f_corrected_std_error": se,
                         "f_analytic": observables.free_energy_limit(b)})
    cols = ["t", "beta", "replicas", "f_mean", "f_std_error", "f_corrected_mean", "f_corrected_std_error",
            "f_analytic"]
    write_csv(out_dir / "free_energy.csv", cols, rows)
    write_json(out_dir / "free_energy_summary.json",
               {"rows": len(rows), "max_abs_deviation_corrected":
                max(abs(r["f_corrected_mean"] - r["f_analytic"]) for r in rows)})
    return ["free_energy.csv", "free_energy_summary.json"]


def cmd_overlap_bbm(p, seed, replicas, out_dir, threads):
    if not (0 < p["a"] < 1):
        raise ConfigError("a must lie in (0, 1)")
    rows = _pool_map(_overlap_unit, [(seed, k, p) for k in range(replicas)], threads)
    observables.write_replica_csv(rows, out_dir / "overlap_bbm.csv")
    return ["overlap_bbm.csv"]


def _bank(p, seed, threads):
    fp = _fkpp_table_path(max(p["fkpp_t_max"], p["gamma_horizon"]))
    pairs = _pool_map(_decoration_unit, [(seed, k, p, str(fp)) for k in range(p["bank_size"])], threads)
    decs = [d for _, d in pairs if not d.failed]
    if not decs:
        raise SamplerBudgetError("every decoration failed its conditioning")
    lw = [path.log_weight for path, d in pairs if not d.failed]
    return limit_process.DecorationBank(decs, lw)


def _q_pairs(p, seed, replicas, threads):
    bank = None if p["degenerate"] else _bank(p, seed, threads)
    rng = RngStream(seed, 10 ** 9).generator()
    return limit_process.q_samples_from_bank(bank, replicas, p["truncation_lower"], p["beta"], p["beta_prime"],
                                             rng)


def cmd_overlap_limit(p, seed, replicas, out_dir, threads):
    qd, qr = _q_pairs(p, seed, replicas, threads)
    rows = [{"config": k, "q_decorated": a, "q_rem": b} for k, (a, b) in enumerate(zip(qd, qr))]
    write_csv(out_dir / "overlap_limit.csv", ["config", "q_decorated", "q_rem"], rows)
    return ["overlap_limit.csv"]


def paired_verdict(qd, qr) -> dict:
    """Mean difference of paired samples with a one-sided test for a negative mean."""
    d = np.asarray(qd) - np.asarray(qr)
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else float("nan")
    if not se > 0:
        p = 1.0 if d.mean() >= 0 else 0.0
    else:
        p = float(stats.t.cdf(d.mean() / se, df=d.size - 1))
    return {"mean_bbm_limit": float(np.mean(qd)), "mean_rem": float(np.mean(qr)),
            "difference": float(d.mean()), "std_error": se, "one_sided_p": p, "n_pairs": int(d.size)}


def cmd_compare_rem(p, seed, replicas, out_dir, threads):
    if replicas < 2:
        raise ConfigError("compare-rem needs at least two paired samples")
    qd, qr = _q_pairs(p, seed, replicas, threads)
    verdict = paired_verdict(qd, qr)
    verdict.update({"beta": p["beta"], "beta_prime": p["beta_prime"]})
    write_json(out_dir / "compare_rem.json", verdict)
    return ["compare_rem.json"]


def cmd_fkpp(p, seed, replicas, out_dir, threads):
    if p["frame"] not in ("comoving", "fixed"):
        raise ConfigError("frame must be comoving or fixed")
    table = fkpp_front.solve(p["t_max"], dt=p["dt"], dx=p["dx"], frame=p["frame"])
    fkpp_front.save_table(table, out_dir / "fkpp_table.bin")
    t, x, rel = fkpp_front.front_positions(table, p["level"])
    rows = [{"t": a, "x_front": b, "x_front_minus_m": c} for a, b, c in zip(t, x, rel)]
    write_csv(out_dir / "fkpp_front.csv", ["t", "x_front", "x_front_minus_m"], rows)
    return ["fkpp_table.bin", "fkpp_table.bin.json", "fkpp_front.csv"]


def cmd_decoration(p, seed, replicas, out_dir, threads):
    fp = _fkpp_table_path(max(p["fkpp_t_max"], p["gamma_horizon"]))
    pairs = _pool_map(_decoration_unit, [(seed, k, p, str(fp)) for k in range(replicas)], threads)
    rows = []
    with open(out_dir / "decorations.jsonl", "w") as fh:
        for k, (path, dec) in enumerate(pairs):
            fh.write(limit_process.decoration_to_json(dec) + "\n")
            rows.append({"index": k, "b": path.b, "log_weight": path.log_weight, "n_atoms": len(dec.atoms),
                         "n_times": dec.times.size, "failed": int(dec.failed),
                         "R": limit_process.decoration_functional_R(dec, p["beta"])})
    write_csv(out_dir / "decoration_diagnostics.csv", ["index", "b", "log_weight", "n_atoms", "n_times", "failed",
                                                       "R"], rows)
    return ["decorations.jsonl", "decoration_diagnostics.csv"]


COMMANDS = {"free-energy": cmd_free_energy, "overlap-bbm": cmd_overlap_bbm, "overlap-limit": cmd_overlap_limit,
            "compare-rem": cmd_compare_rem, "fkpp": cmd_fkpp, "decoration": cmd_decoration}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bbmlab", description="BBM extremal-process and overlap experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--replicas", type=int, default=None)
        sp.add_argument("--out-dir", default=None, help=f"defaults to ${OUT_ENV} or ./bbmlab_out")
        sp.add_argument("--config", default=None, help="INI file with [common] and per-command sections")
        sp.add_argument("--threads", type=int, default=1)
    au = sub.add_parser("audit", help="check that every output belongs to exactly one manifest")
    au.add_argument("--out-dir", default=None)
    return ap


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "bbmlab_out")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = _out_dir(args.out_dir)
    if args.command == "audit":
        problems = audit_outputs(out_dir) if out_dir.is_dir() else [f"no such directory {out_dir}"]
        for msg in problems:
            print(msg, file=sys.stderr)
        return EXIT_AUDIT if problems else EXIT_OK
    try:
        params = load_config(args.command, args.config)
        replicas = DEFAULT_REPLICAS[args.command] if args.replicas is None else args.replicas
        if replicas < 1 or args.threads < 1:
            raise ConfigError("replicas and threads must be positive")
        out_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        outputs = COMMANDS[args.command](params, args.seed, replicas, out_dir, args.threads)
        man = RunManifest(args.command, config_digest(args.command, params, args.seed, replicas), [args.seed],
                          replicas, params, outputs, _versions(), time.perf_counter() - t0)
        man.write(out_dir)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MemoryBudgetError as exc:
        print(f"resource refusal: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except SamplerBudgetError as exc:
        print(f"sampler budget exhausted: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    problems = audit_outputs(out_dir)
    for msg in problems:
        print(f"audit: {msg}", file=sys.stderr)
    return EXIT_AUDIT if problems else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

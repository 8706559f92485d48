"""Command-line front end.

Every run writes its outputs plus ``<out>.manifest.json`` holding the resolved
configuration, the package version, wall time and SHA-256 digests of the
outputs.  ``replay MANIFEST`` re-runs the recorded command and checks the
digests.  Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CellflowError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
FLAG_LIMIT = 0.01


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text):
    try:
        return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _field(name):
    from .hamiltonian import get_field
    try:
        return get_field(name)
    except KeyError:
        raise ConfigError(f"unknown field {name!r}") from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(a):
    from . import sde2d as S
    fld = _field(a.field)
    cfg = S.SdeConfig(epsilon=a.epsilon, delta_shell=a.delta, seed=a.seed,
                      dt_macro=a.dt, max_time=a.max_time)
    if a.start == "separatrix":
        x0 = S.separatrix_points(fld, a.paths, a.seed)
    elif a.start == "uniform":
        x0 = S.uniform_torus_points(fld, a.paths, a.seed)
    else:
        x0 = np.tile(_floats(a.start)[:2], (a.paths, 1))
    domain = S.Domain.parse(a.domain) if a.domain else None
    if a.excursions:
        rec = S.excursion_ensemble(fld, cfg, x0, a.excursions, horizon=a.horizon)
    else:
        mask = S._stop_mask(a.stop)
        if mask == 0 and a.horizon is None:
            raise ConfigError("--stop time needs --horizon")
        rec = S.simulate(fld, cfg, x0, targets=mask, horizon=a.horizon, max_events=2,
                         domain=domain)
    write_csv(a.out, ["path_id", "kind", "t", "x1", "x2", "H"], rec.event_rows())
    return [a.out], float(np.mean(rec.flagged))


def cmd_reeb_table(a):
    from .reeb import reeb_table_rows
    if a.levels < 4:
        raise ConfigError("--levels must be at least 4")
    write_csv(a.out, ["edge", "y", "a2", "b", "T"], reeb_table_rows(_field(a.field), a.levels))
    return [a.out], 0.0


def cmd_graph_sim(a):
    from .graphdiff import graph_ensemble
    from .reeb import GraphPoint, ReebGraph, reeb_graph
    g = ReebGraph.constant(h_max=a.h_max) if a.field == "unit" else reeb_graph(_field(a.field))
    if not 0 <= a.edge < g.n_edges:
        raise ConfigError(f"--edge must lie in [0, {g.n_edges})")
    if a.dt > 1e-3 * a.horizon:
        raise ConfigError("--dt must not exceed 1e-3 * horizon")
    res = graph_ensemble(g, GraphPoint(a.edge, a.y0), a.horizon, a.dt, a.seed, a.paths,
                         deltas=[a.delta], obs_times=[a.horizon], clock_target=a.horizon)
    rows = ((p, a.horizon, res.edge_end[p], res.y_end[p], res.D[p, 0, 0], res.N[p, 0],
             res.e_clock[p, 0], a.delta * res.D[p, 0, 0]) for p in range(a.paths))
    write_csv(a.out, ["path_id", "t", "edge", "y", "D", "N", "e_t", "L_est"], rows)
    return [a.out], 0.0


def cmd_chain_verify(a):
    from .chainlab import KilledChainSpec, four_cycle_spec, limit_law_test
    if a.spec:
        try:
            spec = KilledChainSpec.from_json(Path(a.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read chain spec: {exc}") from None
    else:
        spec = four_cycle_spec()
    reports = [limit_law_test(spec, e, a.samples, seed=a.seed).as_dict()
               for e in _floats(a.epsilon)]
    write_json(a.out, {"spec": spec.to_json(), "reports": reports})
    return [a.out], 0.0


def _rule(text):
    from .mc import RULES
    try:
        name, val = str(text).split(":")
        val = float(val)
    except ValueError:
        raise ConfigError(f"bad rule {text!r}; expected name:value") from None
    if name not in RULES:
        raise ConfigError(f"unknown rule {name!r}")
    return name, val


def cmd_regime_sweep(a):
    from . import sde2d as S
    from .mc import RegimeConfig, regime_sweep
    rule, val = _rule(a.rule)
    cfg = RegimeConfig(eps_list=tuple(_floats(a.eps_list)), rule=rule, param=val,
                       domain=S.Domain.parse(a.domain), f=a.f, paths=a.paths, seed=a.seed,
                       q_samples=a.q_samples)
    rows = regime_sweep(_field(a.field), cfg)
    cols = ["epsilon", "R", "u_hat", "se", "oracle", "oracle_se", "ratio"]
    write_csv(a.out, cols, ([r[c] for c in cols] for r in rows))
    return [a.out], max(r["flagged"] for r in rows)


def cmd_estimate_q(a):
    from .mc import estimate_Q
    est = estimate_Q(_field(a.field), a.epsilon, deltas=_floats(a.deltas),
                     samples=a.samples, seed=a.seed)
    write_json(a.out, {"Q_hat": est.Q_hat, "ci": est.ci, "n": est.n,
                       "per_delta": {_fmt(k): v for k, v in est.per_delta.items()}})
    return [a.out], 0.0


def build_parser():
    p = _Parser(prog="cellflow", description="Diffusion in cellular flows: numerical lab.")
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")
    p.add_argument("--config", help="JSON or key=value file supplying defaults")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="2D SDE stopping-event ledger")
    s.add_argument("--field", default="canonical")
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.add_argument("--delta", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--paths", type=int, default=100)
    s.add_argument("--horizon", type=float)
    s.add_argument("--stop", choices=["time", "separatrix", "shell", "domain"], default="time")
    s.add_argument("--domain")
    s.add_argument("--start", default="separatrix",
                   help="separatrix, uniform, or a point 'x1,x2'")
    s.add_argument("--excursions", type=int, default=0,
                   help="record this many separatrix/shell excursions instead")
    s.add_argument("--dt", type=float)
    s.add_argument("--max-time", type=float, default=1e4)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_simulate)

    s = sub.add_parser("reeb-table", help="tabulated edge coefficients")
    s.add_argument("--field", default="canonical")
    s.add_argument("--levels", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_reeb_table)

    s = sub.add_parser("graph-sim", help="diffusion on the Reeb graph")
    s.add_argument("--field", default="canonical", help="field name, or 'unit'")
    s.add_argument("--h-max", type=float, default=1e6, help="edge length of the unit graph")
    s.add_argument("--edge", type=int, default=0)
    s.add_argument("--y0", type=float, default=0.0)
    s.add_argument("--horizon", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=1e-4)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--paths", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_graph_sim)

    s = sub.add_parser("chain-verify", help="killed-chain limit law report")
    s.add_argument("--spec", help="JSON with P0, g, h (default: built-in 4-cycle)")
    s.add_argument("--epsilon", default="1e-5")
    s.add_argument("--samples", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_chain_verify)

    s = sub.add_parser("regime-sweep", help="u^{eps,R} against the regime oracles")
    s.add_argument("--field", default="canonical")
    s.add_argument("--rule", required=True,
                   help="averaging:gamma, transition:C, homogenization:gamma or fixed:R")
    s.add_argument("--eps-list", default="1e-3,1e-4")
    s.add_argument("--paths", type=int, default=1000)
    s.add_argument("--f", choices=["one", "cosine"], default="one")
    s.add_argument("--domain", default="disk:1")
    s.add_argument("--q-samples", type=int, default=4000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_regime_sweep)

    s = sub.add_parser("estimate-q", help="excursion covariance Q")
    s.add_argument("--field", default="canonical")
    s.add_argument("--epsilon", type=float, default=1e-4)
    s.add_argument("--deltas", default="0.2,0.1")
    s.add_argument("--samples", type=int, default=4000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_estimate_q)

    s = sub.add_parser("replay", help="re-run a manifest and compare digests")
    s.add_argument("manifest")
    s.set_defaults(run=None)
    return p


def load_config_file(path):
    """JSON object, or ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return data
    except json.JSONDecodeError:
        pass
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        k, v = (t.strip() for t in line.split("=", 1))
        out[k] = v.strip("\"'")
    return out


def _apply_file_defaults(parser, argv, cfg):
    """Re-parse with the file values as defaults so explicit flags still win."""
    ns = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = k.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {k!r} for {ns.command}")
        act = known[dest]
        defaults[dest] = act.type(v) if act.type and isinstance(v, str) else v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _set_threads(n):
    import numba
    cap = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(cap if n <= 0 else min(n, cap))


def _replay(path):
    man = json.loads(Path(path).read_text())
    code = dispatch(man["argv"], manifest=False)
    if code != EXIT_OK:
        return code
    for f, digest in man["digests"].items():
        if sha256(f) != digest:
            print(f"digest mismatch: {f}", file=sys.stderr)
            return EXIT_NUMERICAL
    return EXIT_OK


def dispatch(argv=None, manifest=True):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command == "replay":
            return _replay(ns.manifest)
        if ns.config:
            ns = _apply_file_defaults(parser, argv, load_config_file(ns.config))
        _set_threads(ns.threads)
        t0 = time.time()
        outputs, flagged = ns.run(ns)
        wall = time.time() - t0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CellflowError as exc:
        print(f"numerical failure [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if manifest:
        conf = {k: v for k, v in vars(ns).items() if k not in ("run", "config")}
        write_json(f"{outputs[0]}.manifest.json", {
            "subcommand": ns.command,
            "config": conf,
            "argv": _canonical_argv(ns),
            "seed": conf.get("seed"),
            "version": __version__,
            "wall_time": wall,
            "flagged_fraction": flagged,
            "digests": {os.fspath(o): sha256(o) for o in outputs},
        })
    if flagged > FLAG_LIMIT:
        print(f"warning: {flagged:.2%} of paths hit max_time", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _canonical_argv(ns):
    """Fully explicit argument list reproducing the run (file defaults resolved)."""
    out = ["--threads", str(ns.threads), ns.command]
    for k, v in vars(ns).items():
        if k in ("run", "config", "command", "threads") or v is None:
            continue
        flag = "--" + k.replace("_", "-")
        if isinstance(v, float):
            out += [flag, repr(v)]
        else:
            out += [flag, str(v)]
    return out


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

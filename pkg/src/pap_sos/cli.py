"""Command-line front end: ``pap-sos <subcommand> [flags]``.

JSON goes to stdout (or ``--out``), diagnostics to stderr.  Exit codes: 0 when every
requested assertion holds, 1 on an assertion failure, 2 on invalid configuration or an
exhausted budget.  Wall-clock timings are left out of the JSON unless ``--timings`` is
given, so the same config and seed always produce byte-identical output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constraint_projection as cp
from . import moment_matrix as mm
from . import pseudocalibration as pc
from . import sk_pipeline as sk
from . import spider_web as sw
from .graph_matrix import BudgetExceeded, HermiteTable, enumerate_shapes, norm_bound, realize, spectral_norm
from .hermite_basis import BasisKind
from .slice_moments import UnsupportedInstance, isqrt_exact

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    n: int = 8
    m: int | None = None
    p: int | None = None
    D: int = 2
    T: int = 4
    eps: float = 0.1
    setting: str = "gaussian"
    seed: int = 0
    trials: int = 1
    out: str | None = None
    tol: float | None = None
    timings: bool = False
    catalog_cap: int = 5000
    node_cap: int = 5000
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError("--n must be positive")
        if self.m is not None and self.m < 1:
            raise ConfigError("--m must be positive")
        if self.D < 0 or self.D % 2:
            raise ConfigError("--D must be a nonnegative even integer")
        if self.T < 0:
            raise ConfigError("--T must be nonnegative")
        if self.trials < 1:
            raise ConfigError("--trials must be positive")
        try:
            BasisKind.parse(self.setting)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.out is not None:
            parent = Path(self.out).parent if Path(self.out).suffix else Path(self.out)
            parent.mkdir(parents=True, exist_ok=True)
            if not os.access(parent, os.W_OK):
                raise ConfigError(f"output path {self.out} is not writable")

    @property
    def m_eff(self) -> int:
        return self.n if self.m is None else self.m

    def trial_seeds(self) -> list[int]:
        """Deterministic per-trial seeds split from the run seed."""
        ss = np.random.SeedSequence(self.seed)
        return [int(c.generate_state(1)[0]) for c in ss.spawn(self.trials)]


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer") from exc


def _clean(obj):
    """Make numpy scalars, tuples and non-finite floats JSON friendly."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- subcommands


def cmd_sample(cfg: RunConfig) -> tuple[dict, bool]:
    out = {"instances": []}
    for s in cfg.trial_seeds() if cfg.trials > 1 else [cfg.seed]:
        inst = pc.sample_instance(cfg.n, cfg.m_eff, cfg.setting, s)
        rec = inst.header()
        if cfg.out:
            stem = str(Path(cfg.out) / f"instance_n{cfg.n}_m{cfg.m_eff}_s{s}")
            inst.save(stem)
            rec["path"] = stem
        else:
            rec["data"] = inst.data
        out["instances"].append(rec)
    return out, True


def cmd_pseudocalibrate(cfg: RunConfig) -> tuple[dict, bool]:
    inst = pc.sample_instance(cfg.n, cfg.m_eff, cfg.setting, cfg.seed)
    pe = pc.build_pe(inst, cfg.D, cfg.T, catalog_cap=cfg.catalog_cap)
    out = {"n": cfg.n, "m": cfg.m_eff, "D": cfg.D, "T": cfg.T, "setting": inst.setting.value,
           "seed": cfg.seed, "one": pe.one}
    try:
        out["normalized"] = pc.normalize(pe).to_json()
    except pc.DegenerateInstance:
        out["normalized"] = None
    out["pe"] = pe.to_json()
    return out, True


def _oracle_suite(n: int, m: int, D: int, T: int) -> dict:
    from .pseudocalibration import boolean_planted_oracle, enumerate_alphas, odd_columns, planted_fourier_coeff

    checked = mismatches = 0
    for alpha in enumerate_alphas(n, m, T, binary=True):
        I = odd_columns(alpha)
        if len(I) > D:
            continue
        formula = planted_fourier_coeff(I, alpha, n, m, BasisKind.BOOLEAN)
        exact = boolean_planted_oracle(n, m, I, alpha)
        checked += 1
        mismatches += formula != exact
    return {"coefficients_checked": checked, "mismatches": mismatches, "ok": mismatches == 0}


def _booleanity_suite(inst: pc.Instance, pe: pc.PseudoExpectation) -> dict:
    entries_ok = bool(np.all(np.abs(inst.data) == 1.0))
    # Ẽ[v^I Σ_i v_i²] must equal Ẽ[v^I] for every |I| <= D - 2
    worst = 0.0
    for I in list(pe.values):
        if len(I) + 2 > pe.D:
            continue
        lhs = sum(pe.reduce_monomial(list(I) + [i, i]) for i in range(pe.n))
        worst = max(worst, abs(lhs - pe[I]))
    return {"entries_pm1": entries_ok, "sphere_residual": worst, "ok": entries_ok and worst <= 1e-12}


def cmd_verify(cfg: RunConfig) -> tuple[dict, bool]:
    setting = BasisKind.parse(cfg.setting)
    m = cfg.m_eff
    suites = cfg.extra.get("suites") or ["booleanity", "oracle", "window"]
    out: dict = {"n": cfg.n, "m": m, "D": cfg.D, "T": cfg.T, "setting": setting.value, "seed": cfg.seed}
    ok = True
    inst = pc.sample_instance(cfg.n, m, setting, cfg.seed)
    if "booleanity" in suites and setting is BasisKind.BOOLEAN:
        pe = pc.build_pe(inst, cfg.D, cfg.T, catalog_cap=cfg.catalog_cap)
        out["booleanity"] = _booleanity_suite(inst, pe)
        ok &= out["booleanity"]["ok"]
    if "oracle" in suites:
        if setting is BasisKind.BOOLEAN:
            if isqrt_exact(cfg.n) is None:
                raise ConfigError("boolean oracle needs a perfect-square n")
            res = _oracle_suite(cfg.n, m, cfg.D, cfg.T)
        else:
            res = {"ok": True}
        if cfg.n * m <= 12 and cfg.T <= 4:
            a = pc.build_pe(inst, cfg.D, cfg.T, mode="alpha-enum")
            b = pc.build_pe(inst, cfg.D, cfg.T, catalog_cap=cfg.catalog_cap)
            keys = set(a.values) | set(b.values)
            diff = max((abs(a[k] - b[k]) for k in keys), default=0.0)
            scale = max((abs(a[k]) for k in keys), default=1.0) or 1.0
            res["shape_sum_vs_alpha_enum"] = diff / scale
            res["ok"] = res["ok"] and diff <= 1e-9 * scale
        out["oracle"] = res
        ok &= res["ok"]
    if "window" in suites:
        rep = pc.truncation_window_check(cfg.n, m, cfg.D, cfg.T, setting)
        out["window"] = rep.to_json()
        ok &= rep.in_window
    return out, ok


def cmd_norms(cfg: RunConfig) -> tuple[dict, bool]:
    n = cfg.n
    m = cfg.m if cfg.m is not None else math.ceil(n ** 1.3)
    max_edges = cfg.extra.get("max_edges", 4)
    catalog = enumerate_shapes(2 * (cfg.D // 2) + max_edges + 2, max_edges, "calL",
                               max_u=max(cfg.D // 2, 1), max_v=max(cfg.D // 2, 1))
    need = cfg.extra.get("min_fraction", 0.95)
    seeds = cfg.trial_seeds()
    tables = [HermiteTable(pc.sample_instance(n, m, BasisKind.GAUSSIAN, s).data, BasisKind.GAUSSIAN) for s in seeds]
    rows = []
    ok = True
    for shape in catalog:
        bound = norm_bound(shape, n, m)
        norms = [spectral_norm(realize(shape, t).matrix) for t in tables]
        frac = sum(x <= bound for x in norms) / len(norms)
        rows.append({"shape": shape.to_json(), "bound": bound, "max_norm": max(norms), "fraction_within": frac})
        ok &= frac >= need
    return {"n": n, "m": m, "trials": cfg.trials, "shapes": len(rows), "results": rows}, ok


def psd_trial(n: int, m: int, D: int, T: int, seed: int, tol: float = 1e-8) -> dict:
    inst = pc.sample_instance(n, m, BasisKind.GAUSSIAN, seed)
    pe = pc.build_pe(inst, D, T)
    rec = {"seed": seed}
    try:
        pr = cp.project(pe, cp.build_Q(inst, D), normalize_after=True)
    except pc.DegenerateInstance as exc:
        rec.update(status="degenerate", detail=str(exc), psd=False)
        return rec
    M = mm.assemble(pr.pe, D)
    lam = mm.min_eigenvalue(M)
    norm = float(np.linalg.norm(M.matrix, 2))
    rec.update(status="ok", min_eigenvalue=lam, norm=norm, relative_min=lam / norm,
               psd=lam >= -tol * norm, block_certified=mm.block_psd_certify(M, M.eta, D),
               constraint_residual=pr.relative_residual)
    return rec


def cmd_psd(cfg: RunConfig) -> tuple[dict, bool]:
    tol = cfg.tol if cfg.tol is not None else 1e-8
    trials = [psd_trial(cfg.n, cfg.m_eff, cfg.D, cfg.T, s, tol) for s in cfg.trial_seeds()]
    passed = sum(t["psd"] for t in trials)
    need = cfg.extra.get("require_psd")
    out = {"n": cfg.n, "m": cfg.m_eff, "D": cfg.D, "T": cfg.T, "trials": trials,
           "min_eigenvalues": [t.get("min_eigenvalue") for t in trials], "psd_count": passed,
           "required": need}
    return out, need is None or passed >= need


def cmd_project(cfg: RunConfig) -> tuple[dict, bool]:
    tol = cfg.tol if cfg.tol is not None else 1e-8
    if cfg.D < 2:
        raise ConfigError("project needs D >= 2")
    inst = pc.sample_instance(cfg.n, cfg.m_eff, cfg.setting, cfg.seed)
    pe = pc.build_pe(inst, cfg.D, cfg.T, catalog_cap=cfg.catalog_cap)
    cm = cp.build_Q(inst, cfg.D)
    pr = cp.project(pe, cm)
    ann = {k: cp.verify_annihilation(pr.pe, k, inst, reference=pe) for k in range(2, cfg.D + 1)}
    proj_err = cp.projector_error(cm)
    out = {"n": cfg.n, "m": cfg.m_eff, "D": cfg.D, "T": cfg.T, "seed": cfg.seed,
           "Q_shape": list(cm.Q.shape), "rank": pr.rank, "gap_flag": pr.gap_flag, "collapsed": pr.collapsed,
           "residual_before": pr.residual_before, "relative_residual": pr.relative_residual,
           "annihilation": ann, "projector_error": proj_err}
    ok = pr.relative_residual <= tol and proj_err <= tol and all(v <= 1e-6 for v in ann.values())
    if cfg.D >= 4:
        nk = {}
        for k in range(4, cfg.D + 1):
            N = cp.build_Nk(k, inst, cfg.D).matrix
            nk[k] = float(np.linalg.norm(cm.Q.T @ N) / max(cm.norm * np.linalg.norm(N), 1e-300))
        out["LkNk"] = nk
        ok &= all(v <= tol for v in nk.values())
    return out, ok


def cmd_webs(cfg: RunConfig) -> tuple[dict, bool]:
    max_v = cfg.extra.get("max_vertices", 8)
    max_e = cfg.extra.get("max_edges", 4)
    side = cfg.extra.get("max_index", 2)
    catalog = enumerate_shapes(max_v, max_e, "calL", max_u=side, max_v=side)
    spiders = [s for s in catalog if sw.is_spider(s) is not None]
    rows = []
    ok = True
    for s in spiders:
        web = sw.build_web(s, node_cap=cfg.node_cap)
        chk = web.check()
        good = all(v for k, v in chk.items() if k.endswith("_ok") or k in ("squares_decrease", "root_value_one"))
        rows.append({"spider": s.to_json(), **chk, "ok": good})
        ok &= good
    return {"catalog": len(catalog), "spiders": len(spiders), "webs": rows}, ok


def cmd_sk(cfg: RunConfig) -> tuple[dict, bool]:
    if cfg.D != 2:
        raise ConfigError("sk-demo runs at D = 2")
    rep = sk.run_sk(cfg.n, cfg.p, cfg.D, cfg.T, cfg.seed)
    out = rep.to_json()
    ok = (abs(rep.normalized_norm - 1) <= 1e-6 and rep.chain_ok
          and 1.7 <= rep.lambda_max / math.sqrt(rep.n) <= 2.3)
    return out, ok


def _md_table(rows: list[dict]) -> str:
    cols = sorted({k for r in rows for k, v in r.items() if not isinstance(v, (dict, list))})
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c, "")) for c in cols) + " |")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_report(cfg: RunConfig) -> tuple[str, bool]:
    paths = cfg.extra.get("inputs") or []
    if not paths:
        raise ConfigError("report needs at least one JSON input")
    parts = []
    for path in paths:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        parts.append(f"## {Path(path).name}\n")
        scalars = {k: v for k, v in data.items() if not isinstance(v, (dict, list))}
        if scalars:
            parts.append(_md_table([scalars]) + "\n")
        for key, val in sorted(data.items()):
            if isinstance(val, list) and val and all(isinstance(r, dict) for r in val):
                parts.append(f"### {key}\n\n" + _md_table(val) + "\n")
    return "\n".join(parts), True


COMMANDS = {
    "sample": cmd_sample,
    "pseudocalibrate": cmd_pseudocalibrate,
    "verify": cmd_verify,
    "norms": cmd_norms,
    "psd": cmd_psd,
    "project": cmd_project,
    "webs": cmd_webs,
    "sk-demo": cmd_sk,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pap-sos", description="Pseudocalibration and SoS verification toolkit.")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("inputs", nargs="+")
            p.add_argument("--out")
            continue
        p.add_argument("--n", type=int, default=8)
        p.add_argument("--m", type=int)
        p.add_argument("--p", type=int)
        p.add_argument("--D", type=int, default=2)
        p.add_argument("--T", type=int, default=4)
        p.add_argument("--eps", type=float, default=0.1)
        p.add_argument("--setting", default="gaussian")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--trials", type=int, default=1 if name != "norms" else 50)
        p.add_argument("--out")
        p.add_argument("--tol", type=float)
        p.add_argument("--timings", action="store_true")
        if name == "verify":
            p.add_argument("--suites", nargs="+", choices=["booleanity", "oracle", "window"])
        if name == "psd":
            p.add_argument("--require-psd", type=int, metavar="K",
                           help="fail unless at least K trials are PSD within --tol")
        if name in ("norms", "webs"):
            p.add_argument("--max-edges", type=int, default=4)
        if name == "webs":
            p.add_argument("--max-vertices", type=int, default=8)
            p.add_argument("--max-index", type=int, default=2)
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    name = ns.pop("subcommand")
    if name is None:
        raise ConfigError("a subcommand is required")
    if name == "report":
        cfg = RunConfig(name, out=ns.get("out"), extra={"inputs": ns["inputs"]})
        return cfg
    base = {k: ns.pop(k) for k in ("n", "m", "p", "D", "T", "eps", "setting", "seed", "trials", "out", "tol", "timings")}
    extra = {k: v for k, v in ns.items() if v is not None}
    cfg = RunConfig(name, **base, extra=extra,
                    catalog_cap=_env_int("PAP_SOS_CATALOG_CAP", 5000),
                    node_cap=_env_int("PAP_SOS_NODE_CAP", 5000))
    cfg.validate()
    return cfg


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        build_parser().print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(argv)
        t0 = time.time()
        result, ok = COMMANDS[cfg.subcommand](cfg)
    except ConfigError as exc:
        build_parser().print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceeded, pc.ResourceLimit) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsupportedInstance, ValueError, NotImplementedError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if isinstance(result, dict):
        result = {**result, "passed": bool(ok)}
        if cfg.timings:
            result["seconds"] = time.time() - t0
        else:
            result.pop("seconds", None)
        text = dumps(result)
    else:
        text = result
    if cfg.out and cfg.subcommand != "sample":
        target = Path(cfg.out)
        if target.is_dir() or not target.suffix:
            target.mkdir(parents=True, exist_ok=True)
            target = target / f"{cfg.subcommand}.{'md' if cfg.subcommand == 'report' else 'json'}"
        target.write_text(text)
    else:
        sys.stdout.write(text)
    if not ok:
        print(f"{cfg.subcommand}: assertion failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main() -> None:
    sys.exit(run())

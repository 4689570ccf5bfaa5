"""Command-line entry point: ``strip-spectra <subcommand> [flags]``.

Every run is assembled into one configuration document (an optional
``--config`` file overlaid with command-line flags), validated against the
shipped JSON schema, and only then executed.  Exit codes: 0 success, 1
numerical failure or failed check, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import _io
from .channels import ChannelError, band_structure, channel_split, spectral_gap
from .model import OperatorModel, _matrix_from_json, fold_full_line, restrict, sample_potential
from .montecarlo import EnsembleConfig, ensemble_run
from .schur import RankDeficientError, find_rank_deficiencies, opnorm, rank_scan, schur_run
from .spectral import density_estimate, truncation_spectral_oracle
from .transfer import (
    AdmissibilityError,
    SingularSolveError,
    TransferOverflowError,
    boundary_data,
    transfer_from_boundary,
    transfer_product,
    truncate_potential,
)

THREADS_ENV = "STRIP_SPECTRA_THREADS"
NUMERICAL_ERRORS = (
    ArithmeticError, ChannelError, AdmissibilityError, SingularSolveError, TransferOverflowError,
    RankDeficientError, np.linalg.LinAlgError,
)


class ConfigError(Exception):
    pass


def load_schema() -> dict:
    text = resources.files("strip_spectra").joinpath("schemas/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"  {where}: {e.message}")
        raise ConfigError("invalid configuration:\n" + "\n".join(lines))


def parse_complex(text: str) -> complex:
    t = text.strip().replace(" ", "").replace("i", "j")
    try:
        return complex(t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse complex number {text!r}") from exc


def _complex_json(v) -> complex:
    return complex(v[0], v[1]) if isinstance(v, list) else complex(v)


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse number list {text!r}") from exc


def _pair(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(":")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from exc
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}")
    return vals


def _grid(text: str) -> dict:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected a:b:count, got {text!r}")
    try:
        return {"a": float(parts[0]), "b": float(parts[1]), "count": int(parts[2])}
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc


def _root_vector(text: str) -> list:
    out = []
    for s in text.split(","):
        c = parse_complex(s)
        out.append(c.real if c.imag == 0 else [c.real, c.imag])
    return out


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override its fields")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--plot", action="store_true", default=None, help="also write SVG charts of every CSV")
    p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("--out", help="output directory (default: current directory)")
    if model:
        p.add_argument("--model", type=Path, help="model JSON document")
        p.add_argument("--alpha", help="comma-separated diagonal of A")
        p.add_argument("--potential", choices=["zero", "diagonal-iid", "hermitian-gaussian"])
        p.add_argument("--sigma", type=float)
        p.add_argument("--p", type=float, help="decay exponent of sigma (n+1)^-p")
        p.add_argument("--dist", choices=["uniform", "gaussian"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strip-spectra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("bands", help="band structure Sigma and Sigma_0")
    _add_common(p)

    p = sub.add_parser("density", help="spectral density estimate f_n on a grid")
    _add_common(p)
    p.add_argument("--grid", type=_grid, help="a:b:count")
    p.add_argument("--depth", type=int)
    p.add_argument("--x", type=_root_vector, help="root vector, comma-separated (complex as 1+2i)")
    p.add_argument("--method", choices=["qr", "lstsq"])
    p.add_argument("--oracle-N", dest="oracle_N", type=int, help="add the dense-truncation density column")
    p.add_argument("--eta", type=float)

    p = sub.add_parser("schur-stats", help="per-step statistics of the Schur recursion")
    _add_common(p)
    p.add_argument("--z", type=parse_complex)
    p.add_argument("--window", type=_pair, help="a:b interval for the uniform gap constants")
    p.add_argument("--N", type=int, help="number of sites")
    p.add_argument("--m", type=int)

    p = sub.add_parser("rank-scan", help="rank diagnostics and deficiency candidates")
    _add_common(p)
    p.add_argument("--interval", type=_pair, help="a:b")
    p.add_argument("--points", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--N", type=int)

    p = sub.add_parser("verify", help="boundary-data vs product cross-check on random instances")
    _add_common(p, model=False)
    p.add_argument("--l", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--z", type=parse_complex)
    p.add_argument("--samples", type=int)
    p.add_argument("--tolerance", type=float)

    p = sub.add_parser("mc", help="Monte Carlo bound verification")
    _add_common(p)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--eta", type=float)
    p.add_argument("--window", type=_pair)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)

    p = sub.add_parser("fold", help="fold a full-line operator onto the half-strip")
    _add_common(p, model=False)
    return parser


# flags whose values may begin with '-' (negative numbers)
_SIGNED_FLAGS = {"--grid", "--window", "--interval", "--z", "--alpha", "--lambdas", "--x"}


def _join_signed(argv: list[str]) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _SIGNED_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
        else:
            out.append(a)
            i += 1
    return out


_MODEL_FLAGS = ("alpha", "potential", "sigma", "p", "dist")
_SKIP = {"config", "model", "subcommand", *_MODEL_FLAGS}


def assemble_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg["subcommand"] = args.subcommand
    if getattr(args, "model", None) is not None:
        try:
            cfg["model"] = json.loads(Path(args.model).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read model {args.model}: {exc}") from exc
    if getattr(args, "alpha", None) is not None:
        cfg["model"] = {"alpha": _floats(args.alpha)}
    if any(getattr(args, k, None) is not None for k in _MODEL_FLAGS[1:]):
        model = cfg.setdefault("model", {})
        pot = dict(model.get("potential", {"kind": "zero"}))
        if args.potential is not None:
            pot["kind"] = args.potential
        for k in ("sigma", "p", "dist"):
            if getattr(args, k) is not None:
                pot[k] = getattr(args, k)
        model["potential"] = pot
    for key, val in vars(args).items():
        if key in _SKIP or val is None:
            continue
        if isinstance(val, complex):
            val = [val.real, val.imag]
        cfg[key] = val
    if "threads" not in cfg and os.environ.get(THREADS_ENV):
        try:
            cfg["threads"] = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    return cfg


# ---------------------------------------------------------------- runners


def _model(cfg) -> OperatorModel:
    try:
        return OperatorModel.from_dict(cfg["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


def _seed(cfg) -> int:
    return int(cfg.get("seed", cfg.get("model", {}).get("seed", 0)))


def _out(cfg) -> Path:
    return Path(cfg.get("out", "."))


def _emit_csv(cfg, name, header, rows, *, x_col=0, plot_cols=None, title="", logy=False):
    out = _out(cfg)
    rows = [list(r) for r in rows]
    path = _io.write_csv(out / f"{name}.csv", header, rows)
    print(f"wrote {path}")
    if cfg.get("plot"):
        arr = np.array([[float(v) for v in r] for r in rows]) if rows else np.zeros((0, len(header)))
        cols = plot_cols or [i for i in range(len(header)) if i != x_col]
        series = {header[i]: arr[:, i] for i in cols}
        svg = _io.write_svg_plot(out / f"{name}.svg", arr[:, x_col], series, xlabel=header[x_col],
                                 title=title or name, logy=logy)
        print(f"wrote {svg}")


def _emit_json(cfg, name, obj):
    path = _io.write_json(_out(cfg) / f"{name}.json", obj)
    print(f"wrote {path}")


def _fmt_intervals(ivs) -> str:
    return " ∪ ".join(f"({a:g}, {b:g})" for a, b in ivs) if ivs else "∅"


def run_bands(cfg) -> int:
    model = _model(cfg)
    bs = band_structure(model)
    print(f"Σ = {_fmt_intervals(bs.sigma)}, Σ₀ = {_fmt_intervals([bs.sigma0] if bs.sigma0 else [])}")
    if "out" in cfg:
        _emit_json(cfg, "bands", bs.to_dict())
    return 0


def run_density(cfg) -> int:
    model = _model(cfg)
    g = cfg["grid"]
    grid = np.linspace(g["a"], g["b"], g["count"])
    n = cfg["depth"]
    x = [_complex_json(v) for v in cfg.get("x", [1.0] + [0.0] * (model.l - 1))]
    if len(x) != model.l:
        raise ConfigError(f"root vector has length {len(x)}, model width is {model.l}")
    oracle_N = cfg.get("oracle_N")
    sites = max(n, oracle_N or 0) + 1
    sample = sample_potential(model, sites, _seed(cfg))
    est = density_estimate(model, sample, x, grid, n, method=cfg.get("method", "qr"))
    header, cols = ["lambda", "f_n"], [grid, est.values]
    if oracle_N:
        orc = truncation_spectral_oracle(model, sample, oracle_N, x, cfg.get("eta"), grid=grid)
        header.append("g_eta")
        cols.append(orc.values)
    if np.any(est.flags):
        header.append("flag")
        cols.append(est.flags.astype(int))
    print(f"integral of f_n over [{g['a']:g}, {g['b']:g}] = {est.integral():.10g}")
    _emit_csv(cfg, "density", header, zip(*cols), title=f"density, depth {n}")
    return 0


def run_schur_stats(cfg) -> int:
    model = _model(cfg)
    a, b = cfg["window"]
    z = _complex_json(cfg["z"])
    N = cfg["N"]
    m = cfg.get("m", 0)
    window = spectral_gap(model, a, b)
    sample = sample_potential(model, N, _seed(cfg))
    hat, m_star = truncate_potential(sample, window)
    split = channel_split(model, z, window=window)
    run = schur_run(model, hat, m, N - 1, None, split)
    rows = []
    for st in run.trajectory[1:]:
        rows.append([st.n, float(opnorm(st.X)), float(opnorm(st.Z)), float(st.Dinv_norm_bound),
                     float(opnorm(st.DinvC))])
    print(f"m* = {m_star}, gap = {window.gap:.6g}, CQ = {window.CQ:.6g}, certificate = {float(run.certificate):.3e}")
    _emit_csv(cfg, "schur_stats", ["n", "norm_X", "norm_Z", "Dinv_norm_bound", "norm_DinvC"], rows,
              title="Schur recursion", logy=False)
    return 0


def run_rank_scan(cfg) -> int:
    model = _model(cfg)
    a, b = cfg["interval"]
    sample = sample_potential(model, cfg["N"], _seed(cfg))
    window = spectral_gap(model, a, b)
    m = cfg["m"]
    grid, smin = rank_scan(model, sample, m, a, b, cfg["points"], window=window)
    cands = find_rank_deficiencies(model, sample, m, a, b, cfg["points"], window=window)
    _emit_csv(cfg, "rank_scan", ["lambda", "smin"], zip(grid, smin), plot_cols=[1],
              title="smallest singular value", logy=True)
    _emit_json(cfg, "rank_candidates", {"candidates": cands, "m": m, "window": window.to_dict()})
    print(f"candidates: {cands}")
    return 0


def run_verify(cfg) -> int:
    l, depth, samples = cfg["l"], cfg["depth"], cfg["samples"]
    z = _complex_json(cfg["z"])
    tol = cfg.get("tolerance", 1e-8)
    rng = np.random.default_rng(np.random.SeedSequence(_seed(cfg)))
    worst = 0.0
    rows = []
    for i in range(samples):
        alpha = np.sort(rng.uniform(-3, 3, l))
        model = OperatorModel.from_dict({"alpha": list(alpha), "potential": {"kind": "hermitian-gaussian", "sigma": 1.0}})
        sample = sample_potential(model, depth + 1, int(rng.integers(0, 2**63)))
        direct = transfer_product(model, sample, 0, depth, z)
        via = transfer_from_boundary(boundary_data(model, sample, 0, depth, z))
        diff = direct.entries - math.exp(via.log_scale - direct.log_scale) * via.entries
        err = float(np.linalg.norm(diff, 2) / np.linalg.norm(direct.entries, 2))
        worst = max(worst, err)
        rows.append([i, err])
    print(f"max relative error: {worst:.3e}")
    if "out" in cfg:
        _emit_json(cfg, "verify", {"max_relative_error": worst, "tolerance": tol, "pass": worst <= tol,
                                   "samples": samples, "l": l, "depth": depth, "z": [z.real, z.imag]})
    return 0 if worst <= tol else 1


def run_mc(cfg) -> int:
    model = _model(cfg)
    seed = _seed(cfg)
    econf = EnsembleConfig(
        model=model, num_samples=cfg["num_samples"], N=cfg["N"], m=cfg.get("m", 0),
        lambdas=tuple(cfg["lambdas"]), eta=cfg.get("eta", 0.0), master_seed=seed,
        window=tuple(cfg["window"]) if "window" in cfg else None,
        chunk_size=cfg.get("chunk_size", 250), threads=cfg.get("threads", 1),
        plateau=tuple(cfg["plateau"]) if "plateau" in cfg else None,
    )
    result = ensemble_run(econf)
    doc = result.report.to_dict()
    doc.update({"window": result.window.to_dict(), "failures": result.failures,
                "trajectories": result.trajectories, "model": model.to_dict(seed)})
    _emit_json(cfg, "mc_report", doc)
    rows = list(result.csv_rows())
    _emit_csv(cfg, "mc_per_n", rows[0], rows[1:], plot_cols=[1, 3], title="E|X_n|^4")
    for r in result.report.records:
        print(f"{r.name}: empirical {r.empirical:.6g} vs bound {r.theoretical_bound:.6g} -> {'pass' if r.passed else 'FAIL'}")
    return 0 if result.report.passed else 1


def run_fold(cfg) -> int:
    A = _matrix_from_json(cfg["A_full"])
    pots = [_matrix_from_json(M) for M in cfg["potentials"]]
    try:
        model, sample = fold_full_line(A, pots)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    N = sample.N - 1
    l = A.shape[0]
    full = np.zeros(((2 * N + 2) * l,) * 2, dtype=complex)
    for i, V in enumerate(pots):
        full[i * l:(i + 1) * l, i * l:(i + 1) * l] = A + V
    idx = np.arange((2 * N + 1) * l)
    full[idx, idx + l] = -1
    full[idx + l, idx] = -1
    gap = float(np.max(np.abs(np.linalg.eigvalsh(restrict(model, sample, 0, N)) - np.linalg.eigvalsh(full))))
    print(f"folded width {model.l}, sites {sample.N}; max eigenvalue difference {gap:.3e}")
    out = _out(cfg)
    _emit_json(cfg, "fold_model", model.to_dict())
    path = _io.atomic_write_text(out / "fold_sample.csv", sample.to_csv())
    print(f"wrote {path}")
    return 0


RUNNERS = {
    "bands": run_bands, "density": run_density, "schur-stats": run_schur_stats, "rank-scan": run_rank_scan,
    "verify": run_verify, "mc": run_mc, "fold": run_fold,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_signed(list(sys.argv[1:] if argv is None else argv)))
    try:
        cfg = assemble_config(args)
        validate_config(cfg)
        return RUNNERS[cfg["subcommand"]](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``splashmhd {run,check,norms} CONFIG``.

Scenarios are YAML files with the sections ``domain``, ``conformal``,
``initial``, ``discretization``, ``norms``, ``experiment`` and ``outputs``
(see ``ScenarioConfig`` for keys and defaults). Exit status is 0 on
success, 2 on invalid input and 3 when a solver fails.

``SPLASHMHD_THREADS`` sets the number of family members run concurrently.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .conformal import ConformalMap, jacobian_at, jacobian_inverse_at, map_curve, q_squared_at
from .errors import MissingCheckpoint, SolverError, SplashError, ValidationError
from .geometry import arclength_normalize, read_curve
from .initdata import FourierProfile, PolynomialStream
from .mesh_fields import BealeNormConfig
from .picard import (PicardConfig, ball_radius, energy_parts, load_checkpoints,
                     quadruple_norms, run_picard, state_difference)
from .splash_experiment import SplashScenario, aimed_scenario, build_base, fig3_wedge, run_family

log = logging.getLogger("splashmhd")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
THREADS_ENV = "SPLASHMHD_THREADS"


# --- configuration ------------------------------------------------------------------

@dataclass
class DomainConfig:
    preset: str | None = "fig3_wedge"
    file: str | None = None
    plane: str = "reference"        # or "physical": mapped through sqrt(z - alpha)
    scale: float = 3.0
    n_nodes: int = 400


@dataclass
class ConformalConfig:
    alpha: list = field(default_factory=lambda: [0.0, 0.0])
    branch_cut: list | None = None   # [[x, y], ...] starting at alpha


@dataclass
class InitialConfig:
    amplitude: float = 1.0
    psi0: dict | None = None        # {"a": [...], "b": [...], "slope": 0.0}
    lambda_max: float | None = None
    bump_width: float | None = None
    arc_halfwidth: float | None = None
    h0_stream: list | None = None   # [[i, j, c], ...]; [] for a zero field


@dataclass
class DiscretizationConfig:
    h_target: float | None = None
    dt: float = 0.005
    slab: float = 0.05
    tol: float = 1e-8
    max_iter: int = 15
    norm: str = "beale"


@dataclass
class NormsConfig:
    s: float = 2.25
    gamma: float = 1.1
    n_time_modes: int = 64
    n_space_modes: int = 200


@dataclass
class ExperimentConfig:
    b: list | None = None
    epsilons: list = field(default_factory=lambda: [1e-2, 5e-3, 2.5e-3])
    t_bar: float = 0.1
    delta_splash: float | None = 0.01


@dataclass
class OutputsConfig:
    directory: str = "splash_out"
    cadence: int = 1
    checkpoints: bool = False


SECTIONS = {"domain": DomainConfig, "conformal": ConformalConfig, "initial": InitialConfig,
            "discretization": DiscretizationConfig, "norms": NormsConfig,
            "experiment": ExperimentConfig, "outputs": OutputsConfig}


@dataclass
class ScenarioConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    norms: NormsConfig = field(default_factory=NormsConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    outputs: OutputsConfig = field(default_factory=OutputsConfig)
    base_dir: str = field(default=".", repr=False, compare=False)

    def validate(self) -> "ScenarioConfig":
        """Range checks; raises :class:`ValidationError` naming the bad key."""
        n, d, e, dom = self.norms, self.discretization, self.experiment, self.domain
        if not 2.0 < n.s < 2.5:
            raise ValidationError(f"norms.s={n.s}: Sobolev index must satisfy 2 < s < 5/2")
        if not 1.0 < n.gamma < n.s - 1.0:
            raise ValidationError(f"norms.gamma={n.gamma}: must satisfy 1 < gamma < s - 1")
        if n.n_time_modes < 1 or n.n_space_modes < 1:
            raise ValidationError("norms: mode counts must be positive")
        if d.h_target is not None and d.h_target <= 0:
            raise ValidationError("discretization.h_target must be positive")
        if d.dt <= 0 or d.slab <= 0:
            raise ValidationError("discretization.dt and discretization.slab must be positive")
        if round(d.slab / d.dt) < 3:
            raise ValidationError("discretization: slab must hold at least 3 steps of dt")
        if d.tol <= 0 or d.max_iter < 1:
            raise ValidationError("discretization: tol must be positive and max_iter >= 1")
        if d.norm not in ("beale", "l2h1"):
            raise ValidationError(f"discretization.norm={d.norm!r}: expected 'beale' or 'l2h1'")
        if not e.epsilons or any(x <= 0 for x in e.epsilons):
            raise ValidationError("experiment.epsilons must be a nonempty list of positive numbers")
        if e.t_bar <= 0:
            raise ValidationError("experiment.t_bar must be positive")
        if e.delta_splash is not None and e.delta_splash <= 0:
            raise ValidationError("experiment.delta_splash must be positive")
        if (dom.preset is None) == (dom.file is None):
            raise ValidationError("domain: give exactly one of preset or file")
        if dom.preset is not None and dom.preset != "fig3_wedge":
            raise ValidationError(f"domain.preset={dom.preset!r}: only 'fig3_wedge' is available")
        if dom.plane not in ("reference", "physical"):
            raise ValidationError("domain.plane must be 'reference' or 'physical'")
        if dom.file is not None and e.b is None:
            raise ValidationError("experiment.b is required for a file domain")
        if dom.scale <= 0 or dom.n_nodes < 16:
            raise ValidationError("domain.scale must be positive and n_nodes >= 16")
        if self.outputs.cadence < 1:
            raise ValidationError("outputs.cadence must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @property
    def n_steps(self) -> int:
        return int(round(self.discretization.slab / self.discretization.dt))

    def picard_config(self) -> PicardConfig:
        d, n = self.discretization, self.norms
        return PicardConfig(T=d.slab, n_steps=self.n_steps, tol=d.tol, max_iter=d.max_iter,
                            norm=d.norm, norms=self.beale_config(),
                            compute_ball=d.norm == "beale")

    def beale_config(self) -> BealeNormConfig:
        n = self.norms
        return BealeNormConfig(T=self.discretization.slab, s=n.s, gamma=n.gamma,
                               n_time_modes=n.n_time_modes, n_space_modes=n.n_space_modes)


def config_from_dict(data: dict | None, base_dir=".") -> ScenarioConfig:
    """Build a :class:`ScenarioConfig`; unknown sections or keys are errors."""
    data = data or {}
    if not isinstance(data, dict):
        raise ValidationError("config must be a mapping of sections")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        sec = data.get(name) or {}
        if not isinstance(sec, dict):
            raise ValidationError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in fields(cls)}
        bad = set(sec) - allowed
        if bad:
            raise ValidationError(f"unknown keys in {name}: {sorted(bad)}")
        try:
            parts[name] = cls(**sec)
        except TypeError as exc:
            raise ValidationError(f"section {name}: {exc}") from exc
    cfg = ScenarioConfig(**parts, base_dir=str(base_dir))
    _coerce(cfg)
    return cfg.validate()


def _coerce(cfg: ScenarioConfig) -> None:
    def num(sec, key, kind=float, optional=False):
        v = getattr(sec, key)
        if v is None and optional:
            return
        try:
            setattr(sec, key, kind(v))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{key}={v!r} is not a number") from exc

    d, n, e, i, dom = cfg.discretization, cfg.norms, cfg.experiment, cfg.initial, cfg.domain
    for k in ("dt", "slab", "tol"):
        num(d, k)
    num(d, "h_target", optional=True)
    num(d, "max_iter", int)
    for k in ("s", "gamma"):
        num(n, k)
    num(n, "n_time_modes", int)
    num(n, "n_space_modes", int)
    num(e, "t_bar")
    num(e, "delta_splash", optional=True)
    try:
        e.epsilons = [float(x) for x in e.epsilons]
    except (TypeError, ValueError) as exc:
        raise ValidationError("experiment.epsilons must be numbers") from exc
    num(i, "amplitude")
    for k in ("lambda_max", "bump_width", "arc_halfwidth"):
        num(i, k, optional=True)
    num(dom, "scale")
    num(dom, "n_nodes", int)
    num(cfg.outputs, "cadence", int)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data, path.parent)


# --- scenario from config -------------------------------------------------------------

def build_cmap(cfg: ScenarioConfig, scale: float) -> ConformalMap:
    c = cfg.conformal
    alpha = complex(*c.alpha)
    cut = tuple(complex(*p) for p in c.branch_cut) if c.branch_cut else ()
    try:
        return ConformalMap(alpha, cut, scale=scale)
    except ValueError as exc:
        raise ValidationError(f"conformal: {exc}") from exc


def build_scenario(cfg: ScenarioConfig) -> SplashScenario:
    i, e, dom = cfg.initial, cfg.experiment, cfg.domain
    hs = None if i.h0_stream is None else PolynomialStream(
        tuple((int(a), int(b), float(c)) for a, b, c in i.h0_stream))
    kw = dict(epsilons=tuple(e.epsilons), t_bar=e.t_bar, delta_splash=e.delta_splash,
              h_target=cfg.discretization.h_target, lambda_max=i.lambda_max,
              bump_width=i.bump_width, arc_halfwidth=i.arc_halfwidth, h_stream=hs)
    if dom.preset is not None:
        sc = fig3_wedge(scale=dom.scale, amplitude=i.amplitude, cmap=build_cmap(cfg, 2.5 * dom.scale ** 2),
                        **kw)
    else:
        p = Path(dom.file)
        if not p.is_absolute():
            p = Path(cfg.base_dir) / p
        try:
            raw = read_curve(p)
        except OSError as exc:
            raise ValidationError(f"cannot read domain file {p}: {exc}") from exc
        diam = float(np.ptp(raw.nodes, axis=0).max())
        cmap = build_cmap(cfg, diam ** (2 if dom.plane == "reference" else 1))
        if dom.plane == "physical":
            curve = map_curve(cmap, raw, "forward", dom.n_nodes)
        else:
            curve = arclength_normalize(raw, dom.n_nodes)
        sc = aimed_scenario(curve, cmap, np.asarray(e.b, dtype=float), dom.scale, i.amplitude, **kw)
    if i.psi0 is not None:
        L = sc.psi0.L
        sc.psi0 = FourierProfile(L, tuple(i.psi0.get("a", (0.0,))), tuple(i.psi0.get("b", ())),
                                 float(i.psi0.get("slope", 0.0)))
    return sc


# --- output helpers ------------------------------------------------------------------------

def _f(x) -> str:
    """Shortest round-trip text of a float."""
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_f(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _thin(times_curves, k: int):
    times, curves = times_curves
    keep = [j for j in range(len(times)) if j % k == 0 or j == len(times) - 1]
    return [times[j] for j in keep], [curves[j] for j in keep]


def _workers() -> int:
    v = os.environ.get(THREADS_ENV)
    if not v:
        return 1
    try:
        return max(1, int(v))
    except ValueError:
        raise ValidationError(f"{THREADS_ENV}={v!r} is not an integer")


# --- commands ----------------------------------------------------------------------------

def cmd_run(config_path, out_dir=None) -> int:
    """Run the shifted family and write report, curve and distance artifacts."""
    cfg = load_config(config_path)
    sc = build_scenario(cfg)
    out = Path(out_dir or cfg.outputs.directory)
    if not out.is_absolute() and out_dir is None:
        out = Path(cfg.base_dir) / out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    report, runs = run_family(sc, cfg.picard_config(), workers=_workers(), keep_runs=True)
    report.to_json(out / "report.json")
    k = cfg.outputs.cadence
    rows_d = []
    for e in sorted(report.per_epsilon):
        m = report.per_epsilon[e]
        for j, (t, d) in enumerate(zip(m.times, m.min_distance)):
            if j % k == 0 or j == len(m.times) - 1:
                ra, rb = m.witnesses[j]
                rows_d.append([float(e), float(t), float(d), float(ra), float(rb)])
    _write_csv(out / "distances.csv", ["eps", "t", "min_arc_distance", "r_a", "r_b"], rows_d)
    rows_n = []
    for e in sorted(runs):
        run = runs[e]
        kin, mag = energy_parts(run.base_mesh, sc.cmap, run.X, run.v, run.G)
        for j, t in enumerate(run.times):
            if j % k == 0 or j == len(run.times) - 1:
                rows_n.append([float(e), float(t), float(kin[j] + mag[j]), float(kin[j]),
                               float(mag[j])])
    _write_csv(out / "norms.csv", ["eps", "t", "energy", "kinetic", "magnetic"], rows_n)
    full = report.curves
    report.curves = {e: _thin(tc, k) for e, tc in full.items()}
    report.write_curves_csv(out)
    report.curves = full
    _write_csv(out / "stability.csv", ["eps", "flux_diff", "hausdorff", "flux_ratio",
                                       "hausdorff_ratio"],
               [[r["eps"], r["flux_diff"], r["hausdorff"], r["flux_ratio"], r["hausdorff_ratio"]]
                for r in report.stability])
    failed = [e for e, m in report.per_epsilon.items() if m.error]
    for e in sorted(report.per_epsilon):
        m = report.per_epsilon[e]
        status = m.error or (f"t*={_f(m.t_star)}" if m.t_star is not None else "no splash by t_bar")
        print(f"eps={e!r}: {status}")
    if cfg.outputs.checkpoints:
        st_dir = out / "checkpoints"
        run_picard(None, sc.cmap, config=cfg.picard_config(),
                   reference=build_base(sc).reference, checkpoint_dir=st_dir)
    if len(failed) == len(report.per_epsilon):
        print("all family members failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _conformal_suite(cmap: ConformalMap, pts: np.ndarray) -> list:
    J = jacobian_at(cmap, pts)
    Ji = jacobian_inverse_at(cmap, pts)
    Q2 = q_squared_at(cmap, pts)
    cr = float(np.max(np.abs(J[..., 0, 0] - J[..., 1, 1]) + np.abs(J[..., 0, 1] + J[..., 1, 0])))
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    q2 = float(np.max(np.abs(Q2 - det) / np.maximum(Q2, 1e-300)))
    inv = float(np.max(np.abs(J @ Ji - np.eye(2))))
    return [("Cauchy-Riemann structure of J", cr, 1e-12), ("Q2 = det J", q2, 1e-12),
            ("J J^{-1} = I", inv, 1e-12)]


def cmd_check(config_path) -> int:
    """Dry run: geometry, conformal identities, initial data and compatibility."""
    cfg = load_config(config_path)
    ok = True

    def line(name, passed, detail=""):
        nonlocal ok
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'} {name}{': ' + detail if detail else ''}")

    try:
        sc = build_scenario(cfg)
    except SplashError as exc:
        line("scenario construction", False, f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    try:
        sc.check()
        line("scenario invariants (seed contact, simple shifted images)", True)
    except ValidationError as exc:
        line("scenario invariants", False, str(exc))
    pts = sc.base_tilde_domain.nodes
    for name, val, tol in _conformal_suite(sc.cmap, pts):
        line(name, val < tol, f"{val:.3e} (tol {tol:g})")
    try:
        base = build_base(sc)
    except SplashError as exc:
        line("initial data", False, f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    line("mesh", True, f"{base.mesh.n_nodes} P2 nodes, min angle {base.mesh.min_angle():.1f} deg")
    for name, val, passed in base.compatibility.lines():
        line(name, passed, f"{val:.3e}")
    mn = base.compatibility.min_normal_velocity_arcs
    line("u0.n > 0 on the aimed arcs", mn > 0, f"min {mn:.4g}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_norms(checkpoint_dir, config_path=None, out=None) -> int:
    """Per-iteration quadruple norms and the ball radius from checkpoints."""
    cfg = load_config(config_path) if config_path else ScenarioConfig().validate()
    ref, states = load_checkpoints(checkpoint_dir)
    pc = PicardConfig(T=states[0].T, n_steps=max(3, states[0].n_steps), norm="beale",
                      norms=cfg.beale_config())
    N = ball_radius(ref, pc)["N"]
    rows = []
    prev = None
    for k, st in enumerate(states):
        nrm = quadruple_norms(st, pc)
        diff = "" if prev is None else float(sum(quadruple_norms(state_difference(st, prev), pc).values()))
        rows.append([k, nrm["w"], nrm["q_w"], nrm["X"], nrm["G"], diff, N])
        prev = st
    header = ["iteration", "w_K", "q_Kpr", "X_A", "G_A", "diff_total", "ball_N"]
    path = Path(out) if out else Path(checkpoint_dir) / "norms.csv"
    _write_csv(path, header, rows)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splashmhd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the shifted family")
    r.add_argument("config")
    r.add_argument("-o", "--out", help="output directory (overrides outputs.directory)")
    c = sub.add_parser("check", help="validate a scenario without time stepping")
    c.add_argument("config")
    n = sub.add_parser("norms", help="norms of stored Picard iterates")
    n.add_argument("checkpoints")
    n.add_argument("--config")
    n.add_argument("-o", "--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "check":
            return cmd_check(args.config)
        return cmd_norms(args.checkpoints, args.config, args.out)
    except (ValidationError, MissingCheckpoint) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

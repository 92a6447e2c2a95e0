"""Experiment runner: configuration, the x_inf pipeline and subcommands.

Configuration is a sectioned INI file.  Every key has a typed default in
``DEFAULTS``; unknown sections or keys are rejected.  The ``[meta]`` section
carries the format version.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.
Log verbosity is read from ``KPPLAB_LOG`` (a ``logging`` level name).
"""
from __future__ import annotations

import argparse
import configparser
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import barriers, bbm, kpp_solver, self_similar, wave_profile
from .kpp_solver import PreAsymptoticError
from .outputs import checkpoint, emit_outputs, json_text

log = logging.getLogger("kpplab")

CONFIG_VERSION = "1"

DEFAULTS: dict[str, dict] = {
    "wave": {"half_width": 25.0, "n": 2000, "tol": 1e-8, "normalization": "offset"},
    "evolve": {"data": "step", "x1": 0.0, "x2": 1.0, "t_end": 2000.0, "dx": 0.1, "dt": 0.02,
               "level": 0.5, "t_first": 10.0, "n_checkpoints": 40, "fit_tol": 0.05,
               "frame": "moving"},
    "selfsim": {"tau_end": 5.0, "d_eta": 0.0025, "dtau": 0.01, "bump_width": 1.0},
    "barrier": {"gamma": 0.2, "C_gamma": 1.0, "lam": 0.05, "epsilon": 0.05,
                "super_gamma": 0.25, "A": 10.0, "t_min": 1e3, "t_max": 1e5},
    "bbm": {"t_end": 8.0, "replicates": 10000, "seed": 0, "checkpoints": "4,5,6,7,8",
            "diffusion": 0.5, "track_z": True, "pde_dx": 0.02, "pde_dt": 0.005},
    "output": {"dir": "kpplab-out"},
}

# sections that do not change any numerical result
_UNHASHED = ("output",)


class ConfigError(ValueError):
    """Invalid configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


NUMERICAL_ERRORS = (wave_profile.WaveSolveError, wave_profile.TailFitError, kpp_solver.DomainError,
                    kpp_solver.StepUnderflowError, kpp_solver.LevelError, PreAsymptoticError,
                    barriers.InfeasibleError, barriers.DominationError, bbm.ParticleCapError,
                    FloatingPointError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# configuration

def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            x = float(raw)
            if not math.isfinite(x):
                raise ValueError(raw)
            return x
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from None


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``section.key=value`` strings."""
    for pair in pairs or ():
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        lhs, raw = pair.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    return cfg


def load_config(path=None, overrides=None) -> dict:
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        version = parser.get("meta", "version", fallback=None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"{path}: config version {version!r} not recognized (expected {CONFIG_VERSION!r})")
        for section in parser.sections():
            if section == "meta":
                extra = set(parser["meta"]) - {"version"}
                if extra:
                    raise ConfigError(f"unknown keys in [meta]: {sorted(extra)}")
                continue
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ev = cfg["evolve"]
    if ev["data"] not in ("step", "bump"):
        raise ConfigError(f"[evolve] data must be 'step' or 'bump', got {ev['data']!r}")
    if ev["frame"] not in kpp_solver.FRAMES:
        raise ConfigError(f"[evolve] frame must be one of {kpp_solver.FRAMES}")
    if not ev["t_end"] > 1.0:
        raise ConfigError("[evolve] t_end must exceed 1")
    if ev["dx"] <= 0 or ev["dt"] <= 0 or not 0 < ev["level"] < 1:
        raise ConfigError("[evolve] dx, dt must be positive and level in (0, 1)")
    if ev["n_checkpoints"] < 2:
        raise ConfigError("[evolve] n_checkpoints must be at least 2")
    if cfg["wave"]["normalization"] not in wave_profile.NORMALIZATIONS:
        raise ConfigError(f"[wave] normalization must be one of {wave_profile.NORMALIZATIONS}")
    try:
        # canonical spelling, so equivalent lists hash alike
        cfg["bbm"]["checkpoints"] = ",".join(repr(t) for t in bbm_checkpoints(cfg))
    except ValueError as exc:
        raise ConfigError(f"[bbm] checkpoints: {exc}") from None
    if cfg["bbm"]["replicates"] < 1:
        raise ConfigError("[bbm] replicates must be at least 1")
    out = Path(cfg["output"]["dir"])
    probe = out if out.exists() else next((p for p in out.parents if p.exists()), Path("."))
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")


def bbm_checkpoints(cfg: dict) -> tuple:
    ts = tuple(float(s) for s in str(cfg["bbm"]["checkpoints"]).split(",") if s.strip())
    t_end = cfg["bbm"]["t_end"]
    if any(t < 0 or t > t_end for t in ts):
        raise ValueError(f"checkpoints must lie in [0, {t_end}]")
    return ts if ts else (t_end,)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of every numerically meaningful setting."""
    meaningful = {s: v for s, v in cfg.items() if s not in _UNHASHED}
    text = json.dumps(meaningful, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineReport:
    x_inf_front: Optional[float]
    x_inf_alpha: float
    difference: Optional[float]
    c1_fit: Optional[float]
    alpha_moment: float
    alpha_fit: Optional[float]
    t_end: float
    flags: list = field(default_factory=list)
    runtimes: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _checkpoint_times(ev: dict) -> np.ndarray:
    t_end = ev["t_end"]
    t_first = min(ev["t_first"], 1.0 + 0.5 * (t_end - 1.0))
    ts = np.round(np.geomspace(t_first, t_end, ev["n_checkpoints"]), 6)
    ts[-1] = t_end
    return np.unique(ts)


def _initial_field(ev: dict, frame: str, follow: bool = False) -> kpp_solver.Field:
    grid = kpp_solver.default_grid(frame, ev["t_end"], dx=ev["dx"], follow=follow)
    spec = ("step", ev["x1"]) if ev["data"] == "step" else ("bump", ev["x1"], ev["x2"])
    return kpp_solver.init_data(spec, grid, frame=frame)


class _Stages:
    def __init__(self):
        self.runtimes = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            return fn(*args, **kw)
        except PreAsymptoticError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.runtimes[name] = time.perf_counter() - t0


def run_pipeline(cfg: dict, out_dir=None) -> PipelineReport:
    """Wave, moving-frame evolution, front fit, self-similar amplitude, report."""
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    st = _Stages()
    ev = cfg["evolve"]
    w = cfg["wave"]
    flags = []

    profile = st.run("wave", wave_profile.solve_wave, half_width=w["half_width"], n=w["n"],
                     tol=w["tol"], normalization=w["normalization"])
    emit_outputs(profile, "csv", out / "profile.csv")
    emit_outputs(profile, "json", out / "profile.json")

    field0 = _initial_field(ev, "moving")
    times = _checkpoint_times(ev)
    alphas = []

    def snap(f):
        s = self_similar.transform_to_ss(f)
        alphas.append((f.t, self_similar.moment(s.eta_grid, s.w) / (2 * self_similar.SQRT_PI)))

    final = {}

    def evolve():
        trace = kpp_solver.record_trace(field0, ev["level"], times, kpp_solver.StepControl(dt=ev["dt"]),
                                        snapshot=lambda f: (snap(f), final.__setitem__("f", f)))
        return trace

    try:
        trace = st.run("evolve", evolve)
    finally:
        if "f" in final:
            checkpoint("save", final["f"], out / "field_final.csv")
    emit_outputs(trace, "csv", out / "trace.csv")

    est = None
    try:
        est = st.run("front_fit", kpp_solver.extract_xinf, trace, profile, tol=ev["fit_tol"],
                     t_min=ev["t_end"] / 10.5)
    except PreAsymptoticError as exc:
        flags.append("pre-asymptotic")
        log.warning("front fit: %s", exc)

    c1 = None
    lab = kpp_solver.FrontTrace(level=trace.level, t=trace.t, sigma=trace.sigma + kpp_solver.bramson_shift(trace.t),
                                frame="lab")
    try:
        c1, _ = st.run("log_fit", kpp_solver.fit_log_coefficient, lab, t_min=ev["t_end"] / 10.5)
    except PreAsymptoticError as exc:
        log.warning("log-coefficient fit: %s", exc)

    def amplitude():
        s = self_similar.transform_to_ss(final["f"])
        a_m = s.alpha_moment
        try:
            a_f = s.alpha_fit
        except ValueError:
            a_f = None
        return s, a_m, a_f

    state, a_m, a_f = st.run("selfsim", amplitude)
    emit_outputs(state, "csv", out / "selfsim.csv")
    hist = "t,alpha_moment\n" + "".join(f"{t!r},{a!r}\n" for t, a in alphas)
    (out / "alpha_history.csv").write_text(hist)

    x_alpha = -math.log(a_m)
    x_front = est.x_inf if est is not None else None
    report = PipelineReport(x_inf_front=x_front, x_inf_alpha=x_alpha,
                            difference=None if x_front is None else x_front - x_alpha,
                            c1_fit=c1, alpha_moment=a_m, alpha_fit=a_f, t_end=ev["t_end"], flags=flags,
                            runtimes=st.runtimes, config_hash=config_hash(cfg))
    emit_outputs(report, "json", out / "report.json")
    return report


# ---------------------------------------------------------------------------
# subcommands

def cmd_wave(cfg, out: Path) -> dict:
    w = cfg["wave"]
    prof = wave_profile.solve_wave(half_width=w["half_width"], n=w["n"], tol=w["tol"],
                                   normalization=w["normalization"])
    emit_outputs(prof, "csv", out / "profile.csv")
    emit_outputs(prof, "json", out / "profile.json")
    return {"k_tail": prof.k_tail, "omega_fit": prof.omega_fit, "residual_norm": prof.residual_norm,
            "amplitude": prof.amplitude}


def cmd_evolve(cfg, out: Path) -> dict:
    ev = cfg["evolve"]
    frame = ev["frame"]
    # in the lab frame the window follows the front, so it never outgrows the moving-frame size
    follow = 60.0 if frame == "lab" else None
    f0 = _initial_field(ev, frame, follow=follow is not None)
    final = {}
    trace = kpp_solver.record_trace(f0, ev["level"], _checkpoint_times(ev), kpp_solver.StepControl(dt=ev["dt"]),
                                    follow=follow, snapshot=lambda f: final.__setitem__("f", f))
    emit_outputs(trace, "csv", out / "trace.csv")
    checkpoint("save", final["f"], out / "field_final.csv")
    summary = {"t_end": ev["t_end"], "frame": frame, "sigma_final": float(trace.sigma[-1])}
    try:
        if frame == "lab":
            summary["c1_fit"] = kpp_solver.fit_log_coefficient(trace, t_min=ev["t_end"] / 10.5)[0]
        else:
            prof = wave_profile.solve_wave()
            summary["x_inf"] = kpp_solver.extract_xinf(trace, prof, tol=ev["fit_tol"],
                                                       t_min=ev["t_end"] / 10.5).x_inf
    except PreAsymptoticError as exc:
        summary["flags"] = ["pre-asymptotic"]
        log.warning("%s", exc)
    return summary


def cmd_selfsim(cfg, out: Path) -> dict:
    s = cfg["selfsim"]
    eta = self_similar.default_eta_grid(s["d_eta"])
    b = s["bump_width"]
    w0 = np.where((eta > 0) & (eta < b), np.sin(np.pi * np.clip(eta, 0, b) / b) ** 2, 0.0)
    state = self_similar.SelfSimilarState(tau=0.0, eta_grid=eta, w=w0)
    snaps = [state]
    final = self_similar.evolve_w(state, s["tau_end"], dtau=s["dtau"], snapshot=snaps.append)
    if snaps[-1].tau != final.tau:
        snaps.append(final)
    emit_outputs(snaps, "csv", out / "selfsim.csv")
    emit_outputs(final, "json", out / "selfsim.json")
    checkpoint("save", final, out / "selfsim_final.csv")
    return {"tau": final.tau, "alpha_moment": final.alpha_moment, "moment": final.moment}


def cmd_barrier(cfg, out: Path) -> dict:
    b = cfg["barrier"]
    sub = barriers.subsolution_build(b["gamma"], b["C_gamma"])
    rep_sub = barriers.verify_subsolution(sub)
    sup = barriers.SuperBarrierSpec(lam=b["lam"], gamma=b["super_gamma"], epsilon=b["epsilon"], A=b["A"])
    rep_sup = barriers.verify_supersolution(sup, t_range=(b["t_min"], b["t_max"]))
    emit_outputs(rep_sub, "json", out / "subsolution.json")
    emit_outputs(rep_sup, "json", out / "supersolution.json")
    # violation field on the verification grid, for plotting
    taus = np.linspace(sub.tau0, sub.tau0 + 30.0, 61)
    etas = np.linspace(0.2, 12.0, 60)
    T, E = np.meshgrid(taus, etas, indexing="ij")
    op = barriers.subsolution_operator(sub, T, E)
    rows = "".join(f"{t!r},{e!r},{v!r}\n" for t, e, v in zip(T.ravel(), E.ravel(), op.ravel()))
    (out / "subsolution_field.csv").write_text("tau,eta,operator\n" + rows)
    return {"subsolution": rep_sub.to_dict(), "supersolution": rep_sup.to_dict()}


def bbm_pde_tail(t_points, diffusion: float, dx: float, dt: float):
    """``P(M_t > x)`` from ``v_t = D v_xx + v - v^2``, ``v(0) = 1{x < 0}``; returns ``(x, [v(t)])``.

    The field clock starts at 1, so BBM time ``t`` is field time ``1 + t``.
    """
    t_max = max(t_points)
    right = 2.0 * math.sqrt(diffusion) * t_max + 20.0
    grid = kpp_solver.Grid.from_spacing(-20.0, right, dx)
    f = kpp_solver.init_data(("step", 0.0), grid, frame="lab", diffusion=diffusion)
    vals = []
    for t in sorted(t_points):
        if t > 0:
            f = kpp_solver.evolve(f, 1.0 + t, kpp_solver.StepControl(dt=dt))
        vals.append(f.values.copy())
    return grid.x, vals


def bbm_summary(ens: bbm.BBMEnsemble, pde_dx: float = 0.02, pde_dt: float = 0.005) -> dict:
    times = [float(t) for t in ens.times if t > 0]
    x, vals = bbm_pde_tail(times, ens.config.diffusion, pde_dx, pde_dt)
    sup = {}
    for t, v in zip(times, vals):
        p, _ = bbm.max_cdf(ens, t, x)
        sup[repr(t)] = float(np.max(np.abs(p - v)))
    c_fit = None
    if len(times) >= 4 and ens.max.shape[0] >= 200:
        c_fit = bbm.median_shift_fit(ens, times).c
    med = {repr(float(t)): float(np.median(ens.max[:, k])) for k, t in enumerate(ens.times)}
    return {"median_by_t": med, "c_fit": c_fit, "sup_distance_to_pde": sup}


def cmd_bbm(cfg, out: Path) -> dict:
    b = cfg["bbm"]
    conf = bbm.BBMConfig(t_end=b["t_end"], replicates=b["replicates"], seed=b["seed"],
                         diffusion=b["diffusion"], checkpoints=bbm_checkpoints(cfg), track_z=b["track_z"])
    ens = bbm.simulate(conf)
    emit_outputs(ens, "csv", out / "bbm.csv")
    summary = bbm_summary(ens, b["pde_dx"], b["pde_dt"])
    emit_outputs(summary, "json", out / "bbm.json")
    return summary


def cmd_xinfty(cfg, out: Path) -> dict:
    return run_pipeline(cfg, out).to_dict()


HELP = {"wave": "solve for the minimal-speed traveling wave",
        "evolve": "evolve step or bump data and record the front trace",
        "selfsim": "evolve the self-similar w-equation from compact data",
        "barrier": "build and verify the sub- and super-solution barriers",
        "bbm": "simulate branching Brownian motion and compare with the PDE",
        "xinfty": "run the full x_inf cross-check pipeline"}

COMMANDS = {"wave": cmd_wave, "evolve": cmd_evolve, "selfsim": cmd_selfsim, "barrier": cmd_barrier,
            "bbm": cmd_bbm, "xinfty": cmd_xinfty}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kpplab", description="Fisher-KPP front and Bramson-shift laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", type=Path, help="INI configuration file")
        sp.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int, help="BBM master seed (overrides [bbm] seed)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KPPLAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    if args.seed is not None:
        overrides.append(f"bbm.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        out = Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, out)
        sys.stdout.write(json_text(result))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4 if isinstance(exc.cause, OSError) else 3
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # parameter values rejected by a library precondition
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

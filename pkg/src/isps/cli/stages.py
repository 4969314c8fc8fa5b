"""Pipeline stages behind the CLI subcommands."""
from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path

import numpy as np

from .. import bounds as bnd
from ..backstep import GainConditionError, GainSelectionError, load_controller, save_controller, synthesize_gains, \
    transform
from ..cert import IspsCertificate, build_certificate, lyapunov_residual, residual_pass_fraction, verify_bound
from ..gpreg import FactorizationError, HyperparameterWarning, SeKernelParams, fit, fit_hyperparameters, \
    load_model, max_std_over_domain, read_dataset_csv, save_model, write_dataset_csv
from ..simkit import DataGenConfig, PiecewiseConstant, SimConfig, SimulationError, generate_dataset, \
    simulate_pair, write_trajectory_csv
from .config import RunConfig, digest
from .manifest import STAGES, RunManifest
from .svgplot import Series, line_plot

log = logging.getLogger("isps")


class StageError(RuntimeError):
    exit_code = 2


class MissingStageError(StageError):
    exit_code = 1

    def __init__(self, stage: str, missing: list[str]):
        super().__init__(f"{stage} needs completed stage(s) {', '.join(missing)}; run them first "
                         f"(order: {' -> '.join(STAGES)})")
        self.missing = missing


class NumericalFailure(StageError):
    exit_code = 2


class BoundViolation(StageError):
    exit_code = 3


NUMERICAL = (FactorizationError, bnd.RadicandError, GainSelectionError, GainConditionError, SimulationError,
             np.linalg.LinAlgError, FloatingPointError)


def _require(man: RunManifest, stage: str, needs) -> None:
    missing = man.missing(needs)
    if missing:
        raise MissingStageError(stage, missing)


def _truths(cfg: RunConfig):
    return [lambda p, i=i: cfg.system.drift(i, p) for i in range(1, cfg.system.h + 1)]


def _sub_box(cfg: RunConfig, i: int):
    return cfg.system.domain.sub(i * cfg.system.n)


# --- generate-data -----------------------------------------------------------

def generate_data(cfg: RunConfig, man: RunManifest, force: bool = False) -> dict:
    key = digest([cfg.hash_of("plant", "domain", "data", "seed")])
    if not force and man.is_current("generate-data", key):
        man.note_cached("generate-data", key)
        return man.stage("generate-data")["results"]
    d = cfg.section("data")
    dgc = DataGenConfig(d["samples"], d["noise_std"], d.get("derivative_mode", "exact"),
                        d.get("sampling_time", 1e-4), cfg.seed)
    folder = man.out_dir / "data"
    folder.mkdir(parents=True, exist_ok=True)
    files, rows = [], []
    for i in range(1, cfg.system.h + 1):
        ds = generate_dataset(cfg.system, i, dgc)
        path = folder / f"subsystem_{i}.csv"
        write_dataset_csv(ds, path)
        files.append(path)
        rows.append(ds.size)
    results = {"seed": cfg.seed, "rows": rows, "noise_std": dgc.noise_std}
    man.record("generate-data", key, files, results)
    return results


# --- train -------------------------------------------------------------------

def train(cfg: RunConfig, man: RunManifest, force: bool = False) -> dict:
    _require(man, "train", ["generate-data"])
    key = digest([man.output_hash("generate-data"), cfg.hash_of("gp")])
    if not force and man.is_current("train", key):
        man.note_cached("train", key)
        return man.stage("train")["results"]
    noise = man.stage("generate-data")["results"]["noise_std"]
    grid = cfg.section("gp").get("rho_grid", 25)
    folder = man.out_dir / "models"
    folder.mkdir(parents=True, exist_ok=True)
    files, per = [], []
    for i, spec in enumerate(cfg.subsystems, start=1):
        src = man.out_dir / "data" / f"subsystem_{i}.csv"
        if not src.exists():
            raise MissingStageError("train", ["generate-data"])
        ds = read_dataset_csv(src, noise)
        inits = [SeKernelParams.from_dict(k) for k in spec.kernels]
        if len(inits) == 1:
            inits = inits * ds.output_dim
        converged = True
        if spec.mode == "fit":
            kernels = []
            for j, init in enumerate(inits):
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", HyperparameterWarning)
                    kernels.append(fit_hyperparameters(ds, init, output=j, n_starts=spec.n_starts,
                                                       log_bounds=spec.log_bounds))
                if any(issubclass(w.category, HyperparameterWarning) for w in caught):
                    converged = False
        else:
            kernels = inits
        try:
            model = fit(ds, kernels)
        except FactorizationError as exc:
            raise NumericalFailure(f"subsystem {i}: {exc}") from exc
        box = _sub_box(cfg, i)
        rho, rho_norm = max_std_over_domain(model, box.lo, box.hi, grid)
        path = folder / f"subsystem_{i}.json"
        save_model(model, path)
        files.append(path)
        per.append({"subsystem": i, "mode": spec.mode, "kernels": [k.to_dict() for k in kernels],
                    "optimizer_converged": converged, "rho_bar": rho.tolist(), "rho_bar_norm": rho_norm})
        log.info("subsystem %d: rho_bar = %.4g", i, rho_norm)
    results = {"subsystems": per}
    man.record("train", key, files, results)
    return results


def _load_models(cfg: RunConfig, man: RunManifest):
    return [load_model(man.out_dir / "models" / f"subsystem_{i}.json") for i in range(1, cfg.system.h + 1)]


# --- certify -----------------------------------------------------------------

def _holder_constants(cfg: RunConfig, models, det: dict) -> list[np.ndarray]:
    spec = det.get("holder", "estimate")
    out = []
    for i, m in enumerate(models, start=1):
        if spec == "estimate":
            L = bnd.estimate_holder_constant(_truths(cfg)[i - 1], _sub_box(cfg, i), det.get("holder_samples", 20000),
                                             seed=cfg.seed) * det.get("holder_safety", 1.5)
        else:
            L = np.full(m.output_dim, float(spec[i - 1]))
        out.append(np.asarray(L, dtype=float))
    return out


def _rkhs_bounds(cfg: RunConfig, models, holder, det: dict) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """B per output: the Hoelder-derived value, raised to the reproducing-property floor if needed."""
    out, floors = [], []
    for i, (m, Ls) in enumerate(zip(models, holder), start=1):
        sup = bnd.estimate_sup_norm(_truths(cfg)[i - 1], _sub_box(cfg, i), det.get("holder_samples", 20000),
                                    seed=cfg.seed)
        fl = np.array([bnd.rkhs_norm_floor(v, kp) for v, kp in zip(sup, m.kernels)])
        B = np.array([bnd.rkhs_bound_from_lipschitz(L, kp) for L, kp in zip(Ls, m.kernels)])
        out.append(np.maximum(B, fl))
        floors.append(fl)
    return out, floors


def certify(cfg: RunConfig, man: RunManifest, force: bool = False) -> dict:
    _require(man, "certify", ["generate-data", "train"])
    key = digest([man.output_hash("train"), cfg.hash_of("bounds", "controller", "seed")])
    if not force and man.is_current("certify", key):
        man.note_cached("certify", key)
        return man.stage("certify")["results"]
    sysm = cfg.system
    models = _load_models(cfg, man)
    rho = [s["rho_bar_norm"] for s in man.stage("train")["results"]["subsystems"]]
    bsec = cfg.section("bounds")
    samples = bsec.get("samples", 100000)
    conf = bsec.get("confidence", 1 - 1e-10)
    truths = _truths(cfg)
    made: dict[str, bnd.ErrorBound] = {}
    info: dict[str, dict] = {}
    det = bsec.get("deterministic")
    holder = None
    try:
        if det is not None or "epsilon" in bsec.get("probabilistic", {}):
            holder = _holder_constants(cfg, models, det or {})
        prob = bsec.get("probabilistic")
        if prob is not None:
            extra: dict = {}
            if "target_probability" in prob:
                eta, interval = bnd.calibrate_eta(models, truths, rho, sysm.domain, prob["target_probability"],
                                                  samples, conf, cfg.seed)
                made["probabilistic"] = bnd.ErrorBound(bnd.PROBABILISTIC, (eta,) * sysm.h, rho,
                                                       1.0 - interval.lower, interval, cfg.seed)
                extra["mode"] = "calibrated"
                extra["target_probability"] = prob["target_probability"]
            elif "thresholds" in prob:
                interval = bnd.estimate_joint_probability(models, truths, prob["thresholds"], sysm.domain, samples,
                                                          conf, cfg.seed)
                if interval.lower <= 0:
                    raise NumericalFailure("the configured thresholds hold with probability indistinguishable from 0")
                made["probabilistic"] = bnd.ErrorBound.from_thresholds(prob["thresholds"], rho,
                                                                       1.0 - interval.lower, interval, cfg.seed)
                extra["mode"] = "thresholds"
            else:
                B, _ = _rkhs_bounds(cfg, models, holder, det or {})
                etas = [bnd.probabilistic_eta(Bi, models[i].noise_std, [prob["gamma_info"][i]] * len(Bi),
                                              prob["epsilon"], sysm.n, sysm.h)[1] for i, Bi in enumerate(B)]
                made["probabilistic"] = bnd.ErrorBound(bnd.PROBABILISTIC, etas, rho, prob["epsilon"], None, cfg.seed)
                extra["mode"] = "closed-form"
            refs = []
            for ref in prob.get("reference", []):
                i = ref["subsystem"]
                iv = bnd.estimate_bound_probability(models[i - 1], truths[i - 1], ref["threshold"], _sub_box(cfg, i),
                                                    samples, conf, cfg.seed)
                refs.append({"label": ref.get("label", ""), "subsystem": i, "threshold": ref["threshold"],
                             "interval": iv.to_dict()})
            extra["reference"] = refs
            info["probabilistic"] = extra
        if det is not None:
            B, floors = _rkhs_bounds(cfg, models, holder, det)
            etas = []
            for i, (m, Bi) in enumerate(zip(models, B), start=1):
                try:
                    etas.append(bnd.deterministic_eta(m, Bi)[1])
                except bnd.RadicandError as exc:
                    raise NumericalFailure(f"subsystem {i}: {exc}") from exc
            made["deterministic"] = bnd.ErrorBound(bnd.DETERMINISTIC, etas, rho)
            info["deterministic"] = {"holder": [h.tolist() for h in holder], "rkhs_bound": [b.tolist() for b in B],
                                     "rkhs_floor": [f.tolist() for f in floors]}

        c = cfg.section("controller")
        ctrl = synthesize_gains(sysm, models, c.get("margin", 0.5), fixed=tuple(c.get("fixed_gains", ())),
                                grid_per_dim=c.get("grid_per_dim", 25), safety=c.get("safety", 1.2),
                                derivative_mode=c.get("derivative_mode", "analytic"))
        certs = {k: build_certificate(ctrl.gains, ctrl.lipschitz, b) for k, b in made.items()}
    except NUMERICAL as exc:
        raise NumericalFailure(str(exc)) from exc
    path = man.out_dir / "controller.json"
    save_controller(ctrl, path, [f"models/subsystem_{i}.json" for i in range(1, sysm.h + 1)])
    primary = c.get("certificate", "probabilistic" if "probabilistic" in made else "deterministic")
    results = {
        "bounds": {k: b.to_dict() | info.get(k, {}) for k, b in made.items()},
        "controller": {"gains": list(ctrl.gains), "lipschitz": ctrl.lipschitz.tolist(),
                       "derivative_mode": ctrl.mode},
        "certificates": {k: v.to_dict() for k, v in certs.items()},
        "primary": primary,
    }
    man.record("certify", key, [path], results)
    return results


def certificate_from_dict(d: dict) -> IspsCertificate:
    return IspsCertificate(tuple(d["gains"]), np.array(d["lipschitz"], dtype=float), tuple(d["k_per_subsystem"]),
                           d["k"], d["c_tilde"], d["c"], d["probability"], d.get("bound_kind", ""))


# --- simulate ----------------------------------------------------------------

def _write_rows(path: Path, header, cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def _figures(folder: Path, name: str, pair, curves: dict[str, tuple], label: str) -> list[Path]:
    files = []
    t = pair.times
    series = []
    for k in range(pair.x.shape[1]):
        series.append(Series(t, pair.x[:, k], f"x{k + 1}"))
        series.append(Series(t, pair.x_prime[:, k], f"x{k + 1}'", dashed=True))
    p = folder / f"{name}_states.svg"
    p.write_text(line_plot(series, f"{label or name}: state evolution", "t [s]", "state"))
    files.append(p)
    for logy, suffix in ((False, ""), (True, "_log")):
        ser = []
        first = next(iter(curves.values()))
        ser.append(Series(t, first[0], "closeness d(t)"))
        for kind, (_, bound) in curves.items():
            ser.append(Series(t, bound, f"{kind} bound", dashed=True))
        p = folder / f"{name}_closeness{suffix}.svg"
        p.write_text(line_plot(ser, f"{label or name}: closeness and bound", "t [s]", "distance", logy=logy))
        files.append(p)
    return files


def simulate(cfg: RunConfig, man: RunManifest, force: bool = False) -> dict:
    _require(man, "simulate", ["generate-data", "train", "certify"])
    key = digest([man.output_hash("certify"), cfg.hash_of("simulation", "scenario", "seed")])
    if not force and man.is_current("simulate", key):
        man.note_cached("simulate", key)
        res = man.stage("simulate")["results"]
        _raise_for(res)
        return res
    ctrl = load_controller(man.out_dir / "controller.json", cfg.system)
    certs = {k: certificate_from_dict(v) for k, v in man.stage("certify")["results"]["certificates"].items()}
    s = cfg.section("simulation")
    files = []
    out = {}
    for sc in cfg.scenarios:
        simcfg = SimConfig(s.get("t_end", 10.0), s.get("dt", 1e-3), s.get("method", "rk4"), cfg.seed,
                           s.get("clamp_to_domain", False), sc.allow_outside)
        try:
            pair = simulate_pair(cfg.system, ctrl, sc.x0, sc.x0_prime, PiecewiseConstant(sc.u_times, sc.u_hat),
                                 PiecewiseConstant(sc.u_times, sc.u_hat_prime), simcfg)
        except SimulationError as exc:
            out[sc.name] = {"label": sc.label, "failed": str(exc), "failure_time": exc.time}
            continue
        tdir = man.out_dir / "trajectories"
        vdir = man.out_dir / "verification"
        fdir = man.out_dir / "figures"
        for d in (tdir, vdir, fdir):
            d.mkdir(parents=True, exist_ok=True)
        for tag, traj in (("x", pair.first), ("x_prime", pair.second)):
            p = tdir / f"{sc.name}_{tag}.csv"
            write_trajectory_csv(traj, p)
            files.append(p)
        zeta = (np.array([transform(ctrl, x) for x in pair.x]), np.array([transform(ctrl, x) for x in pair.x_prime]))
        entry = {"label": sc.label, "clamp_events": pair.first.clamp_events + pair.second.clamp_events,
                 "domain_exits": pair.first.domain_exits + pair.second.domain_exits, "certificates": {}}
        curves = {}
        for kind, cert in certs.items():
            rep = verify_bound(cert, ctrl, pair, zeta)
            r, V = lyapunov_residual(cert, ctrl, pair, zeta)
            p = vdir / f"{sc.name}_{kind}.csv"
            _write_rows(p, ["t", "closeness", "bound", "residual"], [pair.times, rep.closeness, rep.bound, r])
            files.append(p)
            curves[kind] = (rep.closeness, rep.bound)
            entry["certificates"][kind] = rep.summary() | {
                "max_residual": float(np.max(r)), "residual_pass_fraction": residual_pass_fraction(r, V)}
        files.extend(_figures(fdir, sc.name, pair, curves, sc.label))
        out[sc.name] = entry
    results = {"scenarios": out}
    man.record("simulate", key, files, results)
    _raise_for(results)
    return results


def _raise_for(results: dict) -> None:
    failed = [n for n, e in results["scenarios"].items() if "failed" in e]
    if failed:
        raise NumericalFailure(f"simulation failed for scenario(s) {', '.join(failed)}")
    broken = [f"{n} ({k})" for n, e in results["scenarios"].items()
              for k, c in e["certificates"].items() if c["violations"]]
    if broken:
        raise BoundViolation(f"closeness bound violated in {', '.join(broken)}")


# --- report ------------------------------------------------------------------

def _g(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


def report(cfg: RunConfig, man: RunManifest, force: bool = False) -> Path:
    _require(man, "report", ["generate-data", "train", "certify", "simulate"])
    key = digest([man.output_hash(s) for s in ("generate-data", "train", "certify", "simulate")])
    path = man.out_dir / "report.md"
    if not force and man.is_current("report", key):
        man.note_cached("report", key)
        return path
    tr = man.stage("train")["results"]["subsystems"]
    ce = man.stage("certify")["results"]
    sim = man.stage("simulate")["results"]["scenarios"]
    b = ce["bounds"]
    lines = [f"# Run report: {cfg.system.name}", "",
             f"Config hash `{man.data['config_hash'][:16]}`, seed {cfg.seed}.", "",
             "## Learned models", "",
             "| subsystem | mode | optimizer converged | rho_bar (inf-norm) |", "|---|---|---|---|"]
    for s in tr:
        lines.append(f"| {s['subsystem']} | {s['mode']} | {s['optimizer_converged']} | {_g(s['rho_bar_norm'])} |")
    lines += ["", "## Model-error bounds", "",
              "| subsystem | rho_bar | eta (prob.) | eta*rho_bar (prob.) | eta~ (det.) | eta~*rho_bar (det.) |",
              "|---|---|---|---|---|---|"]
    pb, db = b.get("probabilistic"), b.get("deterministic")
    for i, s in enumerate(tr):
        row = [str(s["subsystem"]), _g(s["rho_bar_norm"])]
        for bd in (pb, db):
            row += [_g(bd["eta_norm"][i]), _g(bd["product"][i])] if bd else ["n/a", "n/a"]
        lines.append("| " + " | ".join(row) + " |")
    if pb and pb.get("interval"):
        iv = pb["interval"]
        lines += ["", f"Probabilistic bound ({pb.get('mode')}): joint success probability in "
                      f"[{iv['lower']:.6f}, {iv['upper']:.6f}] at confidence {iv['confidence']:.12g} "
                      f"from {iv['realizations']} samples, so epsilon = {pb['epsilon']:.4g}."]
    for ref in (pb or {}).get("reference", []):
        iv = ref["interval"]
        lines.append(f"Reference threshold {ref['threshold']:.4g} on subsystem {ref['subsystem']}"
                     f"{' (' + ref['label'] + ')' if ref['label'] else ''}: probability in "
                     f"[{iv['lower']:.6f}, {iv['upper']:.6f}].")
    lines += ["", "## Controller and certificates", "",
              f"Gains: {', '.join(f'{g:.6g}' for g in ce['controller']['gains'])} "
              f"({ce['controller']['derivative_mode']} derivatives).", "",
              "| certificate | k | c_tilde | c | probability |", "|---|---|---|---|---|"]
    for kind, c in ce["certificates"].items():
        mark = " (primary)" if kind == ce["primary"] else ""
        lines.append(f"| {kind}{mark} | {_g(c['k'])} | {_g(c['c_tilde'])} | {_g(c['c'])} | {_g(c['probability'])} |")
    lines += ["", "## Scenarios", "",
              "| scenario | certificate | initial closeness d(0) | final closeness d(t_end) | violations | max(d - bound) | residual pass | "
              "clamps | domain exits |", "|---|---|---|---|---|---|---|---|---|"]
    for name, e in sim.items():
        if "failed" in e:
            lines.append(f"| {name} | failed: {e['failed']} | | | | | | | |")
            continue
        for kind, c in e["certificates"].items():
            lines.append(f"| {name} | {kind} | {_g(c['initial_closeness'])} | {_g(c['final_closeness'])} | "
                         f"{c['violations']} | {_g(c['max_violation'])} | {c['residual_pass_fraction']:.4f} | "
                         f"{e['clamp_events']} | {e['domain_exits']} |")
    broken = [f"{n} ({k})" for n, e in sim.items() for k, c in e.get("certificates", {}).items() if c["violations"]]
    if broken:
        lines += ["", f"The closeness bound was violated in {', '.join(broken)}."]
    notes = [n for n, e in sim.items() if e.get("clamp_events")]
    if notes:
        lines += ["", f"Clamp events occurred in {', '.join(notes)}; check the domain and scenario settings."]
    exits = [n for n, e in sim.items() if e.get("domain_exits")]
    if exits:
        lines += ["", f"Trajectories left the certified domain in {', '.join(exits)}; the certificate only "
                      "covers the time spent inside it."]
    path.write_text("\n".join(lines) + "\n")
    man.record("report", key, [path], {"path": "report.md"})
    return path


RUNNERS = {"generate-data": generate_data, "train": train, "certify": certify, "simulate": simulate,
           "report": report}


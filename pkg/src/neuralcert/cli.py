"""Command-line entry point.

Subcommands: train, verify, simulate, evaluate, export. Every command
takes --config and reads one INI run document; --seed and --out override
the document. Exit codes are a stable scripting contract: 0 for success
or a certified verdict, 2 for usage and configuration errors, 3 when a
certificate is falsified, 4 when verification is inconclusive.

All artifacts are deterministic for a fixed (config, seed), except the
wall_ms fields in the manifest and the loss history.
"""

import argparse
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from ._core import BACKEND
from .certificates import CertificateSpec, QuadraticCertificate
from .config import ConfigError, load_config
from .controllers import CbfQpPolicy, ClfQpPolicy, LinearStateFeedback
from .dynamics import cwh_matrices, lyapunov_solution, wrap_angle
from .serialize import fmt, load_spec, save_network, save_spec
from .sim import (TrackingPolicy, contraction_diagnostics,
                  open_loop_reference, rollout, tracking_error)
from .training import (_sinusoid_inputs, _substreams, lqr_quadratic,
                       train_cbf_satellite, train_clf_pendulum,
                       train_contraction_car, write_history)
from .verification import (NegatedCertificate, branch_and_bound_verify,
                           cegis_loop, lipschitz_grid_certify,
                           sampling_validate)
from .verification.monitor import cbf_monitor, clf_monitor

VERDICT_EXIT = {"certified": 0, "falsified": 3, "inconclusive": 4}

TRAINERS = {"clf": train_clf_pendulum, "cbf": train_cbf_satellite,
            "contraction": train_contraction_car}


def _write_manifest(cfg, command, wall_ms):
    lines = [f"command {command}",
             f"config_hash {cfg.config_hash}",
             f"seed {cfg.seed}",
             f"package neuralcert {__version__}",
             f"python {platform.python_version()}",
             f"numpy {np.__version__}",
             f"scipy {scipy.__version__}",
             f"qp_backend {BACKEND}",
             f"wall_ms {format(wall_ms, '.10g')}"]
    with open(os.path.join(cfg.out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _spec_path(cfg):
    return os.path.join(cfg.out, "spec.txt")


def _quadratic_spec(cfg):
    """Analytic Lyapunov baseline for the linear benchmark."""
    if cfg.system_name != "stable_linear":
        raise ConfigError(
            f"{cfg.path}: quadratic certificates need the stable_linear "
            f"system, got {cfg.system_name!r}")
    A = np.array(cfg.system.params["A"], dtype=np.float64)
    P = lyapunov_solution(A, np.eye(cfg.system.n))
    rate = cfg.certificate["rate"]
    if rate is None:
        rate = cfg.certificate["rate_scale"] / np.linalg.eigvalsh(P).max()
    return CertificateSpec("lyapunov", QuadraticCertificate(P), rate)


def _attach_policy(spec, cfg):
    """Rebuild the QP policy a trained spec was exercised with."""
    system = cfg.system
    train = cfg.train
    if spec.kind == "clf":
        qp_w = 1e2 if train.qp_relax_weight is None else train.qp_relax_weight
        spec.policy = ClfQpPolicy(spec.certificate, system, c=spec.rate,
                                  relax_weight=qp_w, penalty=train.penalty,
                                  u_max=train.u_max)
    elif spec.kind == "cbf":
        qp_w = 1e4 if train.qp_relax_weight is None else train.qp_relax_weight
        A, B = cwh_matrices(system.params["mean_motion"],
                            system.params["mass"])
        _, K = lqr_quadratic(A, B)
        nominal = LinearStateFeedback(K, goal=system.goal)
        spec.policy = CbfQpPolicy(spec.certificate, system, gamma=spec.rate,
                                  relax_weight=qp_w, penalty=train.penalty,
                                  u_max=train.u_max, u_nom=nominal)
    return spec


def _load_run_spec(cfg):
    if cfg.certificate["source"] == "quadratic":
        spec = _quadratic_spec(cfg)
    else:
        path = _spec_path(cfg)
        if not os.path.exists(path):
            raise ConfigError(f"no trained spec at {path}; run train first")
        spec = load_spec(path)
        if spec.kind != cfg.certificate["kind"]:
            raise ConfigError(
                f"{path} holds a {spec.kind} spec but the config asks for "
                f"{cfg.certificate['kind']}")
        if spec.certificate.dim != cfg.system.n:
            raise ConfigError(
                f"spec dimension {spec.certificate.dim} does not match "
                f"system dimension {cfg.system.n}")
        _attach_policy(spec, cfg)
    if cfg.certificate["negate"]:
        spec = CertificateSpec(spec.kind, NegatedCertificate(spec.certificate),
                               spec.rate, weights=spec.weights, dt=spec.dt,
                               policy=spec.policy, m_lo=spec.m_lo,
                               m_hi=spec.m_hi, eps_nd=spec.eps_nd)
    return spec


def _write_report(cfg, report):
    report.write(os.path.join(cfg.out, "report.txt"))
    if report.counterexamples:
        report.write_counterexamples_csv(
            os.path.join(cfg.out, "counterexamples.csv"))


# -- commands ---------------------------------------------------------------------------


def cmd_train(cfg, cegis_rounds=0):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    kind = cfg.certificate["kind"]
    if kind == "lyapunov":
        if cfg.certificate["source"] != "quadratic":
            raise ConfigError(f"{cfg.path}: lyapunov certificates are "
                              f"analytic; set source = quadratic")
        spec = _quadratic_spec(cfg)
        history = []
    elif cegis_rounds > 0:
        if kind != "clf":
            raise ConfigError(f"{cfg.path}: counterexample-guided rounds "
                              f"are wired for the clf pipeline only")
        res = cegis_loop(cfg.train, system=cfg.system, rounds=cegis_rounds,
                         validate_n=cfg.verify["validate_n"],
                         finetune_epochs=cfg.verify["finetune_epochs"],
                         tol=cfg.verify["tol"])
        spec, history = res.spec, res.history
        with open(os.path.join(cfg.out, "cegis_rounds.csv"), "w") as fh:
            fh.write("round,violations,worst_margin\n")
            for k, rep in enumerate(res.reports):
                fh.write(f"{k},{rep.violations},{fmt(rep.worst_margin)}\n")
        _write_report(cfg, res.reports[-1])
    else:
        spec, history = TRAINERS[kind](cfg.train, system=cfg.system)
    save_spec(spec, _spec_path(cfg))
    if history:
        write_history(os.path.join(cfg.out, "history.csv"), history)
    _write_manifest(cfg, "train", (time.perf_counter() - t0) * 1e3)
    return 0


def cmd_verify(cfg, method=None, cegis_rounds=0):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    method = method or cfg.verify["method"]
    if cegis_rounds > 0:
        res = cegis_loop(cfg.train, system=cfg.system, rounds=cegis_rounds,
                         validate_n=cfg.verify["validate_n"],
                         finetune_epochs=cfg.verify["finetune_epochs"],
                         tol=cfg.verify["tol"])
        save_spec(res.spec, _spec_path(cfg))
        report = res.reports[-1]
    else:
        spec = _load_run_spec(cfg)
        v = cfg.verify
        exclude = None if v["exclude"] == "none" else v["exclude"]
        try:
            if method == "sample":
                report = sampling_validate(spec, cfg.system, v["n_samples"],
                                           seed=cfg.seed, tol=v["tol"])
            elif method == "grid":
                report = lipschitz_grid_certify(
                    spec, cfg.system, tau=v["tau"], exclude=exclude,
                    budget=v["budget"], tol=v["tol"])
            else:
                report = branch_and_bound_verify(
                    spec, cfg.system, exclude=exclude,
                    max_cells=v["max_cells"], min_width=v["min_width"],
                    tol=v["tol"])
        except ValueError as err:
            raise ConfigError(f"{method} verification: {err}") from err
    _write_report(cfg, report)
    _write_manifest(cfg, "verify", (time.perf_counter() - t0) * 1e3)
    return VERDICT_EXIT[report.verdict]


def _initial_states(cfg, spec, count, rng):
    system = cfg.system
    sim = cfg.simulate
    if spec.kind == "cbf":
        direction = rng.normal(size=(count, 3))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        r_lo, r_hi = sim["r0"]
        radius = r_lo + rng.random(count) * (r_hi - r_lo)
        return np.concatenate([direction * radius[:, None],
                               np.zeros((count, 3))], axis=-1)
    half = sim["x0_half_width"]
    return system.goal + (rng.random((count, system.n)) * 2.0 - 1.0) * half


def _monitor_for(spec, tol):
    if spec.kind in ("lyapunov", "clf"):
        return clf_monitor(c=spec.rate, tol=tol)
    if spec.kind == "cbf":
        return cbf_monitor(gamma=spec.rate, tol=tol)
    return None


def _car_rollouts(cfg, spec, count, rng):
    """Held-out sinusoidal references with perturbed starts."""
    system = cfg.system
    sim = cfg.simulate
    pos_lim = system.x_box[0, 1] - 0.2
    out = []
    for _ in range(count):
        while True:
            x0 = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                           rng.uniform(-np.pi, np.pi)])
            ref = open_loop_reference(system, _sinusoid_inputs(rng), x0,
                                      sim["horizon"],
                                      dt_sim=sim["dt_sim"],
                                      dt_ctrl=sim["dt_ctrl"],
                                      wrap_dims=system.angular_dims)
            if np.abs(ref.states[:, :2]).max() <= pos_lim:
                break
        start = ref.states[0] + rng.uniform(-sim["perturb"], sim["perturb"],
                                            size=3)
        start[2] = wrap_angle(start[2])
        policy = TrackingPolicy(spec.policy, ref,
                                angular_dims=system.angular_dims)
        traj = rollout(system, policy, start, sim["horizon"],
                       dt_sim=sim["dt_sim"], dt_ctrl=sim["dt_ctrl"],
                       wrap_dims=system.angular_dims)
        out.append((traj, ref))
    return out


def _run_rollouts(cfg, spec, count, seed):
    sim = cfg.simulate
    rng = _substreams(seed, 1)[0]
    if spec.kind == "contraction":
        if spec.policy is None:
            raise ConfigError("contraction spec has no tracking policy")
        return _car_rollouts(cfg, spec, count, rng)
    if spec.policy is None and spec.kind != "lyapunov":
        raise ConfigError("spec has no policy to roll out")
    policy = spec.policy or LinearStateFeedback(
        np.zeros((cfg.system.m, cfg.system.n)), goal=cfg.system.goal)
    starts = _initial_states(cfg, spec, count, rng)
    out = []
    for x0 in starts:
        traj = rollout(cfg.system, policy, x0, sim["horizon"],
                       dt_sim=sim["dt_sim"], dt_ctrl=sim["dt_ctrl"],
                       cert=spec.certificate,
                       monitor=_monitor_for(spec, sim["monitor_tol"]))
        out.append((traj, None))
    return out


def cmd_simulate(cfg):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    spec = _load_run_spec(cfg)
    pairs = _run_rollouts(cfg, spec, cfg.simulate["n_rollouts"], cfg.seed)
    for i, (traj, _) in enumerate(pairs):
        traj.write_csv(os.path.join(cfg.out, f"traj_{i:03d}.csv"))
    _write_manifest(cfg, "simulate", (time.perf_counter() - t0) * 1e3)
    return 0


def _metrics(cfg, spec, pairs):
    out = {"rollouts": float(len(pairs))}
    if not pairs:
        return out
    if spec.kind == "contraction":
        dims = cfg.system.angular_dims
        slopes = []
        finals = []
        for traj, ref in pairs:
            slope, _ = contraction_diagnostics(spec.certificate, traj, ref,
                                               angular_dims=dims)
            slopes.append(slope)
            e0 = tracking_error(traj.states[0], ref.states[0], dims)
            eT = tracking_error(traj.states[-1],
                                ref.state_at(traj.times[-1]), dims)
            finals.append(np.linalg.norm(eT)
                          / max(np.linalg.norm(e0), 1e-12))
        out["contraction_decay_slope"] = float(np.mean(slopes))
        out["decay_slope_worst"] = float(np.max(slopes))
        out["final_error_ratio_mean"] = float(np.mean(finals))
        return out
    relax = [float(t.relaxations.mean()) for t, _ in pairs if t.steps]
    out["mean_relaxation"] = float(np.mean(relax)) if relax else 0.0
    out["monitor_flag_steps"] = float(sum(int(t.monitor_flags.sum())
                                          for t, _ in pairs))
    if spec.kind == "cbf":
        bad = sum(bool(cfg.system.unsafe_mask(t.states).any())
                  for t, _ in pairs)
        out["safety_violations"] = float(bad)
    else:
        radius = cfg.evaluate["converge_radius"]
        goal = np.asarray(cfg.system.goal)
        done = sum(np.linalg.norm(t.states[-1] - goal) < radius
                   and t.status == "ok" for t, _ in pairs)
        out["convergence_fraction"] = done / len(pairs)
    return out


def cmd_evaluate(cfg):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    spec = _load_run_spec(cfg)
    pairs = _run_rollouts(cfg, spec, cfg.evaluate["n_rollouts"], cfg.seed)
    metrics = _metrics(cfg, spec, pairs)
    with open(os.path.join(cfg.out, "metrics.csv"), "w") as fh:
        fh.write("metric,value\n")
        for name in sorted(metrics):
            fh.write(f"{name},{fmt(metrics[name])}\n")
    _write_manifest(cfg, "evaluate", (time.perf_counter() - t0) * 1e3)
    return 0


def cmd_export(cfg):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    spec = _load_run_spec(cfg)
    cert = spec.certificate
    if hasattr(cert, "net"):
        save_network(cert.net, os.path.join(cfg.out, "certificate_net.txt"))
    else:
        with open(os.path.join(cfg.out, "certificate_quadratic.csv"), "w") as fh:
            for row in np.atleast_2d(cert.P):
                fh.write(",".join(fmt(v) for v in row) + "\n")
    if spec.policy is not None and hasattr(spec.policy, "net"):
        save_network(spec.policy.net, os.path.join(cfg.out, "policy_net.txt"))
    _write_manifest(cfg, "export", (time.perf_counter() - t0) * 1e3)
    return 0


# -- argument plumbing --------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(
        prog="neuralcert",
        description="Train, verify, and exercise neural certificate functions.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in (("train", "fit a certificate per the config"),
                      ("verify", "check a certificate and set the exit code"),
                      ("simulate", "write closed-loop trajectory CSVs"),
                      ("evaluate", "write rollout metrics"),
                      ("export", "write standalone network documents")):
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("--config", required=True, help="run config (INI)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", default=None,
                        help="override the output directory")
        if name == "verify":
            sp.add_argument("--method", choices=("sample", "grid", "ibp"),
                            default=None)
        if name in ("train", "verify"):
            sp.add_argument("--cegis-rounds", type=int, default=0,
                            help="alternate training and sampled "
                                 "falsification this many times")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "train":
            return cmd_train(cfg, cegis_rounds=args.cegis_rounds)
        if args.command == "verify":
            return cmd_verify(cfg, method=args.method,
                              cegis_rounds=args.cegis_rounds)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_export(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``neursls`` command line: train, rollout, validate, verify, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from typing import Optional

import numpy as np

from . import __version__, evaluate, svgplot, verify
from .ren import init_theta, load_checkpoint, save_checkpoint
from .scenario import ScenarioError, load
from .sls import rollout
from .signals import Signal
from .training import PrecheckFailed, TrainingDiverged, gradcheck, train

EXIT_CONFIG = 1
EXIT_PRECHECK = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64
MAX_FAILED = 63

log = logging.getLogger("neursls")


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _git_stamp() -> Optional[str]:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=os.path.dirname(__file__))
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _load_scenario(name: str):
    try:
        return load(name)
    except json.JSONDecodeError as exc:
        raise CliError(f"{name}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
    except OSError as exc:
        raise CliError(f"cannot read scenario {name}: {exc}")
    except ScenarioError as exc:
        raise CliError(f"{name}: {exc}")


def _write_manifest(out: str, command: str, scenario, args, extra: Optional[dict] = None) -> None:
    """Scenario copy plus version stamp and config hash next to every artifact."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "scenario.json"), "w") as fh:
        json.dump(scenario.source, fh, indent=2, sort_keys=True)
    doc = {
        "command": command,
        "scenario_id": scenario.id,
        "config_hash": scenario.config_hash(),
        "version": __version__,
        "git": _git_stamp(),
        "seed": args.seed,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    doc.update(extra or {})
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _load_theta(args, scenario):
    if args.checkpoint is None:
        raise CliError("--checkpoint is required (or pass --m-zero)")
    try:
        theta, sigma = load_checkpoint(args.checkpoint)
        evaluate.check_compatible(scenario, theta)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {args.checkpoint}: {exc}")
    return theta, sigma


def _out_dir(args, scenario, command: str) -> str:
    return args.out or os.path.join("runs", f"{scenario.id}-{command}")


def _summary(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    scen = _load_scenario(args.scenario)
    overrides = {"epochs": args.epochs}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.horizon is not None:
        scen.source["horizon_steps"] = args.horizon
    scen = scen.with_overrides(**overrides)
    cfg = scen.train_config
    out = _out_dir(args, scen, "train")
    args.seed = cfg.seed
    _write_manifest(out, "train", scen, args)
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)

    theta0 = init_theta(scen.ren_dims, np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0]),
                        scen.epsilon)
    save_checkpoint(os.path.join(out, "theta_init.json"), theta0, scen.activation)
    if cfg.epochs == 0:
        save_checkpoint(os.path.join(out, "theta.json"), theta0, scen.activation)
        print(f"epochs = 0: wrote initial checkpoint to {out}")
        return 0
    try:
        res = train(cfg, scen, scen.sample, theta0=theta0, out_dir=ckdir,
                    log_file=os.path.join(out, "train_log.jsonl"))
    except PrecheckFailed as exc:
        print(f"pre-check failed: {exc}", file=sys.stderr)
        return EXIT_PRECHECK
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(os.path.join(out, "theta.json"), res.theta, scen.activation,
                    extra={"scenario": scen.id, "config_hash": scen.config_hash()})

    # final rollouts on a held-out sample
    w = scen.sample(1, cfg.horizon, np.random.default_rng(cfg.seed + 1))
    r = rollout(evaluate.controller(scen, res.theta, scen.activation), Signal(w[0]), loss=scen.stage_loss,
                meta={"seed": cfg.seed + 1, "scenario": scen.id})
    r.export(os.path.join(out, "final_rollout"))
    x = r.x.data[None]
    summary = {"J_init": res.J_init, "J_final": res.J_final, "ratio": res.J_final / res.J_init,
               "epochs": cfg.epochs, "terminal_error": evaluate.terminal_errors(scen, x)[0].tolist(),
               "min_distance": float(evaluate.min_pairwise_distance(scen, x)[0]),
               "probes_ok": all(p["ok"] for p in res.probes)}
    _summary(os.path.join(out, "summary.json"), summary)
    print(f"J {res.J_init:.6g} -> {res.J_final:.6g} (ratio {summary['ratio']:.3f}); artifacts in {out}")
    return 0


def cmd_rollout(args) -> int:
    scen = _load_scenario(args.scenario)
    theta, sigma = (None, scen.activation) if args.m_zero else _load_theta(args, scen)
    seed = 0 if args.seed is None else args.seed
    T = args.horizon or scen.horizon
    out = _out_dir(args, scen, "rollout")
    args.seed = seed
    _write_manifest(out, "rollout", scen, args)
    w = scen.sample(1, T, np.random.default_rng(seed))[0]
    r = rollout(evaluate.controller(scen, theta, sigma), Signal(w), loss=scen.stage_loss,
                meta={"seed": seed, "scenario": scen.id, "m_zero": bool(args.m_zero)})
    r.export(out)
    frames = []
    for t in svgplot.snapshot_steps(scen, T):
        path = os.path.join(out, f"snapshot_t{t:04d}.svg")
        with open(path, "w") as fh:
            fh.write(svgplot.snapshot_svg(scen, r.x.data, t))
        frames.append(path)
    x = r.x.data[None]
    mind = float(evaluate.min_pairwise_distance(scen, x)[0])
    summary = {"terminal_error": evaluate.terminal_errors(scen, x)[0].tolist(), "min_distance": mind,
               "safety_distance": scen.weights.safety_distance,
               "clearance": float(evaluate.min_clearance(scen, x)[0]),
               "collision_free": bool(evaluate.min_clearance(scen, x)[0] >= 0.0),
               "total_loss": float(np.sum(r.losses)), "frames": [os.path.basename(f) for f in frames]}
    _summary(os.path.join(out, "summary.json"), summary)
    print(f"min distance {mind:.4f}, terminal error {max(summary['terminal_error']):.4f}; wrote {out}")
    return 0


def cmd_validate(args) -> int:
    scen = _load_scenario(args.scenario)
    theta, sigma = _load_theta(args, scen)
    S = args.samples or int(scen.validation.get("samples", 10))
    T = args.horizon or int(scen.validation.get("horizon_steps", 500))
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args, scen, "validate")
    args.seed = seed
    _write_manifest(out, "validate", scen, args)
    cfg = scen.train_config
    untrained = init_theta(theta.dims, np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0]),
                           theta.epsilon)
    w = scen.sample(S, T, np.random.default_rng(seed))
    curves, report = {}, {"samples": S, "horizon_steps": T}
    for name, th in (("untrained", untrained), ("trained", theta)):
        x, u, _ = evaluate.simulate(scen, th, w, sigma)
        cum = evaluate.cumulative_loss(scen, x, u)
        inc = evaluate.convergence_increment(cum)
        curves[name] = cum
        report[name] = {"increment": inc.tolist(), "max_increment": float(inc.max()),
                        "converged": bool(inc.max() <= 1e-3), "final_loss": cum[:, -1].tolist()}
    header = ["t"] + [f"{name}_{k}" for name in curves for k in range(S)]
    rows = np.column_stack([np.arange(T + 1)] + [curves[n].T for n in curves])
    with open(os.path.join(out, "cumulative_loss.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) + "\n")
    _summary(os.path.join(out, "validation.json"), report)
    for name in curves:
        print(f"{name:9s} max relative increment over last 20%: {report[name]['max_increment']:.3e}")
    return 0


def cmd_verify(args) -> int:
    if args.suite not in verify.SUITES and args.suite != "all":
        print(f"unknown suite {args.suite!r}; choose from {', '.join(list(verify.SUITES) + ['all'])}",
              file=sys.stderr)
        return EXIT_USAGE
    results = verify.run(args.suite, seed=0 if args.seed is None else args.seed)
    for r in results:
        print(r.line())
    return min(sum(not r.passed for r in results), MAX_FAILED)


def cmd_gradcheck(args) -> int:
    scen = _load_scenario(args.scenario)
    T = args.horizon or 10
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    if args.checkpoint:
        theta, _ = _load_theta(args, scen)
    else:
        theta = init_theta(scen.ren_dims, rng, scen.epsilon, out_std=0.5)
    w = scen.sample(args.samples or 2, T, rng)
    rep = gradcheck(theta, scen, w)
    status = "PASS" if rep.passed else "FAIL"
    print(f"[{status}] max relative error {rep.max_rel_error:.3e} over {rep.checked} coordinates "
          f"(worst in {rep.worst_block}); tolerance {rep.tolerance:g}")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neursls", description=__doc__)
    p.add_argument("--version", action="version", version=f"neursls {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--scenario", default="mountains", help="scenario JSON path or built-in name")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--horizon", type=int, default=None, help="number of steps")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None)

    sp = sub.add_parser("train", help="train the REN on a scenario")
    common(sp)
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("rollout", help="simulate one closed-loop rollout and draw snapshots")
    common(sp, checkpoint=True)
    sp.add_argument("--m-zero", action="store_true", help="base controller only (M = 0)")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("validate", help="cumulative-loss convergence, untrained vs trained")
    common(sp, checkpoint=True)
    sp.add_argument("--samples", type=int, default=None)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("verify", help="run a property suite")
    sp.add_argument("suite", help="contraction, gradcheck, completeness, youla, achievability or all")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    common(sp, checkpoint=True)
    sp.add_argument("--samples", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

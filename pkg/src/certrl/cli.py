"""Command-line harness: train, certify, verify, attack and report.

Exit codes: 0 success, 1 verification failed, 2 bad input (missing or
malformed files, invalid configuration). Errors are printed to stderr as a
single JSON object.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attacked_return
from .certify import (CertConfig, CorruptCertificate, load_trace, save_trace, summarize,
                      verify_certificate, wcar)
from .envs import ENVIRONMENTS, PerturbationSpec, make_env, table1_policy
from .mlp import Mlp
from .model import GaussianModel, GaussianPolicy
from .train import TrainConfig, train, write_log

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2
CERT_DIR = "certificates"


class InputError(Exception):
    """Missing or malformed input; maps to exit code 2."""


# -- helpers ----------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` comments, no sections needed."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text())
    except configparser.Error as err:
        raise InputError(f"cannot parse config {path}: {err}") from None
    return dict(parser["run"])


def write_config(values: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def write_manifest(out_dir: Path, command: str, config: dict, seed, files: list,
                   timings: dict) -> None:
    """``manifest.json`` with file hashes; wall-clock timings go to ``timings.json``.

    Keeping timings out of the manifest lets two identical runs produce
    byte-identical bundles.
    """
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": version_string(),
        "files": {name: sha256_file(out_dir / name) for name in sorted(files)},
        "timings": "timings.json",
    }
    write_json(manifest, out_dir / "manifest.json")
    write_json({"command": command, "seconds": timings}, out_dir / "timings.json")


def builtin_policy(env_name: str) -> GaussianPolicy:
    """Hand-written reference controllers used when no checkpoint is given."""
    if env_name == "table1":
        return table1_policy()
    env = make_env(env_name)
    k = env.state_dim
    net = Mlp([-5.0 * np.eye(k)], [np.zeros(k)], ["tanh"])
    return GaussianPolicy(net, np.full(k, -2.0), True)


def _source(spec: str) -> str:
    return spec if spec in ("builtin", "exact") else "checkpoint"


def load_policy(spec: str, env_name: str) -> GaussianPolicy:
    if spec == "builtin":
        return builtin_policy(env_name)
    return _load(GaussianPolicy, spec)


def load_model(spec: str, env_name: str) -> GaussianModel:
    if spec == "exact":
        return make_env(env_name).as_model()
    return _load(GaussianModel, spec)


def _load(cls, path):
    path = Path(path)
    if not path.is_file() or not Path(f"{path}.meta.json").is_file():
        raise InputError(f"checkpoint not found (need {path} and {path}.meta.json)")
    try:
        return cls.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise InputError(f"corrupt checkpoint {path}: {err}") from None


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    values = read_config(args.config) if args.config else {}
    if args.env:
        values["env"] = args.env
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(values)
        env = make_env(cfg.env)
    except (TypeError, ValueError) as err:
        raise InputError(str(err)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = train(env, cfg)
    elapsed = time.perf_counter() - t0
    result.policy.save(out / "policy.ckpt")
    result.model.save(out / "model.ckpt")
    write_log(result.log, out / "train_log.csv")
    write_config(cfg.to_dict(), out / "config.txt")
    files = ["policy.ckpt", "policy.ckpt.meta.json", "model.ckpt", "model.ckpt.meta.json",
             "train_log.csv", "config.txt"]
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, files, {"train": elapsed})
    print(json.dumps({"out_dir": str(out), "final": result.log[-1]}))
    return EXIT_OK


def _cert_config(args) -> tuple:
    values = read_config(args.config) if args.config else {}
    flags = {"N": args.samples, "T": args.horizon, "delta": args.delta,
             "epsilon_test": args.epsilon}
    try:
        merged = {k: float(values[k]) for k in ("N", "T", "delta", "epsilon_test") if k in values}
        merged.update({k: v for k, v in flags.items() if v is not None})
        for k in ("N", "T"):
            if k in merged:
                if merged[k] != int(merged[k]):
                    raise ValueError(f"{k} must be an integer")
                merged[k] = int(merged[k])
        cfg = CertConfig(**merged)
        seed = int(args.seed if args.seed is not None else values.get("seed", 0))
        env_name = args.env or values.get("env", "pointmass1d")
        if env_name not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {env_name!r}")
    except (TypeError, ValueError) as err:
        raise InputError(str(err)) from None
    return cfg, seed, env_name


def cmd_certify(args) -> int:
    cfg, seed, env_name = _cert_config(args)
    env = make_env(env_name)
    policy = load_policy(args.policy, env_name)
    model = load_model(args.model, env_name)
    if args.delta_e is not None:
        if not 0.0 <= args.delta_e < 1.0:
            raise InputError("--delta-e must lie in [0, 1)")
        model.delta_E = args.delta_e
    if policy.state_dim != env.state_dim or model.state_dim != env.state_dim:
        raise InputError("policy/model dimensions do not match the environment")

    out = Path(args.out_dir)
    (out / CERT_DIR).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    init = env if args.init == "env" else (lambda rng: np.zeros(env.state_dim))
    result = wcar(policy, model, init, cfg, rng=seed)
    t_cert = time.perf_counter() - t0

    # the bundle carries its own copies of the checkpoints so it verifies standalone
    policy.save(out / "policy.ckpt")
    model.save(out / "model.ckpt")
    files = ["policy.ckpt", "policy.ckpt.meta.json", "model.ckpt", "model.ckpt.meta.json"]
    for i, trace in enumerate(result.traces):
        if trace is not None:
            name = f"{CERT_DIR}/cert_{i:06d}.txt"
            save_trace(trace, out / name)
            files.append(name)
    summary = summarize(result, policy, model)
    summary.update({"env": env_name, "init": args.init, "seed": seed, "policy": _source(args.policy),
                    "model": _source(args.model)})
    write_json(summary, out / "summary.json")
    files.append("summary.json")
    config = {**cfg.__dict__, "env": env_name, "init": args.init, "policy": _source(args.policy),
              "model": _source(args.model),
              "delta_E": model.delta_E}
    write_manifest(out, "certify", config, seed, files, {"certify": t_cert})
    print(json.dumps({"wcar": summary["wcar"], "theorem1_bound": summary["theorem1_bound"],
                      "n_failed": summary["n_failed"], "out_dir": str(out)}))
    return EXIT_OK if result.certifiable else EXIT_FAILED


def verify_bundle(bundle) -> tuple:
    """Check manifest hashes and replay every certificate; returns ``(ok, problems)``."""
    bundle = Path(bundle)
    manifest_path = bundle / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"no manifest.json in {bundle}")
    try:
        manifest = json.loads(manifest_path.read_text())
        files = manifest["files"]
    except (json.JSONDecodeError, KeyError) as err:
        raise InputError(f"corrupt manifest: {err}") from None
    if manifest.get("command") != "certify":
        raise InputError("not a certificate bundle")
    problems = []
    for name, digest in files.items():
        path = bundle / name
        if not path.is_file():
            problems.append(f"{name}: missing")
        elif sha256_file(path) != digest:
            problems.append(f"{name}: hash mismatch")
    listed = {n for n in files if n.startswith(CERT_DIR + "/")}
    present = {f"{CERT_DIR}/{p.name}" for p in (bundle / CERT_DIR).glob("*.txt")}
    problems += [f"{n}: not in manifest" for n in sorted(present - listed)]

    policy = _load(GaussianPolicy, bundle / "policy.ckpt")
    model = _load(GaussianModel, bundle / "model.ckpt")
    eps = float(manifest["config"]["epsilon_test"])
    spec = PerturbationSpec(eps)
    for name in sorted(listed):
        try:
            trace = load_trace(bundle / name)
            ok = verify_certificate(trace, policy, model, spec)
        except (OSError, CorruptCertificate, ValueError) as err:
            problems.append(f"{name}: {err}")
            continue
        if not ok:
            problems.append(f"{name}: replay does not match stored bounds")
    return not problems, problems


def cmd_verify(args) -> int:
    ok, problems = verify_bundle(args.bundle)
    print(json.dumps({"bundle": str(args.bundle), "verified": ok, "problems": problems[:20],
                      "n_problems": len(problems)}))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_attack(args) -> int:
    env_name = args.env or "pointmass1d"
    try:
        env = make_env(env_name)
        cfg = AttackConfig(args.kind, args.steps, args.step_size,
                           args.epsilon if args.epsilon is not None else 0.1)
    except ValueError as err:
        raise InputError(str(err)) from None
    policy = load_policy(args.policy, env_name)
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    res = attacked_return(policy, env, cfg, args.episodes, rng=seed, horizon=args.horizon)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"env": env_name, "policy": _source(args.policy), "kind": cfg.kind, "epsilon": cfg.epsilon,
              "steps": cfg.steps, "step_size": cfg.step_size, "episodes": args.episodes,
              "horizon": args.horizon or env.horizon, "seed": seed,
              "mean": res.mean, "std": res.std}
    name = f"attack_{cfg.kind}.json"
    write_json(report, out / name)
    write_manifest(out, "attack", report, seed, [name], {"attack": time.perf_counter() - t0})
    print(json.dumps(report))
    return EXIT_OK


REPORT_COLUMNS = ["run", "env", "init", "policy", "model", "epsilon", "T", "N", "wcar", "wcar_per_step",
                  "variance", "theorem1_bound", "n_failed"]
ATTACK_COLUMNS = ["run", "env", "policy", "kind", "epsilon", "horizon", "episodes", "mean", "std"]


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise InputError(f"run directory not found: {root}")
    rows, attacks = [], []
    for path in sorted(root.rglob("summary.json")):
        s = json.loads(path.read_text())
        rows.append({"run": str(path.parent.relative_to(root)),
                     **{c: s.get(c) for c in REPORT_COLUMNS[1:]}})
    for path in sorted(root.rglob("attack_*.json")):
        a = json.loads(path.read_text())
        attacks.append({"run": str(path.parent.relative_to(root)),
                        **{c: a.get(c) for c in ATTACK_COLUMNS[1:]}})
    rows.sort(key=lambda r: (r["env"], r["policy"], r["model"], r["epsilon"], r["T"], r["run"]))
    out = Path(args.out_dir) if args.out_dir else root
    out.mkdir(parents=True, exist_ok=True)
    for name, columns, table in (("report.csv", REPORT_COLUMNS, rows),
                                 ("attacks.csv", ATTACK_COLUMNS, attacks)):
        with open(out / name, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(table)
    write_json({"certified": rows, "attacks": attacks}, out / "report.json")
    print(json.dumps({"rows": len(rows), "attacks": len(attacks), "out_dir": str(out)}))
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Reports usage errors as exceptions so stderr carries only the JSON error."""

    def error(self, message):
        raise UsageError(message)


class UsageError(InputError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="certrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", required=out_required)
        sp.add_argument("--env", choices=sorted(ENVIRONMENTS))

    sp = sub.add_parser("train", help="certified training; writes checkpoints and a CSV log")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("certify", help="WCAR certificate bundle for a policy/model pair")
    common(sp)
    sp.add_argument("--policy", default="builtin", help="policy checkpoint or 'builtin'")
    sp.add_argument("--model", default="exact", help="model checkpoint or 'exact'")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--delta-e", type=float)
    sp.add_argument("--init", choices=("env", "origin"), default="env",
                    help="start states: the environment's distribution or the origin")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("verify", help="replay and check a certificate bundle")
    sp.add_argument("bundle")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="empirical attacked return in the true environment")
    common(sp)
    sp.add_argument("--policy", default="builtin")
    sp.add_argument("--kind", default="gradient_mad")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--step-size", type=float, default=0.25)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="aggregate summaries under a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail(EXIT_INPUT, "usage", str(err))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as err:
        return _fail(EXIT_INPUT, "input", str(err))
    except FloatingPointError as err:
        return _fail(EXIT_FAILED, "numeric", str(err))


if __name__ == "__main__":
    sys.exit(main())

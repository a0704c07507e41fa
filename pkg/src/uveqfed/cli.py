"""Experiment runner: named presets, config parsing, CSV emission.

Each preset resolves to a fully-specified simulation plus its pass/fail
checks; identical configuration and master seed produce byte-identical
CSV output regardless of thread count.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analysis, codec, datamodel, flsim
from .errors import ConfigError, RateInfeasibleError, UVeQFedError

DEFAULT_RATES = (2.0, 3.0, 4.0, 5.0, 6.0)
MNIST_TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
MNIST_TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _write_summary(out_dir, lines):
    path = os.path.join(out_dir, "summary.txt")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _csv_path(out_dir, experiment, seed):
    return os.path.join(out_dir, f"{experiment}_{seed}.csv")


# ---------------------------------------------------------------------------
# Distortion-law validation.

def run_thm1(out_dir, seed=0, lattice="hex", zeta=codec.ZETA_RATE_ADAPTIVE,
             rate=4.0, lengths=(128, 4096), vectors=10, trials=10_000,
             threads=None, **_):
    cfg_rows = []
    lines = []
    all_pass = True
    rng = np.random.default_rng(seed)
    for m in lengths:
        cfg = codec.UVeQFedConfig(lattice=lattice, zeta=zeta, rate=rate,
                                  rate_constrained=False, master_seed=seed)
        hs = [rng.normal(size=m) for _ in range(vectors)]
        report = analysis.check_distortion_law(cfg, hs, trials,
                                         label=f"{lattice}/m{m}/",
                                         threads=threads)
        all_pass &= report.passed
        lines.extend(report.summary_lines())
        for row in report.rows:
            cfg_rows.append([lattice, str(zeta), m, row.label, row.measured,
                             row.predicted, row.ratio, row.tol_3se,
                             row.max_mean_over_se])
    path = _csv_path(out_dir, "thm1", seed)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["lattice", "zeta", "m", "label", "measured",
                         "predicted", "ratio", "tol3se", "maxMeanOverSE"])
        for row in cfg_rows:
            writer.writerow(row)
    return all_pass, lines


# ---------------------------------------------------------------------------
# Distortion-vs-rate sweeps.

def run_sweep(kind, out_dir, seed=0, rates=DEFAULT_RATES, realizations=100,
              experiment=None, **_):
    experiment = experiment or ("fig3" if kind == "iid" else "fig4")
    result = analysis.distortion_sweep(kind, rates, realizations=realizations,
                                       master_seed=seed)
    result.to_csv(_csv_path(out_dir, experiment, seed))
    lines = [f"{experiment}: {kind} 128x128, {realizations} realizations, "
             f"rates {list(rates)}"]
    ok = True
    for rate in rates:
        l2 = result.mse[("uveqfed-l2", rate)]
        l1 = result.mse[("uveqfed-l1", rate)]
        q = result.mse[("qsgd", rate)]
        rot = result.mse[("rotated", rate)]
        mask = result.mse[("masked", rate)]
        ordered = l2 < l1 < q < min(rot, mask)
        ok &= ordered
        lines.append(f"[{'PASS' if ordered else 'FAIL'}] R={rate}: "
                     f"l2={l2:.3g} < l1={l1:.3g} < qsgd={q:.3g} < "
                     f"min(rot={rot:.3g}, mask={mask:.3g})")
    return ok, lines, result


# ---------------------------------------------------------------------------
# Synthetic federation presets.

def calibrate_rms_cap(model, users, base_cfg, scale=2.0):
    """Update-RMS cap from one uncompressed dry round (shared, seed-fixed)."""
    probe = flsim.FederationConfig(
        num_users=base_cfg.num_users, tau=base_cfg.tau, total_rounds=1,
        compressor=flsim.CompressorSpec(kind="none"), alphas=base_cfg.alphas,
        schedule=base_cfg.schedule, batch_size=base_cfg.batch_size,
        init_std=base_cfg.init_std, master_seed=base_cfg.master_seed,
        track_shadow=False)
    w0 = datamodel.init_weights(model, probe.master_seed, probe.init_std)
    from .streams import DOMAIN_SAMPLING, derived_rng
    rms = 0.0
    for k, ds in enumerate(users):
        w = np.array(w0, copy=True)
        rng = derived_rng(probe.master_seed, DOMAIN_SAMPLING, k)
        for j in range(probe.tau):
            w, _ = flsim.local_step(model, ds, w, probe.step_size(j), rng,
                                    probe.batch_size)
        h = w - w0
        rms = max(rms, float(np.sqrt(np.mean(h * h))))
    return scale * max(rms, 1e-12)


def _seeded_runs(model, users, fed_template, seeds):
    logs = []
    for s in seeds:
        cfg = flsim.FederationConfig(
            num_users=fed_template.num_users, tau=fed_template.tau,
            total_rounds=fed_template.total_rounds,
            compressor=fed_template.compressor, alphas=fed_template.alphas,
            schedule=fed_template.schedule, batch_size=fed_template.batch_size,
            init_std=fed_template.init_std, master_seed=s,
            threads=fed_template.threads)
        logs.append(flsim.run_federation(cfg, model, users))
    return logs


def run_thm2(out_dir, seed=0, users_sweep=(5, 10, 20, 40), tau=4, rate=4.0,
             rounds=60, num_seeds=20, dim=24, samples_per_user=48, **_):
    lines = []
    ok = True
    mean_err = {}
    rows = []
    for num_users in users_sweep:
        model, users = datamodel.make_linreg_users(
            num_users, dim, samples_per_user, seed=seed + 1,
            heterogeneity=0.3, lam=0.1)
        rho_s, rho_c = datamodel.smooth_strong_convex_constants(model, users)
        alphas = tuple(np.full(num_users, 1.0 / num_users))
        base = flsim.FederationConfig(
            num_users=num_users, tau=tau, total_rounds=rounds,
            compressor=flsim.CompressorSpec(kind="uveqfed-l2", rate=rate),
            alphas=alphas, schedule=("decay", rho_c, rho_s),
            batch_size=1, init_std=0.0, master_seed=seed)
        cap = calibrate_rms_cap(model, users, base)
        base = flsim.FederationConfig(
            num_users=num_users, tau=tau, total_rounds=rounds,
            compressor=flsim.CompressorSpec(kind="uveqfed-l2", rate=rate,
                                            norm_rms_cap=cap),
            alphas=alphas, schedule=("decay", rho_c, rho_s),
            batch_size=1, init_std=0.0, master_seed=seed)
        logs = _seeded_runs(model, users, base,
                             [seed + 100 + i for i in range(num_seeds)])
        xi_sq = analysis.estimate_xi_sq(logs, model, users)
        report = analysis.check_aggregation_bound(logs, xi_sq, np.asarray(alphas))
        ok &= report.passed
        mean_err[num_users] = report.mean_error
        lines.append(f"K={num_users}: " + report.summary_lines()[0])
        for i in range(len(report.measured_mean)):
            rows.append([num_users, i, report.measured_mean[i],
                         report.rhs_mean[i]])
    k_lo, k_hi = min(users_sweep), max(users_sweep)
    # Ideal decay over 5 -> 40 users is 1/8; the bar allows 1.5x slack.
    decay = mean_err[k_hi] <= mean_err[k_lo] / 6.0
    ok &= decay
    lines.append(f"[{'PASS' if decay else 'FAIL'}] 1/K decay: "
                 f"err(K={k_hi})={mean_err[k_hi]:.3g} vs "
                 f"err(K={k_lo})/6={mean_err[k_lo] / 6.0:.3g}")
    path = _csv_path(out_dir, "thm2", seed)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "round", "measuredMean", "boundRHS"])
        for row in rows:
            writer.writerow(row)
    return ok, lines


def run_thm3(out_dir, seed=0, num_users=10, tau=4, rate=4.0, rounds=400,
             num_seeds=20, dim=16, samples_per_user=40, **_):
    model, users = datamodel.make_linreg_users(
        num_users, dim, samples_per_user, seed=seed + 2,
        heterogeneity=1.0, lam=0.3)
    rho_s, rho_c = datamodel.smooth_strong_convex_constants(model, users)
    alphas = tuple(np.full(num_users, 1.0 / num_users))
    base = flsim.FederationConfig(
        num_users=num_users, tau=tau, total_rounds=rounds,
        compressor=flsim.CompressorSpec(kind="uveqfed-l2", rate=rate),
        alphas=alphas, schedule=("decay", rho_c, rho_s),
        batch_size=1, init_std=0.0, master_seed=seed)
    cap = calibrate_rms_cap(model, users, base, scale=0.5)
    base = flsim.FederationConfig(
        num_users=num_users, tau=tau, total_rounds=rounds,
        compressor=flsim.CompressorSpec(kind="uveqfed-l2", rate=rate,
                                        norm_rms_cap=cap),
        alphas=alphas, schedule=("decay", rho_c, rho_s),
        batch_size=1, init_std=0.0, master_seed=seed)
    logs = _seeded_runs(model, users, base,
                         [seed + 300 + i for i in range(num_seeds)])
    w_opt, f_opt = datamodel.global_optimum(model, users, alphas)
    psi = datamodel.heterogeneity_gap(model, users, alphas)
    xi_sq = analysis.estimate_xi_sq(logs, model, users)
    zeta = codec.resolve_zeta(codec.ZETA_RATE_ADAPTIVE, rate,
                              -(-model.param_count // 2))
    coeff_max = max(float(np.max(c)) for log in logs
                    for c in log.distortion_coeff)
    constants = analysis.TheoryConstants(
        rho_s=rho_s, rho_c=rho_c, tau=tau, zeta=zeta,
        num_blocks=logs[0].num_blocks, sigma_sq=coeff_max / zeta ** 2,
        psi=psi, xi_sq=tuple(xi_sq), alphas=alphas)
    delta0 = float(w_opt @ w_opt)  # zero initialization for convex presets
    report = analysis.check_convergence_bound(logs, constants, f_opt, delta0)
    path = _csv_path(out_dir, "thm3", seed)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "suboptMean", "boundRHS"])
        for i in range(len(report.steps)):
            writer.writerow([report.steps[i], repr(report.subopt_mean[i]),
                             repr(report.rhs[i])])
    lines = [f"thm3: K={num_users}, tau={tau}, psi={psi:.4g}, "
             f"rho_s={rho_s:.3g}, rho_c={rho_c:.3g}, b={constants.b:.4g}"]
    lines.extend(report.summary_lines())
    return report.passed, lines


# ---------------------------------------------------------------------------
# MNIST presets.

def find_mnist(mnist_dir):
    """Paths of the four IDX files, or None if any is missing."""
    if not mnist_dir:
        return None
    paths = []
    for name in MNIST_TRAIN_FILES + MNIST_TEST_FILES:
        candidates = [os.path.join(mnist_dir, name),
                      os.path.join(mnist_dir, name + ".idx"),
                      os.path.join(mnist_dir, name.replace("-idx", ".idx"))]
        found = next((p for p in candidates if os.path.exists(p)), None)
        if found is None:
            return None
        paths.append(found)
    return paths


def run_mnist(out_dir, seed=0, num_users=15, samples_per_user=1000,
              partition="sequential", rate=4.0, rounds=200, eta=0.01, tau=1,
              compressors=("uveqfed-l2", "uveqfed-l1", "qsgd", "none"),
              mnist_dir=None, threads=1, full=False, experiment="mnist-k15",
              **_):
    paths = find_mnist(mnist_dir)
    if paths is None:
        raise ConfigError(
            f"MNIST IDX files not found under {mnist_dir!r}; pass --mnist-dir "
            f"pointing at {', '.join(MNIST_TRAIN_FILES + MNIST_TEST_FILES)}")
    train = datamodel.load_mnist_idx(paths[0], paths[1])
    test = datamodel.load_mnist_idx(paths[2], paths[3])
    total = num_users * samples_per_user
    if train.n < total:
        raise ConfigError(f"need {total} training samples, file has {train.n}")
    train = train.subset(np.arange(total))
    users = datamodel.partition(train, num_users, partition, seed)
    model = datamodel.MlpClassifier(in_dim=train.dim, hidden=50, classes=10)
    if full:
        rounds = rounds * 5
    final_acc = {}
    lines = [f"{experiment}: K={num_users}, n_k={samples_per_user}, "
             f"partition={partition}, R={rate}, rounds={rounds}"]
    for comp in compressors:
        spec = flsim.CompressorSpec(kind=comp) if comp == "none" else \
            flsim.CompressorSpec(kind=comp, rate=rate)
        base = flsim.FederationConfig(
            num_users=num_users, tau=tau, total_rounds=rounds,
            compressor=spec, schedule=("constant", eta), batch_size=None,
            init_std=0.01, master_seed=seed, track_shadow=False,
            threads=threads)
        if comp.startswith("uveqfed"):
            cap = calibrate_rms_cap(model, users, base)
            spec = flsim.CompressorSpec(kind=comp, rate=rate, norm_rms_cap=cap)
            base = flsim.FederationConfig(
                num_users=num_users, tau=tau, total_rounds=rounds,
                compressor=spec, schedule=("constant", eta), batch_size=None,
                init_std=0.01, master_seed=seed, track_shadow=False,
                threads=threads)
        log = flsim.run_federation(base, model, users, test_set=test)
        log.to_csv(_csv_path(out_dir, f"{experiment}_{comp}", seed))
        final_acc[comp] = log.accuracy[-1]
        lines.append(f"  {comp}: final accuracy {log.accuracy[-1]:.4f}, "
                     f"bits/user {log.bits_per_user[-1]:.0f}")
    ok = True
    if "uveqfed-l2" in final_acc and "qsgd" in final_acc:
        cond = final_acc["uveqfed-l2"] >= final_acc["qsgd"]
        ok &= cond
        lines.append(f"[{'PASS' if cond else 'FAIL'}] uveqfed-l2 accuracy >= qsgd")
    if "uveqfed-l2" in final_acc and "none" in final_acc:
        cond = final_acc["uveqfed-l2"] >= final_acc["none"] - 0.03
        ok &= cond
        lines.append(f"[{'PASS' if cond else 'FAIL'}] uveqfed-l2 within 3 "
                     f"points of uncompressed")
    return ok, lines, final_acc


# ---------------------------------------------------------------------------
# Preset table and entry point.

PRESETS = {
    "thm1": ("distortion law: conditional error energy and zero-mean check, "
             "fixed unit-scale lattices"),
    "fig3": ("distortion vs rate on i.i.d. Gaussian 128x128 matrices, "
             "five compressors, 100 realizations"),
    "fig4": ("distortion vs rate on exponentially correlated 128x128 "
             "matrices, five compressors, 100 realizations"),
    "thm2": ("aggregation-error bound and 1/K decay on synthetic "
             "least-squares federation, K in {5,10,20,40}"),
    "thm3": ("convergence bound and O(1/t) slope on a heterogeneous "
             "least-squares federation, K=10, decaying steps"),
    "mnist-k15": ("K=15 sequential-partition MNIST run, 1000 samples/user, "
                  "one-hidden-layer MLP, R=4, 200 rounds (5x with --full)"),
    "mnist-k100": ("K=100 i.i.d.-partition MNIST run, 500 samples/user, "
                   "one-hidden-layer MLP, 200 rounds (5x with --full)"),
    "custom": ("fully config-driven run; requires --config"),
}

_CONFIG_KEYS = {
    "experiment", "seed", "out", "rate", "rates", "lattice", "zeta", "users",
    "tau", "partition", "compressor", "compressors", "threads", "full",
    "mnist_dir", "rounds", "realizations", "num_seeds", "eta",
    "samples_per_user",
}


def _load_config(path):
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uveqfed",
        description="Dithered lattice quantization for federated learning: "
                    "experiment presets and validators.")
    parser.add_argument("--list", action="store_true",
                        help="list experiment presets and exit")
    sub = parser.add_subparsers(dest="command")
    run = sub.add_parser("run", help="run an experiment preset")
    run.add_argument("experiment", choices=sorted(PRESETS))
    run.add_argument("--config", help="JSON config file; flags override it")
    run.add_argument("--compressor", choices=flsim.COMPRESSOR_KINDS)
    run.add_argument("--rate", type=float)
    run.add_argument("--rates", type=lambda s: tuple(float(x) for x in s.split(",")))
    run.add_argument("--lattice", choices=("scalar", "hex"))
    run.add_argument("--zeta")
    run.add_argument("--users", type=int)
    run.add_argument("--tau", type=int)
    run.add_argument("--partition")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--threads", type=int)
    run.add_argument("--full", action="store_true", default=None)
    run.add_argument("--mnist-dir", dest="mnist_dir")
    run.add_argument("--rounds", type=int)
    run.add_argument("--realizations", type=int)
    run.add_argument("--num-seeds", dest="num_seeds", type=int)
    return parser


def _list_presets():
    width = max(len(name) for name in PRESETS)
    for name in sorted(PRESETS):
        print(f"{name:<{width}}  {PRESETS[name]}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list:
        _list_presets()
        return 0
    if args.command != "run":
        parser.print_help()
        return 2
    options = {}
    if args.config:
        try:
            options.update(_load_config(args.config))
        except (ConfigError, OSError, json.JSONDecodeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    for key in ("compressor", "rate", "rates", "lattice", "zeta", "users",
                "tau", "partition", "seed", "out", "threads", "full",
                "mnist_dir", "rounds", "realizations", "num_seeds"):
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    experiment = options.pop("experiment", args.experiment)
    out_dir = options.pop("out", "results")
    os.makedirs(out_dir, exist_ok=True)
    seed = int(options.pop("seed", 0))
    try:
        ok, lines = dispatch(experiment, out_dir, seed, options)
    except RateInfeasibleError as exc:
        print(f"rate infeasible: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, UVeQFedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = _write_summary(out_dir, lines)
    print("\n".join(lines))
    print(f"summary written to {summary}")
    return 0 if ok else 1


def dispatch(experiment, out_dir, seed, options):
    opts = dict(options)
    if experiment == "thm1":
        kwargs = {}
        if "lattice" in opts:
            kwargs["lattice"] = opts["lattice"]
        if "zeta" in opts:
            kwargs["zeta"] = _parse_zeta(opts["zeta"])
        if "rate" in opts:
            kwargs["rate"] = opts["rate"]
        if "threads" in opts:
            kwargs["threads"] = opts["threads"]
        ok, lines = run_thm1(out_dir, seed=seed, **kwargs)
        return ok, lines
    if experiment in ("fig3", "fig4"):
        kind = "iid" if experiment == "fig3" else "correlated"
        ok, lines, _ = run_sweep(kind, out_dir, seed=seed,
                                 rates=opts.get("rates", DEFAULT_RATES),
                                 realizations=opts.get("realizations", 100),
                                 experiment=experiment)
        return ok, lines
    if experiment == "thm2":
        return run_thm2(out_dir, seed=seed,
                        tau=opts.get("tau", 4), rate=opts.get("rate", 4.0),
                        rounds=opts.get("rounds", 60),
                        num_seeds=opts.get("num_seeds", 20))
    if experiment == "thm3":
        return run_thm3(out_dir, seed=seed,
                        num_users=opts.get("users", 10),
                        tau=opts.get("tau", 4), rate=opts.get("rate", 4.0),
                        rounds=opts.get("rounds", 400),
                        num_seeds=opts.get("num_seeds", 20))
    if experiment in ("mnist-k15", "mnist-k100"):
        defaults = dict(num_users=15, samples_per_user=1000,
                        partition="sequential")
        if experiment == "mnist-k100":
            defaults = dict(num_users=100, samples_per_user=500,
                            partition="iid")
        comp = opts.get("compressor")
        compressors = (comp,) if comp else opts.get(
            "compressors", ("uveqfed-l2", "uveqfed-l1", "qsgd", "none"))
        ok, lines, _ = run_mnist(
            out_dir, seed=seed, experiment=experiment,
            num_users=opts.get("users", defaults["num_users"]),
            samples_per_user=opts.get("samples_per_user",
                                      defaults["samples_per_user"]),
            partition=opts.get("partition", defaults["partition"]),
            rate=opts.get("rate", 4.0), rounds=opts.get("rounds", 200),
            eta=opts.get("eta", 0.01), compressors=compressors,
            mnist_dir=opts.get("mnist_dir"),
            threads=opts.get("threads", 1), full=bool(opts.get("full")))
        return ok, lines
    if experiment == "custom":
        raise ConfigError("custom experiments need a --config file naming "
                          "one of the built-in experiments plus overrides")
    raise ConfigError(f"unknown experiment {experiment!r}")


def _parse_zeta(value):
    if isinstance(value, str) and value not in (codec.ZETA_THREE_SIGMA,
                                                codec.ZETA_RATE_ADAPTIVE):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(
                f"zeta must be a number, {codec.ZETA_THREE_SIGMA!r} or "
                f"{codec.ZETA_RATE_ADAPTIVE!r}") from exc
    return value


if __name__ == "__main__":
    sys.exit(main())

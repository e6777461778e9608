"""Command-line entry points.

Subcommands: prepare-data, train, certify, verify, report.  One command is
one process; every number a report emits traces back to a manifest (config,
seeds, data hashes).  Exit codes: 0 ok, 2 config error, 3 invariant
violation, 4 numeric failure.
"""

import argparse
import json
import os
import sys
from importlib import resources

from . import attacks, backend, bounds, datasets, finiteworld, nets, posterior, risks, training
from .errors import ConfigError, ContractError, NumericError

RUN_SCHEMA_VERSION = 1

EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_NUMERIC = 4


def cache_dir(default="pbvote-cache"):
    return os.environ.get("PBVOTE_CACHE_DIR", default)


# ---------------------------------------------------------------------------
# Run configuration.

def _require(cfg, key, ctx):
    if key not in cfg:
        raise ConfigError(f"missing {ctx}.{key} in run config")
    return cfg[key]


def load_run_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if cfg.get("schema_version") != RUN_SCHEMA_VERSION:
        raise ConfigError(f"run config schema_version must be {RUN_SCHEMA_VERSION}")
    for key in ("master_seed", "output_dir", "arch", "data", "train", "defense"):
        _require(cfg, key, "config")
    return cfg


def spec_from_arch(arch: dict) -> nets.NetworkSpec:
    preset = arch.get("preset", "mlp")
    if preset == "mlp":
        return nets.mlp(int(_require(arch, "in_dim", "arch")),
                        tuple(arch.get("hidden", [128])))
    if preset == "conv28":
        return nets.conv_28x28()
    raise ConfigError(f"unknown arch preset {arch.get('preset')!r}")


def _load_prepared(manifest_path):
    try:
        with open(manifest_path) as fh:
            dm = json.load(fh)
        out = {}
        for split in ("prior", "posterior", "test"):
            entry = dm["splits"][split]
            out[split] = datasets.load_dataset(entry["path"], entry["hash"])
        return out["prior"], out["posterior"], out["test"]
    except (KeyError, FileNotFoundError) as exc:
        raise ConfigError(f"bad dataset manifest {manifest_path!r}: {exc}")


def load_splits(data_cfg: dict, master_seed: int):
    kind = _require(data_cfg, "kind", "data")
    if kind == "synth2d":
        sizes = [int(s) for s in _require(data_cfg, "sizes", "data")]
        margin = float(data_cfg.get("margin", 0.3))
        noise = float(data_cfg.get("noise", 0.05))
        seed = int(data_cfg.get("seed", master_seed))
        pool = datasets.synth_2d(sizes[0] + sizes[1], margin, noise, seed)
        test = datasets.synth_2d(sizes[2], margin, noise, seed + 1)
        s_prime, s, t = datasets.split_three(pool, test, sizes, seed)
        return s_prime, s, t
    if kind == "prepared":
        return _load_prepared(_require(data_cfg, "manifest", "data"))
    raise ConfigError(f"unknown data kind {kind!r}")


# ---------------------------------------------------------------------------
# prepare-data

def cmd_prepare_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "synth2d":
        sizes = [int(s) for s in args.sizes.split(",")]
        pool = datasets.synth_2d(sizes[0] + sizes[1], args.margin, args.noise, args.seed)
        test = datasets.synth_2d(sizes[2], args.margin, args.noise, args.seed + 1)
        s_prime, s, t = datasets.split_three(pool, test, sizes, args.seed)
        pair = "synth2d"
    elif args.kind == "mnist-pair":
        for p in (args.train_images, args.train_labels, args.test_images, args.test_labels):
            if not p or not os.path.exists(p):
                raise ConfigError(f"IDX file {p!r} not found (no downloading here; "
                                  "supply local files)")
        with open(args.train_images, "rb") as fh:
            imgs = fh.read()
        with open(args.train_labels, "rb") as fh:
            lbls = fh.read()
        train = datasets.make_pair(*datasets.parse_idx(imgs, lbls),
                                   args.digit_a, args.digit_b)
        with open(args.test_images, "rb") as fh:
            imgs = fh.read()
        with open(args.test_labels, "rb") as fh:
            lbls = fh.read()
        test = datasets.make_pair(*datasets.parse_idx(imgs, lbls),
                                  args.digit_a, args.digit_b)
        sizes = [int(s) for s in args.sizes.split(",")]
        s_prime, s, t = datasets.split_three(train, test, sizes, args.seed)
        pair = f"{args.digit_a}vs{args.digit_b}"
    else:
        raise ConfigError(f"unknown data kind {args.kind!r}")

    cdir = args.cache_dir or cache_dir(os.path.join(args.out, "cache"))
    manifest = {"schema_version": 1, "pair": pair, "seed": args.seed, "splits": {}}
    for name, ds in (("prior", s_prime), ("posterior", s), ("test", t)):
        path = datasets.save_dataset(ds, cdir)
        manifest["splits"][name] = {"path": path, "hash": ds.content_hash(),
                                    "size": len(ds)}
    out_path = os.path.join(args.out, "datasets.json")
    with open(out_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"wrote {out_path}")
    for name in ("prior", "posterior", "test"):
        e = manifest["splits"][name]
        print(f"  {name}: {e['size']} examples, hash {e['hash'][:12]}")
    return 0


# ---------------------------------------------------------------------------
# train

def run_training(cfg: dict):
    """Execute both training steps; returns (manifest, outdir)."""
    spec = spec_from_arch(cfg["arch"])
    master_seed = int(cfg["master_seed"])
    s_prime, s, t = load_splits(cfg["data"], master_seed)
    if s_prime.dim != spec.in_dim:
        raise ConfigError(f"data dimension {s_prime.dim} != network input {spec.in_dim}")

    tr = dict(cfg["train"])
    tr_kwargs = {
        "epochs_prior": int(tr.get("epochs_prior", 20)),
        "epochs_posterior": int(tr.get("epochs_posterior", 20)),
        "lr": float(tr.get("lr", 1e-4)),
        "lr_posterior": float(tr["lr_posterior"]) if "lr_posterior" in tr else None,
        "batch_size": int(tr.get("batch_size", 64)),
        "lam": float(tr.get("lambda", 0.01)),
        "delta": float(tr.get("delta", 0.05)),
        "c_init": float(tr.get("c_init", 0.05)),
        "bound": tr.get("bound", "seeger"),
        "master_seed": master_seed,
    }
    defense = attacks.AttackConfig.from_dict(cfg["defense"])
    tcfg = training.TrainConfig(defense=defense, **tr_kwargs)

    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)

    prior, trace = training.train_prior(spec, tcfg, s_prime, s)
    epoch_ckpts = []
    for e, mean in enumerate(trace.means):
        p = os.path.join(outdir, f"prior_epoch_{e:03d}.ckpt")
        nets.save_weights(p, spec, mean)
        epoch_ckpts.append(os.path.basename(p))
    q, extras = training.train_posterior(spec, tcfg, prior, s)

    prior_path = os.path.join(outdir, "prior.ckpt")
    post_path = os.path.join(outdir, "posterior.ckpt")
    posterior.save_posterior(prior_path, prior, master_seed)
    posterior.save_posterior(post_path, q, master_seed)

    manifest = training.build_manifest(
        tcfg, spec, s_prime, s, trace, extras,
        checkpoints={"prior": "prior.ckpt", "posterior": "posterior.ckpt",
                     "prior_epochs": epoch_ckpts})
    manifest["data"]["test_hash"] = t.content_hash()
    manifest["data"]["test_size"] = len(t)
    manifest["run_config"] = cfg
    training.save_manifest(os.path.join(outdir, "manifest.json"), manifest)
    return manifest, outdir


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    manifest, outdir = run_training(cfg)
    print(f"trained; manifest at {os.path.join(outdir, 'manifest.json')}")
    print(f"  selected prior epoch: {manifest['chosen_epoch']}")
    print(f"  KL(Q||P) = {manifest['kl_final']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# certify

def certify_run(manifest: dict, outdir: str, attack_cfg: attacks.AttackConfig,
                n: int, n_voters: int, save_sets=False):
    """Evaluate risks and certificates for one trained run.

    The perturbed sets are generated against one network sampled from the
    reference distribution (the attack seed keys all evaluation randomness);
    every estimator shares one ensemble of n_voters samples from Q.
    """
    spec = nets.NetworkSpec.from_dict(manifest["spec"])
    cfg = training.TrainConfig.from_dict(manifest["config"])
    prior, _ = posterior.load_posterior(os.path.join(outdir, manifest["checkpoints"]["prior"]))
    q, _ = posterior.load_posterior(os.path.join(outdir, manifest["checkpoints"]["posterior"]))

    run_cfg = manifest["run_config"]
    s_prime, s, t = load_splits(run_cfg["data"], int(run_cfg["master_seed"]))
    for ds, key in ((s, "posterior_split_hash"),):
        if ds.content_hash() != manifest["data"][key]:
            raise ContractError("posterior split no longer matches the manifest hash")
    if t.content_hash() != manifest["data"]["test_hash"]:
        raise ContractError("test split no longer matches the manifest hash")

    eval_seed = attack_cfg.seed
    w_target = attacks.attack_target_for_eval(prior, eval_seed)
    pert_s = attacks.build_eval_set(attack_cfg, spec, w_target, s.x, s.y, n,
                                    eval_seed, tag="perturbed-train")
    pert_t = attacks.build_eval_set(attack_cfg, spec, w_target, t.x, t.y, n,
                                    eval_seed, tag="perturbed-test")
    ens = posterior.draw_ensemble(q, n_voters, eval_seed, tag="certify-ensemble")

    scores_s = risks.voter_score_tensor(ens, pert_s)
    scores_t = risks.voter_score_tensor(ens, pert_t)

    if not (risks.factor2_pointwise_holds(ens, pert_s, scores_s)
            and risks.factor2_pointwise_holds(ens, pert_t, scores_t)):
        raise ContractError("factor-2 pointwise relation violated (0-1 vs surrogate)")

    bi = bounds.BoundInputs(
        emp_avg_surrogate=risks.avg_surrogate(ens, pert_s, scores_s).value,
        emp_avgmax_surrogate=risks.avgmax_surrogate(ens, pert_s, scores_s).value,
        kl=posterior.kl_gaussians(q, prior),
        tv=bounds.tv_term(ens, pert_s, scores_s),
        m=len(s), n=n, n_voters=n_voters,
        n_priors=int(manifest["n_priors"]), delta=cfg.delta,
    )
    report = bounds.assemble_report(
        bi,
        test_avg01=risks.avg_risk_01(ens, pert_t, scores_t).value,
        test_avgmax01=risks.avgmax_risk_01(ens, pert_t, scores_t).value,
        test_avg_surrogate=risks.avg_surrogate(ens, pert_t, scores_t).value,
        test_avgmax_surrogate=risks.avgmax_surrogate(ens, pert_t, scores_t).value,
        defense=cfg.defense.to_dict(), attack=attack_cfg.to_dict(),
        budget=attack_cfg.budget,
        seeds={"train": cfg.master_seed, "certify": eval_seed},
        backend=backend.active_backend(),
        extra={"chosen_epoch": manifest["chosen_epoch"],
               "c_final": manifest.get("c_final")},
    )
    if report.bound_avg_seeger > report.bound_avg_pinsker:
        raise ContractError("seeger certificate exceeded its pinsker relaxation")
    if save_sets:
        meta = {"dataset_hash": manifest["data"]["posterior_split_hash"],
                "seed": eval_seed}
        attacks.save_perturbed_set(os.path.join(outdir, "perturbed_train.bin"),
                                   pert_s, attack_cfg, meta)
        meta = {"dataset_hash": manifest["data"]["test_hash"], "seed": eval_seed}
        attacks.save_perturbed_set(os.path.join(outdir, "perturbed_test.bin"),
                                   pert_t, attack_cfg, meta)
    return report


def _attack_from_args(args) -> attacks.AttackConfig:
    return attacks.AttackConfig(
        kind=args.attack_kind, budget=args.budget, iterations=args.iterations,
        step_size=args.step_size, uniform_offset=args.uniform_offset,
        n_perturbations=args.n, clamp_input=not args.no_clamp, seed=args.seed)


def cmd_certify(args) -> int:
    outdir = os.path.dirname(os.path.abspath(args.manifest))
    manifest = training.load_manifest(args.manifest)
    attack_cfg = _attack_from_args(args)
    report = certify_run(manifest, outdir, attack_cfg, args.n, args.n_voters,
                         save_sets=args.save_sets)
    out = args.out or os.path.join(outdir, "report.json")
    bounds.save_report(out, report)
    if args.csv:
        fresh = not os.path.exists(args.csv)
        with open(args.csv, "a") as fh:
            if fresh:
                fh.write(bounds.csv_header() + "\n")
            fh.write(bounds.csv_row(report) + "\n")
    print(f"report written to {out}")
    print(f"  test avg risk        = {report.test_avg01:.4f}")
    print(f"  certificate (seeger) = {report.cert_avg_seeger:.4f}")
    print(f"  test avgmax risk     = {report.test_avgmax01:.4f}")
    print(f"  certificate (avgmax) = {report.cert_avgmax:.4f}")
    return 0


# ---------------------------------------------------------------------------
# verify

def stock_fixtures():
    out = []
    root = resources.files("pbvote").joinpath("fixtures")
    for entry in sorted(root.iterdir()):
        if entry.name.endswith(".json"):
            out.append((entry.name, finiteworld.world_from_json(
                json.loads(entry.read_text()))))
    return out


def cmd_verify(args) -> int:
    fixtures = stock_fixtures()
    for path in args.fixture or []:
        fixtures.append((os.path.basename(path), finiteworld.load_world(path)))
    ok, failures, count = finiteworld.run_verification(
        master_seed=args.seed, n_worlds=args.worlds, fixture_worlds=fixtures)
    names = ("risk_chain", "tv_sandwich", "perturbed_pushforward_identity",
             "adversarial_pushforward_identity", "factor2_surrogate")
    failed_names = {f[1] for f in failures}
    for name in names:
        status = "FAIL" if name in failed_names else "PASS"
        print(f"{status} {name} [{count} worlds]")
    for tag, name, detail in failures:
        print(f"  violated on {tag}: {name} {detail}", file=sys.stderr)
    return 0 if ok else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    rows = [bounds.csv_row(bounds.load_report(p)) for p in args.reports]
    text = bounds.csv_header() + "\n" + "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbvote",
                                description="robust Gaussian majority votes with risk certificates")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("prepare-data", help="build and cache dataset splits")
    d.add_argument("--kind", choices=("synth2d", "mnist-pair"), required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--cache-dir", default=None)
    d.add_argument("--sizes", default="1400,1000,400",
                   help="prior,posterior,test sizes")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--margin", type=float, default=0.3)
    d.add_argument("--noise", type=float, default=0.05)
    d.add_argument("--train-images"), d.add_argument("--train-labels")
    d.add_argument("--test-images"), d.add_argument("--test-labels")
    d.add_argument("--digit-a", type=int, default=1)
    d.add_argument("--digit-b", type=int, default=7)
    d.set_defaults(func=cmd_prepare_data)

    tr = sub.add_parser("train", help="run both training steps from a config file")
    tr.add_argument("--config", required=True)
    tr.set_defaults(func=cmd_train)

    ce = sub.add_parser("certify", help="evaluate risks and certificates for a run")
    ce.add_argument("--manifest", required=True)
    ce.add_argument("--attack-kind", default="pgd_u",
                    choices=("none", "unif", "pgd_u", "ifgsm_u"))
    ce.add_argument("--budget", type=float, default=0.1)
    ce.add_argument("--iterations", type=int, default=100)
    ce.add_argument("--step-size", type=float, default=0.008)
    ce.add_argument("--uniform-offset", type=float, default=0.01)
    ce.add_argument("--n", type=int, default=10, help="perturbations per example")
    ce.add_argument("--n-voters", type=int, default=100)
    ce.add_argument("--seed", type=int, default=0, help="evaluation master seed")
    ce.add_argument("--no-clamp", action="store_true")
    ce.add_argument("--save-sets", action="store_true",
                    help="persist the perturbed record streams")
    ce.add_argument("--out", default=None)
    ce.add_argument("--csv", default=None)
    ce.set_defaults(func=cmd_certify)

    ve = sub.add_parser("verify", help="run the finite-world invariant suite")
    ve.add_argument("--seed", type=int, default=0)
    ve.add_argument("--worlds", type=int, default=500)
    ve.add_argument("--fixture", action="append")
    ve.set_defaults(func=cmd_verify)

    re = sub.add_parser("report", help="merge report JSONs into one CSV table")
    re.add_argument("reports", nargs="+")
    re.add_argument("--out", default=None)
    re.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(f"  snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

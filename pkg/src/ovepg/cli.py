"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``); explicit flags
override config fields. The default seed comes from ``OVEPG_SEED`` when
neither the config nor ``--seed`` sets one.
"""

import argparse
import json
import logging
import os
import sys

from .errors import OvePGError
from .experiments import ExperimentConfig, run_experiment
from .kernels import KERNELS
from .likelihoods import LIKELIHOODS

SEED_ENV = "OVEPG_SEED"


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags given on the command line take precedence")
    p.add_argument("--kernel", choices=KERNELS, help="kernel family")
    p.add_argument("--chains", type=int, help="number of independent Gibbs chains")
    p.add_argument("--gibbs-steps", type=int, help="Gibbs steps per chain")
    p.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--out", help="output directory for report.json and CSV tables")
    p.add_argument("--workers", type=int, help="worker processes for independent repeats")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ovepg",
        description="Gaussian-process classification with Polya-Gamma augmented one-vs-each likelihoods.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="store a model for a CSV training set, optionally learning kernel hyperparameters")
    _add_common(p)
    p.add_argument("--data", help="training CSV (f1,...,fD,label with header)")
    p.add_argument("--feature-map", help="CSV of affine feature-map weights followed by a bias row")
    p.add_argument("--objective", choices=("ML", "PL"), help="marginal or predictive likelihood")
    p.add_argument("--epochs", type=int, help="training epochs; 0 keeps the given hyperparameters")
    p.add_argument("--episodes-per-epoch", type=int, help="episodes sampled from the training set per epoch")
    p.add_argument("--support-per-class", type=int, help="support examples per class in each training episode")
    p.add_argument("--lr", type=float, help="Adam learning rate")

    p = sub.add_parser("predict", help="class probabilities for query points under a fitted model")
    _add_common(p)
    p.add_argument("--model", help="model.json written by fit")
    p.add_argument("--query", help="query CSV; a trailing label column enables calibration metrics")
    p.add_argument("--nodes", type=int, help="Gauss-Hermite nodes per dimension")

    p = sub.add_parser("iris-sweep", help="accuracy, Brier, ECE and ELBO on 2D Iris over training-set sizes")
    _add_common(p)
    p.add_argument("--data", help="Iris CSV (default: the bundled copy)")
    p.add_argument("--per-class", type=int, nargs="+", help="support examples per class")
    p.add_argument("--repeats", type=int, help="random splits per training-set size")
    p.add_argument("--likelihoods", nargs="+", choices=LIKELIHOODS, help="likelihoods to compare")

    p = sub.add_parser("conf-hist", help="max-confidence histogram of normalized likelihoods under N(0, 1) logits")
    _add_common(p)
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--sims", type=int, help="number of simulated logit vectors")
    p.add_argument("--likelihoods", nargs="+", choices=LIKELIHOODS, help="likelihoods to simulate")

    p = sub.add_parser("likelihood-grid", help="likelihood and posterior grids over (f1, f2) with f3 = 0")
    _add_common(p)
    p.add_argument("--grid-points", type=int, help="grid points per axis")
    p.add_argument("--likelihoods", nargs="+", choices=LIKELIHOODS, help="likelihoods to evaluate")

    p = sub.add_parser("validate", help="run the oracle suite; exits 1 if any check fails")
    _add_common(p)
    return parser


# flags whose attribute name equals the config field they override
_OVERRIDES = (
    "chains", "gibbs_steps", "seed", "out", "workers",
    "data", "feature_map", "objective", "epochs", "episodes_per_epoch", "support_per_class", "lr",
    "model", "query", "nodes",
    "per_class", "repeats", "likelihoods", "classes", "sims", "grid_points",
)

_DEFAULT_LIKELIHOODS = {"conf-hist": list(LIKELIHOODS), "likelihood-grid": list(LIKELIHOODS)}


def config_from_args(args, environ=os.environ):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        if raw.get("kind", args.command) != args.command:
            raise OvePGError(f"config is for {raw['kind']!r}, not {args.command!r}")
    raw["kind"] = args.command
    if "seed" not in raw and environ.get(SEED_ENV):
        raw["seed"] = int(environ[SEED_ENV])
    if "likelihoods" not in raw and args.command in _DEFAULT_LIKELIHOODS:
        raw["likelihoods"] = _DEFAULT_LIKELIHOODS[args.command]
    if "out" not in raw:
        raw["out"] = os.path.join("results", args.command)
    for name in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    if args.kernel is not None:
        raw["kernel"] = dict(raw.get("kernel", {}), kind=args.kernel)
    return ExperimentConfig.from_dict(raw)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        rep = run_experiment(cfg)
    except (OvePGError, OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"ovepg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(os.path.join(cfg.out, "report.json"))
    if args.command == "validate" and rep["metrics"]["passed"] != rep["metrics"]["total"]:
        print(f"ovepg validate: failed checks: {', '.join(rep['metrics']['failed'])}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

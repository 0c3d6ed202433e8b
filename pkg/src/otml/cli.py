"""Command-line interface: ``otml <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 numerical failure.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .config import Config, describe_keys, load_config
from .exceptions import ConvergenceError, FormatError, NumericalError, OtmlError
from .gradcheck import run_gradcheck
from .pgm import load_pgm, save_pgm
from .phantoms import gen_phantom_dataset
from .probe import linear_probe, stratified_subset
from .simplex import exact_ot_oracle
from .trainer import load_model, pretrain
from .transport import TransportProblem, sinkhorn

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- data directories ---------------------------------------------------------
def write_dataset(directory, samples, bits=8):
    os.makedirs(directory, exist_ok=True)
    maxval = 255 if bits == 8 else 65535
    rows = []
    for i, sample in enumerate(samples):
        name = f"img_{i:05d}.pgm"
        save_pgm(os.path.join(directory, name), sample.image, maxval=maxval)
        rows.append((name, sample.label))
    with open(os.path.join(directory, "labels.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("filename", "label"))
        writer.writerows(rows)


def read_dataset(directory):
    """Images ``(n, 1, h, w)`` and labels (``None`` without ``labels.csv``)."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"data directory {directory!r} does not exist")
    label_path = os.path.join(directory, "labels.csv")
    if os.path.exists(label_path):
        with open(label_path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["filename", "label"]:
                raise FormatError(f"{label_path}: expected header 'filename,label'")
            entries = [(row[0], int(row[1])) for row in reader if row]
        names = [e[0] for e in entries]
        labels = np.array([e[1] for e in entries], dtype=int)
    else:
        names = sorted(f for f in os.listdir(directory) if f.endswith(".pgm"))
        labels = None
    if not names:
        raise FormatError(f"no images found in {directory!r}")
    images = np.stack([load_pgm(os.path.join(directory, name)) for name in names])
    return images, labels


# -- transport problem files ------------------------------------------------
def parse_problem(text):
    """Parse a problem file.

    Layout (blank lines and ``#`` comments ignored)::

        d
        d lines of d cost entries
        d source weights (mu)
        d target weights (nu)
        epsilon            (optional)

    Returns ``(cost, mu, nu, epsilon or None)``.
    """
    lines = [line.split("#", 1)[0].split() for line in text.splitlines()]
    lines = [line for line in lines if line]
    try:
        rows = [[float(tok) for tok in line] for line in lines]
    except ValueError as exc:
        raise FormatError(f"non-numeric token in problem file: {exc}") from None
    if not rows or len(rows[0]) != 1 or rows[0][0] != int(rows[0][0]) or rows[0][0] < 1:
        raise FormatError("problem file must start with the dimension d on its own line")
    d = int(rows[0][0])
    if len(rows) not in (d + 3, d + 4):
        raise FormatError(f"expected {d} cost rows, mu, nu and an optional epsilon; found {len(rows) - 1} lines")
    body = rows[1:]
    if any(len(row) != d for row in body[: d + 2]):
        raise FormatError(f"cost rows and marginals must each hold {d} numbers")
    epsilon = None
    if len(body) == d + 3:
        if len(body[-1]) != 1:
            raise FormatError("the epsilon line must hold a single number")
        epsilon = body[-1][0]
    return np.array(body[:d]), np.array(body[d]), np.array(body[d + 1]), epsilon


def format_plan(plan):
    return "\n".join(" ".join(f"{v:.10g}" for v in row) for row in plan)


# -- commands ------------------------------------------------------------------
def cmd_gen_data(args):
    samples = gen_phantom_dataset(args.n, args.classes, args.size, args.size, args.seed)
    write_dataset(args.out, samples, bits=args.bits)
    print(f"wrote {len(samples)} images to {args.out}")
    return EXIT_OK


def _overrides(pairs):
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_pretrain(args):
    config = load_config(args.config) if args.config else Config()
    config = config.with_overrides(_overrides(args.set))
    images, _ = read_dataset(args.data)

    def log(row):
        if args.verbose:
            print(f"step {row.step} total {row.total:.6f} l_ot {row.l_ot:.6f} feat_std {row.feat_std:.4f}")

    state = pretrain(config, images, out=args.out, log=log)
    last = state.history[-1] if state.history else None
    summary = f"trained {state.step} steps; checkpoint {args.out}"
    if last is not None:
        summary += f"; final total {last.total:.6f}"
    print(summary)
    return EXIT_OK


def cmd_probe(args):
    if not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint {args.ckpt!r} not found")
    model, config, ckpt = load_model(args.ckpt)
    for message in ckpt.warnings:
        print(f"warning: {message}", file=sys.stderr)
    config = config.with_overrides(_overrides(args.set))
    images, labels = read_dataset(args.data)
    if labels is None:
        raise FormatError(f"{args.data} has no labels.csv")
    seed = config["probe.seed"] if args.seed is None else args.seed
    if args.test_data:
        test_images, test_labels = read_dataset(args.test_data)
        if test_labels is None:
            raise FormatError(f"{args.test_data} has no labels.csv")
        train = (images, labels)
    else:
        test_index = stratified_subset(labels, config["probe.test_fraction"], seed + 1)
        mask = np.ones(len(labels), dtype=bool)
        mask[test_index] = False
        train = (images[mask], labels[mask])
        test_images, test_labels = images[test_index], labels[test_index]
    protocol = args.protocol or config["probe.protocol"]
    fraction = config["probe.fraction"] if args.fraction is None else args.fraction
    result = linear_probe(
        model,
        train,
        (test_images, test_labels),
        protocol=protocol,
        label_fraction=fraction,
        seed=seed,
        iterations=config["probe.iterations"],
        lr=config["probe.lr"],
        finetune_steps=config["probe.finetune_steps"],
        finetune_lr=config["probe.finetune_lr"],
    )
    print(result.to_csv_row())
    return EXIT_OK


def cmd_ot_solve(args):
    with open(args.input, encoding="utf-8") as fh:
        cost, mu, nu, file_epsilon = parse_problem(fh.read())
    if args.oracle:
        result = exact_ot_oracle(cost, mu, nu)
    else:
        epsilon = args.epsilon if args.epsilon is not None else file_epsilon or 1e-3
        problem = TransportProblem(cost, mu, nu, epsilon)
        result = sinkhorn(problem, max_iters=args.max_iters, tol=args.tol, mode="detached")
    print(len(mu))
    print(format_plan(result.plan.data))
    print(f"cost {result.cost:.10g}")
    print(f"iterations {result.iterations}")
    print(f"marginal_error {result.marginal_error:.3e}")
    return EXIT_OK


def cmd_gradcheck(args):
    corrupt = tuple(args.corrupt or ())
    results = run_gradcheck(args.seed, corrupt=corrupt)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print(f"all {len(results)} cases passed")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
def build_parser():
    keys = "configuration keys (section.key = default):\n" + describe_keys()
    parser = _Parser(
        prog="otml",
        description="Optimal-transport self-supervised pretraining toolkit.",
        epilog=keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=1000, help="number of images")
    p.add_argument("--classes", type=int, default=4, help="number of classes (2-8)")
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8, help="PGM sample depth")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser(
        "pretrain",
        help="self-supervised pretraining",
        epilog=keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="config file; defaults are used when omitted")
    p.add_argument("--data", required=True, help="directory of PGM images")
    p.add_argument("--out", required=True, help="final checkpoint path; metrics are written beside it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.steps=10")
    p.add_argument("--verbose", action="store_true", help="print one line per step")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="labeled directory (split into train/test unless --test-data)")
    p.add_argument("--test-data", help="separate labeled held-out directory")
    p.add_argument("--protocol", choices=("frozen", "finetune"))
    p.add_argument("--fraction", type=float, help="label fraction, e.g. 0.01, 0.1 or 1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a probe config key")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ot-solve", help="solve a transport problem file")
    p.add_argument("--input", required=True, help="problem file: d, d cost rows, mu, nu, optional epsilon")
    p.add_argument("--epsilon", type=float, help="entropic strength for Sinkhorn (overrides the file; default 1e-3)")
    p.add_argument("--oracle", action="store_true", help="use the exact transportation simplex")
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_ot_solve)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"otml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConvergenceError) as exc:
        print(f"otml: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OtmlError, OSError, ValueError) as exc:
        print(f"otml: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

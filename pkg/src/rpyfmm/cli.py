"""Command-line demo and benchmark harness.

Generates cube or sphere-surface test beads (or reads them from a file), runs the
fast evaluation, checks it against the direct sum at sampled targets, and prints a
summary followed by one ``key=value`` record line per run.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluator import DIGITS_THRESHOLD, AccuracySetting, LeafSizeError, default_radius, evaluate, relative_error
from .rpy import RPYParams, direct_rpy_matvec

log = logging.getLogger(__name__)

HEADER = "x y z fx fy fz"
RESULT_HEADER = HEADER + " ux uy uz"
DISTRIBUTIONS = ("cube", "sphere")


class UsageError(ValueError):
    pass


def generate(distribution: str, n: int, seed: int):
    """Positions (n, 3) and forces (n, 3) for a test distribution."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise UsageError(f"number of beads must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    if distribution == "cube":
        pos = rng.uniform(0.0, 1.0, size=(n, 3))
    elif distribution == "sphere":
        z = rng.uniform(-1.0, 1.0, size=n)
        phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        pos = np.column_stack((rho * np.cos(phi), rho * np.sin(phi), z))
    else:
        raise UsageError(f"unknown distribution {distribution!r}; choose cube or sphere")
    forces = rng.uniform(-1.0, 1.0, size=(n, 3))
    return pos, forces


def read_beads(path):
    """Read a bead file; returns (positions, forces)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields or line.lstrip().startswith("#"):
                continue
            if lineno == 1 and fields[0] == "x":
                if fields != HEADER.split() and fields != RESULT_HEADER.split():
                    raise ValueError(f"{path}: line {lineno}: unexpected header {line.strip()!r}")
                continue
            if len(fields) not in (6, 9):
                raise ValueError(f"{path}: line {lineno}: expected 6 columns, got {len(fields)}")
            try:
                vals = [float(f) for f in fields[:6]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed number in {line.strip()!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no beads")
    data = np.array(rows)
    return data[:, :3].copy(), data[:, 3:].copy()


def write_beads(path, positions, forces, results=None):
    """Write beads (and optionally velocities) with 17 significant digits."""
    cols = [np.asarray(positions, dtype=float), np.asarray(forces, dtype=float)]
    header = HEADER
    if results is not None:
        cols.append(np.asarray(results, dtype=float))
        header = RESULT_HEADER
    np.savetxt(path, np.hstack(cols), fmt="%.17g", header=header, comments="")


@dataclass
class RunConfig:
    nsources: int = 10000
    distribution: str = "cube"
    accuracy: int = 3
    threshold: int | None = None
    seed: int = 0
    threads: int = 1
    verify_samples: int = 400
    repeats: int = 1
    input: str | None = None
    output: str | None = None
    radius: float | None = None
    k_B: float = 1.0
    temperature: float = 1.0
    viscosity: float = 1.0 / (6.0 * math.pi)
    order: int | None = None

    def validate(self):
        def positive_int(name):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise UsageError(f"{name} must be a positive integer, got {v!r}")

        for name in ("nsources", "threads", "repeats"):
            positive_int(name)
        if self.threshold is not None:
            positive_int("threshold")
        if self.order is not None:
            positive_int("order")
        if self.distribution not in DISTRIBUTIONS:
            raise UsageError(f"distribution must be cube or sphere, got {self.distribution!r}")
        if self.accuracy not in DIGITS_THRESHOLD:
            raise UsageError(f"accuracy must be one of 3, 6, 9, got {self.accuracy!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if not isinstance(self.verify_samples, (int, np.integer)) or self.verify_samples < 0:
            raise UsageError(f"verify_samples must be nonnegative, got {self.verify_samples!r}")
        for name in ("radius", "k_B", "temperature", "viscosity"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise UsageError(f"{name} must be positive and finite, got {v!r}")
        return self


def _format(v):
    if isinstance(v, float):
        return f"{v:.6e}" if v != 0 and (abs(v) < 1e-3 or abs(v) >= 1e6) else f"{v:.6g}"
    return str(v)


def format_record(record: dict) -> str:
    return " ".join(f"{k}={_format(v)}" for k, v in record.items())


def run(config: RunConfig, stream=None) -> list[dict]:
    """Execute ``config``; prints a summary and record lines, returns the records."""
    stream = sys.stdout if stream is None else stream
    config.validate()
    if config.input:
        pos, F = read_beads(config.input)
        source = config.input
    else:
        pos, F = generate(config.distribution, config.nsources, config.seed)
        source = config.distribution
    n = len(pos)
    setting = AccuracySetting.from_digits(config.accuracy, config.order, config.threshold)
    a = config.radius if config.radius is not None else default_radius(n, setting.threshold)
    params = RPYParams(a=a, k_B=config.k_B, T=config.temperature, eta=config.viscosity)

    samples = min(config.verify_samples, n)
    exact = targets = None
    if samples:
        rng = np.random.default_rng([config.seed, 1])
        targets = np.sort(rng.choice(n, size=samples, replace=False))
        t = time.perf_counter()
        exact = direct_rpy_matvec(pos, F, params, targets=targets, n_threads=config.threads)
        t_direct = time.perf_counter() - t

    records = []
    result = None
    for rep in range(config.repeats):
        result, report = evaluate(pos, F, params, setting, n_threads=config.threads)
        rec = {"run": rep, "source": source, "n": n, "digits": setting.digits, "p": setting.order,
               "threshold": setting.threshold, "threads": report.threads, "seed": config.seed,
               "radius": a, "nodes": report.n_nodes, "leaves": report.n_leaves, "depth": report.depth}
        rec.update({k: v for k, v in report.as_dict().items() if k.startswith("t_")})
        if samples:
            rec["samples"] = samples
            rec["error"] = relative_error(result[targets], exact)
            rec["t_direct"] = t_direct
        records.append(rec)

    if config.output:
        write_beads(config.output, pos, F, result)

    print(f"RPY mobility product: N={n} ({source}), {setting.digits} digits, p={setting.order}, "
          f"threshold={setting.threshold}, threads={records[0]['threads']}, a={a:.6g}", file=stream)
    print(f"tree: {records[0]['nodes']} nodes, {records[0]['leaves']} leaves, depth {records[0]['depth']}",
          file=stream)
    phases = [k for k in records[0] if k.startswith("t_") and k != "t_direct"]
    mean = {k: float(np.mean([r[k] for r in records])) for k in phases}
    print("time (mean of %d): " % len(records)
          + ", ".join(f"{k[2:]} {mean[k]:.3f}s" for k in phases), file=stream)
    if samples:
        print(f"relative L2 error at {samples} sampled targets: {records[0]['error']:.4e}", file=stream)
    else:
        print("verification skipped", file=stream)
    if config.output:
        print(f"results written to {config.output}", file=stream)
    for rec in records:
        print(format_record(rec), file=stream)
    if len(records) > 1:
        summary = dict(records[0])
        summary["run"] = "mean"
        summary.update(mean)
        if samples:
            summary["error"] = float(np.mean([r["error"] for r in records]))
        print(format_record(summary), file=stream)
    return records


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rpyfmm",
        description="Fast RPY mobility product D.F via four Laplace FMM evaluations.")
    ap.add_argument("--nsources", type=int, default=10000, help="number of beads to generate (default 10000)")
    ap.add_argument("--distribution", choices=DISTRIBUTIONS, default="cube",
                    help="cube: uniform in [0,1]^3; sphere: uniform on the unit sphere surface")
    ap.add_argument("--accuracy", type=int, choices=sorted(DIGITS_THRESHOLD), default=3,
                    help="requested digits of accuracy")
    ap.add_argument("--threshold", type=int, default=None,
                    help="max beads per leaf (default 80/100/120 for 3/6/9 digits)")
    ap.add_argument("--order", type=int, default=None, help="override the expansion order p")
    ap.add_argument("--seed", type=int, default=0, help="random seed for beads and sample targets")
    ap.add_argument("--threads", type=int, default=1, help="worker threads")
    ap.add_argument("--verify-samples", type=int, default=400,
                    help="targets checked against the direct sum (0 disables)")
    ap.add_argument("--repeats", type=int, default=1, help="repeat the evaluation and report the mean")
    ap.add_argument("--input", metavar="PATH", help="read beads from PATH instead of generating them")
    ap.add_argument("--output", metavar="PATH", help="write beads and velocities to PATH")
    ap.add_argument("--radius", type=float, default=None,
                    help="bead radius a (default: 2a = 0.1 (N/threshold)^(-1/3))")
    ap.add_argument("--kB", type=float, default=1.0, help="Boltzmann constant")
    ap.add_argument("--temperature", type=float, default=1.0, help="temperature T")
    ap.add_argument("--viscosity", type=float, default=1.0 / (6.0 * math.pi), help="solvent viscosity")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = RunConfig(nsources=args.nsources, distribution=args.distribution, accuracy=args.accuracy,
                       threshold=args.threshold, seed=args.seed, threads=args.threads,
                       verify_samples=args.verify_samples, repeats=args.repeats, input=args.input,
                       output=args.output, radius=args.radius, k_B=args.kB, temperature=args.temperature,
                       viscosity=args.viscosity, order=args.order)
    try:
        run(config)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"rpyfmm: error: {e}", file=sys.stderr)
        return 2
    except LeafSizeError as e:
        print(f"rpyfmm: error: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"rpyfmm: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Command-line interface for the fused-data calculus.

Validates model files, dumps operator matrices, computes influence
functions, runs Monte Carlo studies and reproduces the case-control
efficiency curves.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from fusion import io
from fusion.estimation import monte_carlo
from fusion.exceptions import (
    FusionError,
    StrongAlignmentError,
)
from fusion.frameworks import FRAMEWORKS
from fusion.influence import (
    decompose_algorithm,
    eif_project,
    eif_solve,
    gradient_residual,
    if_family,
    lift_to_observed,
    two_source_solve,
    variance,
)
from fusion.model import canonical_u, check_alignment, check_strong_alignment
from fusion.operator import FusedModel, adjoint_matrix, information_operator
from fusion.settings import load_defaults, load_settings
from fusion.verify import DESIGNS, S1_GRID, are_curves, operator_range_checks

logger = logging.getLogger("Fusion.CLI")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_USAGE = 64
DUMPS = ("A", "Astar", "info", "tangent")


class UsageParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage code 64."""

    def error(self, message: str) -> None:
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got '{text}'") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("Sample sizes must be positive integers")
    return values


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got '{text}'") from None


def h_raw_labels(model: FusedModel) -> List[str]:
    """Names of the raw H coordinates: Q cells, U^(j) cells, then S levels."""
    labels = [f"Q|{label}" for label in model.Q.space.labels()]
    for j, u in enumerate(model.U):
        labels += [f"U{j + 1}|{label}" for label in u.space.labels()]
    labels += [f"lambda|S={j + 1}" for j in range(model.n_sources)]
    return labels


class FusionCLI:
    """Subcommand handlers; each returns an exit code."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.settings = load_settings()
        self.strict = self.settings.strict and not getattr(args, "lenient", False)

    # ----- shared helpers -----

    @property
    def seed(self) -> Optional[int]:
        if "FUSION_SEED" in os.environ:
            return self.settings.seed
        return getattr(self.args, "seed", None)

    def _framework(self, model_file: io.ModelFile, kind: Optional[str]):
        if kind is None and model_file.framework_kind is None:
            return None
        return model_file.framework(kind, strict=self.strict)

    def _bind(self):
        model_file = io.load_model(self.args.model)
        fw = self._framework(model_file, getattr(self.args, "framework", None))
        return model_file, fw, model_file.bind(self.strict, fw)

    def _emit_json(self, data: Dict[str, Any], path: Optional[str] = None) -> None:
        if path:
            io.write_json(path, data)
        else:
            sys.stdout.write(io.dumps(data))

    def _emit_csv(self, frame: pd.DataFrame, path: Optional[str] = None) -> None:
        if path:
            io.write_csv(path, frame)
        else:
            sys.stdout.write(io.frame_to_csv(frame))

    def _emit_report(self, report: Dict[str, Any]) -> None:
        """JSON report to --report, or to stdout when the CSV went to --out."""
        if self.args.report:
            io.write_json(self.args.report, report)
        elif self.args.out:
            sys.stdout.write(io.dumps(report))
        else:
            logger.info(f"Report: {io.dumps(report).strip()}")

    def _psi(self, model: FusedModel) -> np.ndarray:
        return io.load_table(self.args.psi, model.Q.space)

    def _observed_influence(self, model: FusedModel, psi: np.ndarray):
        if model.n_sources == 2:
            dec = two_source_solve(model, psi, self.settings.decompose_tolerance)
            return lift_to_observed(model, dec), "two-source"
        dec = decompose_algorithm(model.d_bases, psi, self.settings.decompose_tolerance)
        return lift_to_observed(model, dec), "decompose"

    # ----- subcommands -----

    def validate(self) -> int:
        model_file = io.load_model(self.args.model)
        fw = self._framework(model_file, self.args.framework)
        C = model_file.alignment(fw)
        P = model_file.observed_law(C)
        report = check_alignment(P, model_file.Q, C, self.settings.tolerance)
        if report.aligned:
            try:
                report.strong = check_strong_alignment(P, model_file.Q, canonical_u(P), C, self.settings.tolerance)
            except StrongAlignmentError as e:
                report.violations.append(str(e))
                report.aligned = False
        data = report.to_dict()
        data["positive"] = bool(model_file.Q.is_positive() and all(law.is_positive() for law in P.laws))
        self._emit_json(data, self.args.out)
        if not report.aligned:
            logger.error(f"Model {self.args.model} is not aligned: {report.flagged or report.violations}")
            return EXIT_VALIDATION
        logger.info(f"Model {self.args.model} is aligned")
        return EXIT_OK

    def operator(self) -> int:
        _, _, model = self._bind()
        obs_labels = model.P.cell_labels()
        dump = self.args.dump
        if dump == "A":
            frame = io.matrix_frame(model.a_matrix, obs_labels, h_raw_labels(model))
        elif dump == "Astar":
            frame = io.matrix_frame(adjoint_matrix(model), h_raw_labels(model), obs_labels)
        elif dump == "info":
            info = information_operator(model)
            frame = io.matrix_frame(info.entries, info.codomain, info.domain)
        else:
            tangent = model.tangent
            columns = [f"T{i + 1}" for i in range(tangent.dim)]
            frame = io.matrix_frame(tangent.vectors, obs_labels, columns)
        checks = operator_range_checks(model, self.settings.rank_tolerance)
        logger.info(f"Operator ranks: {checks}")
        self._emit_csv(frame, self.args.out)
        if self.args.report:
            io.write_json(self.args.report, checks)
        return EXIT_OK

    def influence(self) -> int:
        _, _, model = self._bind()
        psi = self._psi(model)
        phi, method = self._observed_influence(model, psi)
        columns = {"influence": phi}
        report: Dict[str, Any] = {"method": method}
        if self.args.eif:
            phi = eif_project(model, phi)
            columns["efficient"] = phi
            report["method"] = f"{method}+projection"
        report["variance"] = variance(model, phi)
        report["gradient_residual"] = gradient_residual(model, phi, psi)
        if self.args.family:
            family = if_family(model, columns["influence"])
            rng = np.random.default_rng(self.seed)
            member_variances = []
            for i, member in enumerate(family.sample(rng, self.args.family)):
                columns[f"member_{i + 1}"] = member
                member_variances.append(variance(model, member))
            report["family_dimension"] = family.dim
            report["family_variances"] = member_variances
        report["floored_cells"] = model.P.floored
        self._emit_csv(io.obs_frame(model.P, columns), self.args.out)
        self._emit_report(report)
        return EXIT_OK

    def eif(self) -> int:
        _, _, model = self._bind()
        psi = self._psi(model)
        solution = eif_solve(model, psi, self.settings.tolerance, self.settings.rank_tolerance)
        report = {
            "method": "information-equation",
            "variance": variance(model, solution.phi),
            "residual": solution.residual,
            "truncated_singular_values": solution.truncated,
            "gradient_residual": gradient_residual(model, solution.phi, psi),
        }
        self._emit_csv(io.obs_frame(model.P, {"efficient": solution.phi}), self.args.out)
        self._emit_report(report)
        return EXIT_OK

    def decompose(self) -> int:
        _, _, model = self._bind()
        psi = self._psi(model)
        dec = decompose_algorithm(model.d_bases, psi, self.settings.decompose_tolerance)
        columns = {}
        for j, pieces in enumerate(dec.components):
            for k, piece in enumerate(pieces):
                columns[f"m_{j + 1}_{k + 1}"] = piece
        frame = pd.DataFrame({"cell": model.Q.space.labels(), "psi": psi, **columns})
        phi = lift_to_observed(model, dec)
        report = {
            "success": True,
            "max_reconstruction_error": float(np.max(np.abs(dec.total() - psi), initial=0.0)),
            "gradient_residual": gradient_residual(model, phi, psi),
            "variance": variance(model, phi),
        }
        self._emit_csv(frame, self.args.out)
        self._emit_report(report)
        return EXIT_OK

    def framework(self) -> int:
        model_file = io.load_model(self.args.model)
        fw = model_file.framework(self.args.kind, strict=self.strict)
        model = model_file.bind(self.strict, fw)
        result = fw.run(model.P, self.args.compute, model.Q)
        report = {"framework": fw.get_status(), "compute": self.args.compute, **result.to_dict()}
        columns = result.arrays()
        if columns and self.args.out:
            io.write_csv(self.args.out, io.obs_frame(model.P, columns))
        self._emit_json(report, self.args.report)
        return EXIT_OK if result.success else result.exit_code

    def simulate(self) -> int:
        model_file = io.load_model(self.args.model)
        fw = model_file.framework(self.args.framework, strict=self.strict)
        P = model_file.bind(self.strict, fw).P
        threads = self.args.threads or self.settings.threads
        report = monte_carlo(
            fw,
            P,
            self.args.n,
            self.args.reps,
            seed=self.seed,
            threads=threads,
            obedient=not self.args.non_obedient,
            efficient=not self.args.inefficient,
            min_reps=self.args.min_reps,
        )
        self._emit_csv(report.to_frame(), self.args.out)
        if self.args.report:
            io.write_json(self.args.report, report.to_dict())
        return EXIT_OK

    def figure(self) -> int:
        grid = self.args.grid or load_defaults("figure").get("grid") or list(S1_GRID)
        frame = are_curves(self.args.dgp, grid)
        dominated = bool((frame["are_ii"] >= 1.0).all() and (frame["are_iiib"] >= 1.0).all())
        logger.info(f"Efficiency curves over {len(frame)} values of P(S=1); scenario iii.a dominates: {dominated}")
        self._emit_csv(frame, self.args.out)
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    simulate_defaults = load_defaults("simulate")
    figure_defaults = load_defaults("figure")
    parser = UsageParser(
        prog="fusion",
        description="Semiparametric calculus for fused data on finite spaces",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def model_command(name: str, help_text: str, framework: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("model", help="Model file (JSON)")
        if framework:
            p.add_argument("--framework", choices=sorted(FRAMEWORKS), help="Take alignments from a framework")
        p.add_argument("--lenient", action="store_true", help="Allow zero-mass cells")
        return p

    p = model_command("validate", "Check alignment and strong alignment of a model file")
    p.add_argument("--out", help="Write the report to a JSON file")

    p = model_command("operator", "Dump score-operator matrices as CSV")
    p.add_argument("--dump", choices=DUMPS, required=True, help="Matrix to dump")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--report", help="Write rank checks to a JSON file")

    for name, help_text in (
        ("influence", "Observed influence function of an ideal influence function"),
        ("eif", "Efficient influence function from the information equation"),
        ("decompose", "Run DECOMPOSE on an ideal influence function"),
    ):
        p = model_command(name, help_text)
        p.add_argument("--psi", required=True, help="Ideal influence function table (JSON)")
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--report", help="JSON report path")
        if name == "influence":
            p.add_argument("--eif", action="store_true", help="Project onto the tangent space")
            p.add_argument("--family", type=int, default=0, metavar="N", help="Sample N family members")
            p.add_argument("--seed", type=int, default=None, help="Seed for family sampling")

    p = sub.add_parser("framework", help="Run a worked framework on a model file")
    p.add_argument("kind", choices=sorted(FRAMEWORKS), help="Framework kind")
    p.add_argument("model", help="Model file (JSON)")
    p.add_argument("--compute", choices=("phi", "if", "eif", "demo"), default="phi")
    p.add_argument("--lenient", action="store_true", help="Allow zero-mass cells")
    p.add_argument("--out", help="CSV output path for influence functions")
    p.add_argument("--report", help="JSON report path")

    p = model_command("simulate", "Monte Carlo study of one-step estimators", framework=False)
    p.add_argument("--framework", choices=sorted(FRAMEWORKS), required=True, help="Framework kind")
    p.add_argument("--n", type=_int_list, default=simulate_defaults.get("n_grid", [500, 2000, 8000]),
                   help="Comma-separated sample sizes")
    p.add_argument("--reps", type=int, default=simulate_defaults.get("reps", 500), help="Replications per n")
    p.add_argument("--min-reps", type=int, default=100, help="Smallest accepted replication count")
    p.add_argument("--seed", type=int, default=simulate_defaults.get("seed", 42), help="Base seed (FUSION_SEED wins)")
    p.add_argument("--threads", type=int, default=None, help="Worker threads")
    p.add_argument("--non-obedient", action="store_true", help="Skip the projection into the model")
    p.add_argument("--inefficient", action="store_true", help="Correct with the closed-form influence function")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("figure", help="Efficiency curves of the case-control transport design")
    p.add_argument("--dgp", choices=DESIGNS, default=figure_defaults.get("dgp", "appendix-c"), help="Data-generating design")
    p.add_argument("--grid", type=_float_list, default=None, help="Comma-separated P(S=1) values")
    p.add_argument("--out", help="CSV output path")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    cli = FusionCLI(args)
    try:
        return getattr(cli, args.command)()
    except FusionError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        return 1


def main() -> None:
    logging.basicConfig(
        level=load_settings().log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    sys.exit(run())


if __name__ == "__main__":
    main()

#!/usr/bin/env python3

import argparse
import os
import sys
import time
import traceback
from dataclasses import dataclass
from typing import List, Optional

common = os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir, "common"))
if common not in sys.path:
    sys.path.insert(0, common)

from print_color import PrintColor
from rulebase import Verbosity, logCheck
from rules_selfcheck import get_all_selfcheck_rules
from rules_selfcheck.rule import CheckContext, SelfCheckRule


@dataclass
class CheckResult:
    name: str
    description: str
    passed: bool
    max_error: float
    tolerance: float
    observations: int
    error_count: int
    warning_count: int
    seconds: float

    def entry(self) -> dict:
        return {
            "description": self.description,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "observations": self.observations,
            "errors": self.error_count,
            "warnings": self.warning_count,
            "seconds": round(self.seconds, 3),
        }


class SelfCheck:
    """Runs the numerical self-checks and prints one report line per check"""

    def __init__(
        self,
        selected_rules: Optional[List[str]] = None,
        excluded_rules: Optional[List[str]] = None,
        verbosity: Verbosity = Verbosity.NONE,
        use_color: bool = True,
        silent: bool = False,
        log: Optional[str] = None,
        context: Optional[CheckContext] = None,
    ):
        self.printer = PrintColor(use_color=use_color)
        self.verbosity: Verbosity = verbosity
        self.silent: bool = silent
        self.log: Optional[str] = log
        self.context: CheckContext = context or CheckContext()
        self.error_count: int = 0

        self.rules: List[type] = []
        for rule_name, rule in get_all_selfcheck_rules().items():
            if selected_rules is not None and rule_name not in selected_rules:
                continue
            if excluded_rules is not None and rule_name in excluded_rules:
                continue
            self.rules.append(rule.Rule)

    def run_rule(self, rule_class: type) -> CheckResult:
        rule: SelfCheckRule = rule_class(self.context)
        if self.verbosity is Verbosity.HIGH:
            self.printer.white("Checking rule " + rule.name)

        start = time.perf_counter()
        try:
            rule.check()
        except Exception as e:
            rule.error(f"check raised {type(e).__name__}: {e}")
            if self.verbosity is Verbosity.HIGH:
                traceback.print_exc()
        seconds = time.perf_counter() - start

        result = CheckResult(
            rule.name,
            rule.description,
            not rule.hasErrors(),
            rule.max_error,
            rule.tolerance,
            rule.observations,
            rule.errorCount,
            rule.warningCount(),
            seconds,
        )
        if rule.hasErrors():
            self.printer.yellow(f"Violating {rule.name} - {rule.description}", indentation=2)
            rule.processOutput(self.printer, Verbosity(max(self.verbosity.value, 1)))
        elif not self.silent:
            report = (
                f"{rule.name} passed: max error {rule.max_error:.2e} "
                f"(tolerance {rule.tolerance:.0e}, {rule.observations} comparisons, "
                f"{seconds:.1f}s)"
            )
            if rule.warningCount():
                self.printer.brown(f"{report}, {rule.warningCount()} close to the tolerance")
            else:
                self.printer.green(report)
            if self.verbosity.value > Verbosity.NONE.value:
                rule.processOutput(self.printer, self.verbosity)

        if self.log:
            logCheck(self.log, rule.name, result.passed, result.entry())
        self.error_count += rule.errorCount
        return result

    def run(self) -> List[CheckResult]:
        return [self.run_rule(rule) for rule in self.rules]


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description=(
            "Cross-checks the vectorized kernels, estimators and gradients against"
            " brute-force references. Exits with 1 if any check fails."
        )
    )
    parser.add_argument(
        "-r",
        "--rule",
        help=(
            "Select a particular check (or checks) to run (default = all checks). Use"
            ' comma separated values to select multiple checks. e.g. "-r O1.1,G4.1"'
        ),
    )
    parser.add_argument(
        "-e",
        "--exclude",
        help=(
            "Exclude a particular check (or checks). Use comma separated values to"
            ' exclude multiple checks. e.g. "-e G4.1"'
        ),
    )
    parser.add_argument(
        "--nocolor", help="does not use colors to show the output", action="store_true"
    )
    parser.add_argument(
        "-v",
        "--verbose",
        help=(
            "Enable verbose output. -v shows brief information, -vv shows complete"
            " information"
        ),
        action="count",
    )
    parser.add_argument(
        "-s", "--silent", help="skip output for passing checks", action="store_true"
    )
    parser.add_argument("-l", "--log", help="Path to JSON file to log check results")
    parser.add_argument("--seed", help="seed of the random instances", type=int, default=0)
    parser.add_argument(
        "--instances",
        help="number of random instances per oracle check",
        type=int,
        default=200,
    )
    args = parser.parse_args(argv)

    selected_rules = args.rule.split(",") if args.rule else None
    excluded_rules = args.exclude.split(",") if args.exclude else None

    verbosity = Verbosity.NONE
    if args.verbose:
        verbosity = Verbosity(min(args.verbose, Verbosity.HIGH.value))
    SelfCheckRule.verbosity = verbosity

    checker = SelfCheck(
        selected_rules,
        excluded_rules,
        verbosity,
        use_color=not args.nocolor,
        silent=args.silent,
        log=args.log,
        context=CheckContext(seed=args.seed, instances=args.instances),
    )
    if not checker.rules:
        checker.printer.red(f"No checks selected (-r {args.rule}, -e {args.exclude})")
        return 1

    results = checker.run()
    failed = [r.name for r in results if not r.passed]
    if failed:
        checker.printer.red(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return 1
    if not args.silent:
        checker.printer.green(f"all {len(results)} checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

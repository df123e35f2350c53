"""Command-line entry point.

Subcommands::

    prodsys presets
    prodsys compile  (--preset NAME | --scenario PATH)
    prodsys validate (--preset NAME | --scenario PATH)
    prodsys run      (--preset NAME | --scenario PATH) [--seed N[,N...]] [--out DIR] [--horizon S] [--jobs N]
    prodsys report   RUNLOG... [--labels A,B,...] [--out DIR]

``run`` exits 0 when every workflow finished done, 2 when any ended failed
or broken, and 3 when the simulated clock passed the horizon.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .accounting import Report, campaign_report, compute_metrics
from .deft import WorkflowState, to_dot, validate_workflow
from .gridsim import HorizonExceeded, RunLog, run
from .scenario import Scenario, ScenarioError, load_preset, load_scenario, preset_names

log = logging.getLogger("prodsys")

EXIT_DONE = 0
EXIT_ERROR = 1
EXIT_FAILED = 2
EXIT_HORIZON = 3


def exit_code(state: WorkflowState) -> int:
    return EXIT_DONE if state is WorkflowState.DONE else EXIT_FAILED


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class RunResult:
    exit_code: int
    logs: Tuple[RunLog, ...]
    report: Optional[Report]
    paths: Tuple[Path, ...] = ()
    message: str = ""


def _run_one(args: Tuple[Scenario, int, Optional[float]]) -> RunLog:
    scenario, seed, horizon = args
    return run(scenario.workflow(), scenario.sites, seed, scenario.engine_config(horizon))


def run_scenario(
    scenario: Scenario,
    seeds: Optional[Sequence[int]] = None,
    out: Optional[Path] = None,
    horizon: Optional[float] = None,
    jobs: int = 1,
) -> RunResult:
    """Run ``scenario`` once per seed and write run logs plus reports.

    Seeds may run in parallel processes; results are always ordered by the
    seed list, so the artifacts do not depend on ``jobs``.
    """
    seeds = list(seeds) if seeds else list(scenario.seeds)
    work = [(scenario, s, horizon) for s in seeds]
    try:
        if jobs > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                logs = tuple(pool.map(_run_one, work))
        else:
            logs = tuple(_run_one(w) for w in work)
    except HorizonExceeded as exc:
        return RunResult(EXIT_HORIZON, (), None, message=str(exc))

    labels = [f"{scenario.label}/seed={s}" for s in seeds]
    report = campaign_report(logs, labels)
    paths: List[Path] = []
    if out is not None:
        out = Path(out)
        for seed, rl in zip(seeds, logs):
            p = out / f"runlog-{scenario.name}-seed{seed}.jsonl"
            write_atomic(p, rl.to_jsonl())
            paths.append(p)
        for name, text in (("report.txt", report.to_text()), ("report.json", report.to_json())):
            write_atomic(out / name, text)
            paths.append(out / name)
        losses = [
            f"{rl.seed}\t{l.task}\t{l.first}\t{l.count}\t{l.reason}\n" for rl in logs for l in rl.losses
        ]
        write_atomic(out / "losses.tsv", "seed\ttask\tfirst\tcount\treason\n" + "".join(losses))
        paths.append(out / "losses.tsv")
    code = max(exit_code(rl.state) for rl in logs)
    return RunResult(code, logs, report, tuple(paths))


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _load(args: argparse.Namespace) -> Scenario:
    if args.preset and args.scenario:
        raise ScenarioError("give either --preset or --scenario, not both")
    if args.preset:
        return load_preset(args.preset)
    if args.scenario:
        return load_scenario(args.scenario)
    raise ScenarioError("one of --preset or --scenario is required")


def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=Path, help="scenario YAML file")
    p.add_argument("--preset", help="name of a shipped preset (see `prodsys presets`)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prodsys", description="Workflow production system simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("presets", help="list shipped scenario presets")

    p = sub.add_parser("compile", help="compile the scenario request and print the workflow graph (DOT)")
    _add_source(p)
    p.add_argument("--out", type=Path, help="write workflow.dot into this directory instead of stdout")

    p = sub.add_parser("validate", help="check a scenario and its compiled workflow")
    _add_source(p)

    p = sub.add_parser("run", help="simulate the scenario")
    _add_source(p)
    p.add_argument("--seed", type=_parse_seeds, help="comma-separated seeds (default: the scenario's)")
    p.add_argument("--out", type=Path, help="artifact directory")
    p.add_argument("--horizon", type=float, help="simulated-time limit in seconds")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes for independent seeds")

    p = sub.add_parser("report", help="build a campaign report from run log files")
    p.add_argument("runlogs", nargs="+", type=Path)
    p.add_argument("--labels", help="comma-separated row labels (default: file stems)")
    p.add_argument("--out", type=Path, help="write report.txt and report.json here")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "presets":
        for name in preset_names():
            print(f"{name}\t{load_preset(name).description}")
        return EXIT_DONE

    if args.command == "report":
        logs = [RunLog.from_jsonl(p.read_text()) for p in args.runlogs]
        labels = args.labels.split(",") if args.labels else [p.stem for p in args.runlogs]
        report = campaign_report(logs, labels)
        if args.out:
            write_atomic(args.out / "report.txt", report.to_text())
            write_atomic(args.out / "report.json", report.to_json())
        print(report.to_text(), end="")
        return EXIT_DONE

    try:
        scenario = _load(args)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if args.command == "compile":
        dot = to_dot(scenario.workflow())
        if args.out:
            write_atomic(args.out / "workflow.dot", dot)
        else:
            print(dot, end="")
        return EXIT_DONE

    if args.command == "validate":
        diags = validate_workflow(scenario.workflow())
        for d in diags:
            print(d)
        if not diags:
            print(f"{scenario.name}: ok")
        return EXIT_ERROR if diags else EXIT_DONE

    result = run_scenario(scenario, args.seed, args.out, args.horizon, args.jobs)
    if result.exit_code == EXIT_HORIZON:
        print(f"error: {result.message}", file=sys.stderr)
        return EXIT_HORIZON
    print(result.report.to_text(), end="")
    for rl in result.logs:
        m = compute_metrics(rl)
        print(
            f"seed {rl.seed}: {rl.state.value}  cpu_overhead={m.cpu_overhead:.4f}  "
            f"loss_fraction={m.loss_fraction:.3g}  makespan={m.makespan:.0f}s  attempts={m.attempts}"
        )
        for l in rl.losses:
            print(f"  lost {l.task} [{l.first}, {l.first + l.count}) {l.reason}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

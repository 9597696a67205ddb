"""Command line interface: run scenarios, compare update rules, serve, replay.

Exit codes: 0 on completion, 2 on scenario or configuration errors, 3 when
a --ci run misses its protocol's acceptance thresholds or a replay finds a
report mismatch. Set SERVOBOT_LOG (DEBUG, INFO, ...) for verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from . import harness
from . import jacobian as jac
from . import reports
from .scenarios import (Protocol, ScenarioConfig, ScenarioError,
                        class_vocabulary, load_scenario, scenario_names)

log = logging.getLogger("servobot.cli")


def _configure_logging() -> None:
    level_name = os.environ.get("SERVOBOT_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _formats(choice: str) -> Sequence[str]:
    return ("json", "csv") if choice == "both" else (choice,)


def _default_out_dir(name: str, seed: int) -> str:
    return os.path.join("runs", f"{name}-seed{seed}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servobot",
        description="Deterministic detection-only manipulation benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, scenario: bool = True) -> None:
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="packaged scenario name or JSON path "
                                f"(packaged: {', '.join(scenario_names())})")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--trials", type=int, default=None,
                       help="override the scenario's trial count")
        p.add_argument("--out-dir", default=None,
                       help="report directory (default runs/<name>-seed<n>)")
        p.add_argument("--format", choices=("json", "csv", "both"),
                       default="both")

    run = sub.add_parser("run", help="run one scenario and write reports")
    common(run)
    run.add_argument("--annotator", choices=("oracle", "human"),
                     default="oracle",
                     help="human annotation requires the serve subcommand")
    run.add_argument("--parallel", action="store_true",
                     help="run trials on a thread pool (same bytes out)")
    run.add_argument("--ci", action="store_true",
                     help="exit 3 if the protocol's acceptance thresholds "
                          "are missed")

    cmp_p = sub.add_parser(
        "compare", help="compare Jacobian update formulations")
    cmp_p.add_argument("--trials", type=int, default=10)
    cmp_p.add_argument("--seed", type=int, default=jac.DEFAULT_COMPARE_SEED)
    cmp_p.add_argument("--out-dir", default=None)
    cmp_p.add_argument("--format", choices=("json", "csv", "both"),
                       default="both")

    serve = sub.add_parser(
        "serve", help="run a scenario with human annotation over HTTP")
    common(serve)
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--ui-dir", default=None,
                       help="static files served at / (for the browser UI)")

    replay = sub.add_parser(
        "replay", help="re-run a finished out-dir and verify byte-identical "
                       "report.json")
    replay.add_argument("--out-dir", required=True)
    replay.add_argument("--scenario", default=None,
                        help="override the scenario recorded in the report")
    return parser


def _print_summary(report: harness.RunReport) -> None:
    agg = report.aggregates
    print(f"scenario {report.scenario} (protocol {report.protocol}, "
          f"seed {report.seed}): {report.trial_count} trials")
    if report.sessions:
        print(f"  updates mean {agg['mean_updates']:.1f} "
              f"range {agg['min_updates']}-{agg['max_updates']}, "
              f"converged {agg['converged']}/{report.trial_count}")
        return
    if report.arms:
        for arm, stats in report.arms.items():
            print(f"  {arm}: VS {stats['vs_rate']:.1f} "
                  f"DE {stats['de_rate']:.1f} "
                  f"Grasp {stats['grasp_rate']:.1f} "
                  f"({stats['examples_total']} examples)")
        return
    print(f"  VS {agg['vs_rate']:.1f} DE {agg['de_rate']:.1f} "
          f"Grasp {agg['grasp_rate']:.1f} over {agg['objects']} objects; "
          f"{agg['examples_total']} examples, "
          f"{agg['robot_seconds']:.1f} robot-s")
    if "picks_per_hour" in agg:
        print(f"  placements {agg['placements']} "
              f"({agg['picks_per_hour']:.1f} picks/hour)")


def ci_check(report: harness.RunReport, config: ScenarioConfig) -> List[str]:
    """Protocol-specific acceptance thresholds for --ci runs."""
    agg = report.aggregates
    misses: List[str] = []
    if config.protocol is Protocol.VS_LEARNING:
        if agg["converged"] != report.trial_count:
            misses.append(
                f"converged {agg['converged']}/{report.trial_count}")
        return misses
    if config.protocol is Protocol.VOSVS_BENCH:
        if agg["vs_rate"] != 100.0:
            misses.append(f"vs_rate {agg['vs_rate']:.1f} != 100")
        for run in report.trials:
            n = len(run.report.few_shot)
            if not 1 <= n <= 20:
                misses.append(f"{run.label}: {n} examples outside [1, 20]")
        return misses
    if config.protocol in (Protocol.PICK_PLACE, Protocol.PICK_PLACE_CLUTTER):
        arms = report.arms or {}
        off = arms.get("tfod_off_prior_on")
        if off:
            for arm, stats in arms.items():
                if arm == "tfod_off_prior_on":
                    continue
                for key in ("vs_rate", "de_rate", "grasp_rate"):
                    if stats[key] < off[key]:
                        misses.append(
                            f"{arm} {key} {stats[key]:.1f} < "
                            f"tfod_off {off[key]:.1f}")
        return misses
    if config.sentry:
        if agg["examples_total"] != 0:
            misses.append(f"sentry added {agg['examples_total']} examples")
        return misses
    if not agg.get("all_placed", False):
        misses.append(
            f"placements {agg['placements']}/{agg['objects']}")
    return misses


def cmd_run(args: argparse.Namespace) -> int:
    if args.annotator == "human":
        raise ScenarioError(
            "human annotation needs a listening server; "
            "use: servobot serve --scenario ...")
    config = load_scenario(args.scenario)
    report = harness.run_scenario(config, args.seed, args.trials,
                                  parallel=args.parallel)
    out_dir = args.out_dir or _default_out_dir(config.name, args.seed)
    written = reports.write_run_report(report, out_dir,
                                       _formats(args.format))
    _print_summary(report)
    print(f"wrote {len(written)} files under {out_dir}")
    if args.ci:
        misses = ci_check(report, config)
        if misses:
            for miss in misses:
                print(f"acceptance miss: {miss}", file=sys.stderr)
            return 3
        print("acceptance thresholds met")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    report = jac.compare_formulations(args.trials,
                                      jac.DEFAULT_COMPARE_NOISE,
                                      seed=args.seed)
    out_dir = args.out_dir or _default_out_dir("compare", args.seed)
    written = reports.write_comparison(report, out_dir,
                                       _formats(args.format))
    for st in report.stats:
        print(f"  {st.formulation:>14}: mean updates {st.mean_updates:6.1f} "
              f"range {st.min_updates}-{st.max_updates}, "
              f"cross [{st.cross_range[0]:.2e}, {st.cross_range[1]:.2e}]")
    print(f"wrote {len(written)} files under {out_dir}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import AnnotationBridge, AnnotationServer

    config = load_scenario(args.scenario)
    bridge = AnnotationBridge(class_vocabulary(config))
    ui_dir = args.ui_dir if args.ui_dir and os.path.isdir(args.ui_dir) \
        else None
    server = AnnotationServer(bridge, host=args.host, port=args.port,
                              ui_dir=ui_dir)
    server.start()
    host, port = server.address
    print(f"annotation server on http://{host}:{port}/api/v1 "
          f"(scenario {config.name}, seed {args.seed})")

    def factory(trial: int):
        bridge.set_trial(trial)
        return bridge

    try:
        report = harness.run_scenario(config, args.seed, args.trials,
                                      annotator_factory=factory,
                                      annotator_name="human")
        bridge.finish()
        out_dir = args.out_dir or _default_out_dir(config.name, args.seed)
        written = reports.write_run_report(report, out_dir,
                                           _formats(args.format))
        _print_summary(report)
        print(f"wrote {len(written)} files under {out_dir}")
        return 0
    finally:
        server.shutdown()


def cmd_replay(args: argparse.Namespace) -> int:
    import json

    recorded = reports.read_report_json(args.out_dir)
    if recorded is None:
        raise ScenarioError(
            f"no report.json under {args.out_dir!r}; run a scenario first")
    doc = json.loads(recorded)
    if doc.get("annotator") not in (None, "oracle", "none"):
        raise ScenarioError(
            "replay only covers oracle-annotated runs; this report used "
            f"annotator {doc.get('annotator')!r}")
    name = args.scenario or doc.get("scenario")
    if not name:
        raise ScenarioError("report.json does not name its scenario")
    config = load_scenario(name)
    trials = doc.get("aggregates", {}).get("trials_per_arm",
                                           doc.get("trial_count"))
    report = harness.run_scenario(config, int(doc.get("seed", 0)), trials)
    fresh = reports.dumps(report.to_json())
    if fresh == recorded:
        print(f"replay: report.json reproduced byte-for-byte "
              f"({len(fresh)} bytes)")
        return 0
    print("replay: report.json MISMATCH against recorded run",
          file=sys.stderr)
    return 3


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "compare": cmd_compare,
                "serve": cmd_serve, "replay": cmd_replay}
    try:
        return handlers[args.command](args)
    except ScenarioError as err:
        print(f"scenario error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

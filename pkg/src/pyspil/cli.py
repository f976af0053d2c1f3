"""Command-line harness: train, evaluate, sweep and compare.

Exit statuses: 0 success, 2 invalid configuration, 3 numeric failure,
4 usage error (missing or mismatched checkpoint, bad grid, unreadable path).
"""

import argparse
import csv
import itertools
import logging
import sys
import tomllib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple
from warnings import warn

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from pyspil.curves import RunDirectory, mean_curve, write_curve, write_episodes
from pyspil.envmodels import ModelSpec
from pyspil.errors import NumericError, SpilError, UsageError
from pyspil.models import EnvId, ExperimentConfig, ScenarioScript
from pyspil.network import ParamVector
from pyspil.scenarios import builtin_scenarios, load_scenario
from pyspil.trainer import TrainResult, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 4

DEFAULT_RUNS = 5
ROBOT_SCENARIO_EPISODES = 500
DEFAULT_EPISODES = 4096
# Sweep evaluations draw from a stream disjoint from the training seeds.
EVAL_SEED_OFFSET = 1_000_000
# Trailing window for the oscillation measure of the compare report.
TAIL_WINDOW = 200

SWEEP_FILE = "sweep.csv"
ALIGNMENT_FILE = "alignment.csv"
MEAN_CURVE_FILE = "curve_mean.csv"


def build_env(config: ExperimentConfig, scenario: Optional[ScenarioScript] = None) -> ModelSpec:
    kwargs: Dict[str, Any] = {"horizon": config.trainer.n, "gamma": config.trainer.gamma}
    if scenario is not None:
        kwargs["scenario"] = scenario
    return ModelSpec.from_id(config.env, **kwargs)


def run_training(config: ExperimentConfig, output_dir: Path) -> TrainResult:
    """Train one configuration into `output_dir` (config copy, curve, checkpoints)."""
    env = build_env(config)
    with RunDirectory(output_dir, config.checkpoint_interval) as run:
        run.write_config(config)
        result = train(
            env,
            config.trainer,
            config.multiplier,
            config.surrogate,
            on_iteration=run.on_iteration,
        )
        run.finish(result.actor, result.critic)
    logger.info("run written to %s", output_dir)
    return result


def _run_jobs(fn: Callable, items: Sequence, jobs: int) -> List:
    """Map `fn` over `items`, in worker processes when jobs > 1; order is preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# train


def cmd_train(config_path: Path) -> int:
    config = ExperimentConfig.from_file(config_path)
    result = run_training(config, config.resolved_output_dir())
    if result.records:
        final = result.records[-1]
        print(f"final J={final.J:.6g} p_s={final.p_s:.6g} after {final.iteration + 1} iterations")
    else:
        print("no iterations run")
    return EXIT_OK


# evaluate


def cmd_evaluate(
    checkpoint: Path,
    env: EnvId,
    episodes: Optional[int] = None,
    seed: int = 0,
    horizon: Optional[int] = None,
    output: Optional[Path] = None,
    scenario: Optional[str] = None,
) -> int:
    """Evaluate a saved actor.

    The robot environment runs every packaged scenario, or only `scenario` (a
    packaged name or a .toml file) when one is given.

    Raises:
        UsageError: the checkpoint is missing, a count is not positive, or a
            scenario is given for an environment other than the robot.
    """
    if episodes is not None and episodes <= 0:
        raise UsageError(f"episodes must be positive, got {episodes}")
    if horizon is not None and horizon <= 0:
        raise UsageError(f"horizon must be positive, got {horizon}")
    env = EnvId(env)
    if scenario is not None and env != EnvId.ROBOT:
        raise UsageError(f"--scenario only applies to the robot environment, not {env.value}")
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint {checkpoint} does not exist")
    policy = ParamVector.load(checkpoint)
    output = Path(output) if output is not None else checkpoint.parent
    output.mkdir(parents=True, exist_ok=True)

    if env == EnvId.ROBOT:
        scenarios = [load_scenario(scenario)] if scenario is not None else builtin_scenarios()
        batteries = [(s.name, ModelSpec.from_id(env, scenario=s)) for s in scenarios]
        if episodes is None:
            episodes = ROBOT_SCENARIO_EPISODES
    else:
        batteries = [(env.value, ModelSpec.from_id(env))]
        if episodes is None:
            episodes = DEFAULT_EPISODES

    for name, model in batteries:
        result = evaluate(policy, model, episodes, seed, horizon=horizon)
        write_episodes(output / f"episodes_{name}.csv", result.returns, result.safe)
        print(f"{name}: mean J={result.mean_return:.6g} safe rate={result.safe_rate:.6g} ({episodes} episodes)")
    return EXIT_OK


# sweep


def _flatten(table: dict, prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in table.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


def load_grid(path: Path) -> Tuple[Dict[str, List[Any]], int]:
    """Grid file: a [grid] table of dotted config paths to value lists, optional `runs`.

    Raises:
        UsageError: the file is missing, has no grid, or a grid entry is not a non-empty list.
    """
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as e:
        raise UsageError(f"grid file {path} does not exist") from e
    grid = data.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise UsageError(f"{path} has no [grid] table")
    grid = _flatten(grid)
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise UsageError(f"grid entry {key} must be a non-empty list")
    runs = data.get("runs", DEFAULT_RUNS)
    if not isinstance(runs, int) or runs < 1:
        raise UsageError("runs must be a positive integer")
    return grid, runs


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Copy of `config` with dotted-path fields replaced, validated again.

    Raises:
        UsageError: a path does not name a configuration field.
    """
    data = config.model_dump(mode="json")
    for path, value in overrides.items():
        *parents, leaf = path.split(".")
        node = data
        for key in parents:
            if key in node and node[key] is None:
                node[key] = {}
            if not isinstance(node.get(key), dict):
                raise UsageError(f"{path} is not a configuration field")
            node = node[key]
        if node and leaf not in node:
            raise UsageError(f"{path} is not a configuration field")
        node[leaf] = value
    return ExperimentConfig.model_validate(data)


def _sweep_job(job: Tuple[ExperimentConfig, Path]) -> Tuple[Optional[Tuple[float, float]], str]:
    config, output_dir = job
    try:
        result = run_training(config, output_dir)
        summary = evaluate(
            result.actor,
            build_env(config),
            config.eval_episodes,
            config.trainer.seed + EVAL_SEED_OFFSET,
        )
    except SpilError as e:
        return None, str(e)
    return (summary.mean_return, summary.safe_rate), ""


def _mean_std(values: Iterable[float]) -> Tuple[float, float]:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


def cmd_sweep(config_path: Path, grid_path: Path, output: Optional[Path] = None, jobs: int = 1) -> int:
    """Train every grid cell `runs` times with seeds seed, seed+1, ... and tabulate the outcomes."""
    base = ExperimentConfig.from_file(config_path)
    grid, runs = load_grid(grid_path)
    output = Path(output) if output is not None else base.resolved_output_dir() / "sweep"
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]

    jobs_list = []
    for c, cell in enumerate(cells):
        config = apply_overrides(base, cell)
        for r in range(runs):
            seeded = apply_overrides(config, {"trainer.seed": base.trainer.seed + r})
            jobs_list.append((seeded, output / f"cell{c}_run{r}"))
    logger.info("sweep: %d cells x %d runs", len(cells), runs)
    outcomes = _run_jobs(_sweep_job, jobs_list, jobs)

    output.mkdir(parents=True, exist_ok=True)
    with open(output / SWEEP_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*keys, "reward_mean", "reward_std", "safe_prob_mean", "safe_prob_std", "runs", "failed"])
        for c, cell in enumerate(cells):
            cell_outcomes = outcomes[c * runs : (c + 1) * runs]
            finished = [o for o, _ in cell_outcomes if o is not None]
            for _, message in cell_outcomes:
                if message:
                    warn(f"sweep cell {cell} failed: {message}")
            reward = _mean_std(j for j, _ in finished)
            safe = _mean_std(p for _, p in finished)
            writer.writerow(
                [
                    *(repr(cell[k]) if isinstance(cell[k], float) else cell[k] for k in keys),
                    *(repr(v) for v in (*reward, *safe)),
                    runs,
                    runs - len(finished),
                ]
            )
            print(
                f"{cell}: J={reward[0]:.4g}+-{reward[1]:.3g} "
                f"p_s={safe[0]:.4g}+-{safe[1]:.3g} ({len(finished)}/{runs} runs)"
            )
    return EXIT_OK


# compare


def _check_shared_settings(configs: List[ExperimentConfig], paths: List[Path]) -> None:
    reference = configs[0].model_dump(exclude={"multiplier", "output_dir"})
    for config, path in zip(configs[1:], paths[1:]):
        if config.model_dump(exclude={"multiplier", "output_dir"}) != reference:
            raise UsageError(
                f"{path.name} differs from {paths[0].name} outside [multiplier]; "
                "pass --allow-differences to compare anyway"
            )


def _compare_job(job: Tuple[ExperimentConfig, Path]) -> TrainResult:
    config, output_dir = job
    return run_training(config, output_dir)


def _seed_runs(config: ExperimentConfig, mode_dir: Path, runs: int) -> List[Tuple[ExperimentConfig, Path]]:
    """Seeds seed, seed+1, ... of one configuration, each into mode_dir/run<r>."""
    return [
        (apply_overrides(config, {"trainer.seed": config.trainer.seed + r}), mode_dir / f"run{r}")
        for r in range(runs)
    ]


def cmd_compare(
    config_dir: Path,
    output: Optional[Path] = None,
    allow_differences: bool = False,
    jobs: int = 1,
    runs: int = DEFAULT_RUNS,
) -> int:
    """Train every *.toml in `config_dir` over `runs` shared seeds and report how the modes line up.

    Every configuration writes one run directory per seed and a `curve_mean.csv`
    averaged over its seeds; `alignment.csv` has one row per configuration.
    """
    if runs < 1:
        raise UsageError(f"runs must be a positive integer, got {runs}")
    paths = sorted(Path(config_dir).glob("*.toml"))
    if not paths:
        raise UsageError(f"no .toml configurations in {config_dir}")
    configs = [ExperimentConfig.from_file(p) for p in paths]
    if not allow_differences:
        _check_shared_settings(configs, paths)
    output = Path(output) if output is not None else configs[0].resolved_output_dir() / "compare"

    jobs_list = []
    for config, path in zip(configs, paths):
        jobs_list.extend(_seed_runs(config, output / path.stem, runs))
    logger.info("compare: %d configurations x %d runs", len(configs), runs)
    results = _run_jobs(_compare_job, jobs_list, jobs)

    output.mkdir(parents=True, exist_ok=True)
    with open(output / ALIGNMENT_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "run",
                "mode",
                "k_p",
                "k_i",
                "delta",
                "runs",
                "p_s_initial",
                "p_s_final_mean",
                "p_s_final_std",
                "p_s_tail_std",
                "J_final_mean",
                "J_final_std",
            ]
        )
        for i, (path, config) in enumerate(zip(paths, configs)):
            curves = [result.records for result in results[i * runs : (i + 1) * runs]]
            write_curve(mean_curve(curves), output / path.stem / MEAN_CURVE_FILE)
            finished = [records for records in curves if records]
            p_s_initial = _mean_std(records[0].p_s for records in finished)[0]
            p_s_final = _mean_std(records[-1].p_s for records in finished)
            tail = _mean_std(float(np.std([r.p_s for r in records[-TAIL_WINDOW:]])) for records in finished)[0]
            j_final = _mean_std(records[-1].J for records in finished)
            multiplier = config.multiplier
            writer.writerow(
                [path.stem, multiplier.mode.value, repr(multiplier.k_p), repr(multiplier.k_i), repr(multiplier.delta)]
                + [runs]
                + [repr(v) for v in (p_s_initial, *p_s_final, tail, *j_final)]
            )
            print(
                f"{path.stem} ({multiplier.mode.value}): p_s {p_s_initial:.4g} -> "
                f"{p_s_final[0]:.4g}+-{p_s_final[1]:.3g}, J={j_final[0]:.4g}+-{j_final[1]:.3g} ({runs} runs)"
            )
    return EXIT_OK


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="pyspil",
        description="Chance-constrained actor-critic training with PID-style multiplier control.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config", type=Path)
    p.set_defaults(func=lambda a: cmd_train(a.config))

    p = sub.add_parser("evaluate", help="evaluate a saved actor without learning")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--env", required=True, choices=[e.value for e in EnvId])
    p.add_argument("--episodes", type=int, help="episodes per battery (default 4096, robot 500 per scenario)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int)
    p.add_argument("--output", type=Path, help="directory for per-episode CSVs (default: next to the checkpoint)")
    p.add_argument("--scenario", help="robot only: one packaged scenario name or a scenario .toml file")
    p.set_defaults(
        func=lambda a: cmd_evaluate(a.checkpoint, a.env, a.episodes, a.seed, a.horizon, a.output, a.scenario)
    )

    p = sub.add_parser("sweep", help="train a parameter grid over several seeds")
    p.add_argument("config", type=Path)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--output", type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=lambda a: cmd_sweep(a.config, a.grid, a.output, a.jobs))

    p = sub.add_parser("compare", help="train a directory of configurations side by side")
    p.add_argument("config_dir", type=Path)
    p.add_argument("--output", type=Path)
    p.add_argument("--allow-differences", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--runs", type=int, default=DEFAULT_RUNS, help="seeds per configuration, shared across modes")
    p.set_defaults(
        func=lambda a: cmd_compare(a.config_dir, a.output, a.allow_differences, a.jobs, a.runs)
    )
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = _parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)

    try:
        return args.func(args)
    except (ValidationError, tomllib.TOMLDecodeError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""
Verify Service Module

Self-checks of the numerics and of completed experiments. Every check returns
a CheckResult; the CLI exits nonzero when any of them fails.

    gradient_check          analytic vs central finite differences, full CNN
    quadratic_oracle        trapezoid attribution on L = 1/2 sum a_i theta_i^2
    quadrature_convergence  refining K on one recorded IDL-invert trajectory
    layer_pattern           qualitative per-layer ordering over stored runs
"""

import math
import statistics
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from forgetloc.engine.attribution import (
    LossField, ModelLossField, QuadraticLossField, TrajectoryRecorder, attribute_path, attribute_trajectory,
    replay, trajectory_from_path
)
from forgetloc.engine.network import Batch, ConvNet, build_model, gradients
from forgetloc.models.schemas import (
    AttributionReport, BlockKind, CheckResult, Mode, ModelConfig, PathIntegralConfig,
    Quadrature, ScenarioKind, ScenarioSpec, TrainConfig
)
from forgetloc.services.data_service import DataService
from forgetloc.services.report_service import aggregate
from forgetloc.services.results_service import load_run_results
from forgetloc.services.scenario_service import build_sequence
from forgetloc.services.training_service import run_sequence_with_attribution
from forgetloc.utils.exceptions import InvalidInputError
from forgetloc.utils.logger import logger

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
# below this magnitude both gradients are treated as zero-scale
FD_FLOOR = 1e-6

PATTERN_THRESHOLD = 0.8

# trapezoid K=4 relative error allowed; K=2 below CONVERGED_ERROR needs no further halving
CONVERGENCE_LIMIT = 0.05
CONVERGED_ERROR = 1e-9

# ============================================================================
# GRADIENTS
# ============================================================================

def _loss_at(model: ConvNet, batch: Batch, head_id: int) -> float:
    return gradients(model, batch, head_id, Mode.EVAL)[0]


def gradient_check(seeds: Sequence[int], coords: int = 200, batch_size: int = 8,
                   h: float = FD_STEP, tolerance: float = FD_TOLERANCE) -> CheckResult:
    """Central differences on coordinates spread round-robin over every block"""
    worst, failures = 0.0, []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = build_model(ModelConfig(), seed)
        # nonzero biases keep pre-activations off the relu kink at zero
        for block in model.blocks:
            if block.kind is BlockKind.BIAS:
                block.values.data[...] = rng.normal(0.0, 0.05, size=block.shape)
        batch = Batch(images=rng.uniform(0.0, 1.0, size=(batch_size, 28, 28, 1)),
                      labels=rng.integers(0, 10, size=batch_size))
        _, analytic = gradients(model, batch, 0, Mode.EVAL)

        seed_worst = 0.0
        for i in range(coords):
            block = model.blocks[i % len(model.blocks)]
            index = np.unravel_index(int(rng.integers(block.size)), block.shape)
            values = block.values.data
            original = values[index]
            values[index] = original + h
            plus = _loss_at(model, batch, 0)
            values[index] = original - h
            minus = _loss_at(model, batch, 0)
            values[index] = original

            numeric = (plus - minus) / (2.0 * h)
            exact = float(analytic[block.name][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), FD_FLOOR)
            seed_worst = max(seed_worst, error)
            if error > tolerance:
                failures.append({"seed": seed, "block": block.name, "index": [int(j) for j in index],
                                 "analytic": exact, "numeric": numeric, "relative_error": error})
        logger.info(f"Gradient check seed {seed}: max relative error {seed_worst:.3g}")
        worst = max(worst, seed_worst)

    return CheckResult(
        name="gradients",
        passed=not failures,
        details={"seeds": len(seeds), "coords_per_seed": coords, "max_relative_error": worst,
                 "tolerance": tolerance, "failures": failures[:10]}
    )

# ============================================================================
# QUADRATIC ORACLE
# ============================================================================

QUADRATIC_SHAPES = {"w": (4, 3), "b": (3,)}


def _random_path(rng: np.random.Generator, start: Dict[str, np.ndarray], end: Dict[str, np.ndarray],
                 steps: int) -> List[Dict[str, np.ndarray]]:
    """start, steps-1 jittered interior points, end"""
    path = [start]
    for j in range(1, steps):
        s = j / steps
        path.append({n: (1 - s) * start[n] + s * end[n] + rng.normal(0.0, 0.3, size=start[n].shape)
                     for n in start})
    path.append(end)
    return path


def quadratic_oracle(seed: int = 0, steps: int = 50, trials: int = 5) -> CheckResult:
    """Trapezoid attribution is exact (up to rounding) when the gradient field is linear"""
    config = PathIntegralConfig(quadrature=Quadrature.TRAPEZOID, substeps=1)
    rng = np.random.default_rng(seed)
    worst_total, worst_coord, worst_path = 0.0, 0.0, 0.0

    for _ in range(trials):
        curvature = {n: rng.uniform(0.1, 5.0, size=s) for n, s in QUADRATIC_SHAPES.items()}
        field = QuadraticLossField(curvature)
        start = {n: rng.normal(0.0, 1.0, size=s) for n, s in QUADRATIC_SHAPES.items()}
        end = {n: rng.normal(0.0, 2.0, size=s) for n, s in QUADRATIC_SHAPES.items()}

        trajectory = trajectory_from_path(_random_path(rng, start, end, steps))
        first_ledger, first = replay(field, trajectory, config)
        second = attribute_path(field, _random_path(rng, start, end, steps), config)
        finish = trajectory.end()

        worst_total = max(worst_total, abs(first.approx_delta - first.exact_delta) / abs(first.exact_delta))
        worst_path = max(worst_path, abs(first.approx_delta - second.approx_delta) / abs(first.exact_delta))
        for name, contributions in first_ledger.contributions.items():
            expected = 0.5 * curvature[name] * (finish[name] ** 2 - start[name] ** 2)
            worst_coord = max(worst_coord, float(np.max(np.abs(contributions - expected))))

    passed = worst_total <= 1e-12 and worst_coord <= 1e-10 and worst_path <= 1e-12
    logger.info(f"Quadratic oracle: total {worst_total:.3g}, per-coordinate {worst_coord:.3g}, "
                f"path independence {worst_path:.3g}")
    return CheckResult(
        name="quadratic-oracle",
        passed=passed,
        details={"trials": trials, "steps": steps, "total_relative_error": worst_total,
                 "coordinate_abs_error": worst_coord, "path_relative_difference": worst_path}
    )

# ============================================================================
# QUADRATURE CONVERGENCE
# ============================================================================

def refinement_errors(field: LossField, trajectory: TrajectoryRecorder, path_config: PathIntegralConfig,
                      substeps: Sequence[int] = (1, 2, 4, 8)) -> Dict[str, float]:
    """Relative error of trapezoid K for each K, plus left Riemann, on one trajectory"""
    errors: Dict[str, float] = {}
    for k in substeps:
        report = attribute_trajectory(field, trajectory, path_config.model_copy(update={"substeps": k}))
        errors[f"trapezoid-{k}"] = report.relative_error
    left = attribute_trajectory(
        field, trajectory,
        path_config.model_copy(update={"quadrature": Quadrature.LEFT_RIEMANN, "substeps": 1})
    )
    errors["left-1"] = left.relative_error
    return errors


def convergence_verdict(errors: Mapping[str, float]) -> Tuple[bool, bool]:
    """(passed, halved): K=4 within CONVERGENCE_LIMIT, and K=8 at most half of K=2"""
    k4 = errors.get("trapezoid-4", math.inf)
    k2, k8 = errors.get("trapezoid-2", math.inf), errors.get("trapezoid-8", math.inf)
    halves = k2 <= CONVERGED_ERROR or k8 <= 0.5 * k2
    return k4 <= CONVERGENCE_LIMIT and halves, halves


def quadrature_convergence(service: Optional[DataService] = None, seed: int = 0, train_limit: int = 2000,
                           epochs: int = 2, eval_size: int = 512,
                           substeps: Sequence[int] = (1, 2, 4, 8)) -> CheckResult:
    """Replays one recorded task-B trajectory under trapezoid K = 1, 2, 4, 8 and left Riemann"""
    service = service or DataService()
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.IDL_INVERT, seed=seed), service)
    train_config = TrainConfig(epochs=epochs, batch_size=128, train_limit=train_limit)
    path_config = PathIntegralConfig(eval_set_size=eval_size, eval_set_seed=seed)
    outcome = run_sequence_with_attribution(sequence, train_config, path_config, seed, record_trajectory=True)

    task_a = sequence.tasks[0]
    field = ModelLossField(outcome.model, task_a.eval_set(eval_size, seed), task_a.head_id)
    trajectory = outcome.trajectories[0]

    errors = refinement_errors(field, trajectory, path_config, substeps)
    passed, halves = convergence_verdict(errors)
    logger.info("Quadrature convergence: " + ", ".join(f"{k}={v:.3g}" for k, v in errors.items()))
    return CheckResult(
        name="quadrature-convergence",
        passed=passed,
        details={"relative_errors": errors, "steps": len(trajectory.steps),
                 "k4_limit": CONVERGENCE_LIMIT, "k8_vs_k2_halved": halves}
    )

# ============================================================================
# LAYER PATTERN
# ============================================================================

def _aggregate_of(report: AttributionReport, name: str):
    return next(a for a in aggregate(report) if a.block == name)


def _head_weight(report: AttributionReport) -> str:
    return f"head{report.head_id_a}.weight"


def _fraction_check(name: str, outcomes: List[bool], details: Dict) -> CheckResult:
    fraction = sum(outcomes) / len(outcomes)
    details.update({"runs": len(outcomes), "satisfied": sum(outcomes), "fraction": fraction,
                    "threshold": PATTERN_THRESHOLD})
    return CheckResult(name=name, passed=fraction >= PATTERN_THRESHOLD, details=details)


def layer_pattern(experiment_dirs: Sequence[Path], transition: int = 0) -> List[CheckResult]:
    """Qualitative per-layer ordering of stored experiments, one scenario per directory"""
    if not experiment_dirs:
        raise InvalidInputError("layer pattern needs at least one experiment directory")
    checks: List[CheckResult] = []
    for folder in experiment_dirs:
        results = load_run_results(Path(folder))
        reports = [r.reports[transition] for r in results]
        scenario = results[0].scenario
        label = f"{scenario.value}@{Path(folder).name}"

        if scenario is ScenarioKind.ICL_SPLIT:
            outcomes = [abs(_aggregate_of(r, _head_weight(r)).mean_per_element)
                        > abs(_aggregate_of(r, "dense1.weight").mean_per_element) for r in reports]
            checks.append(_fraction_check(f"output-exceeds-first-dense[{label}]", outcomes, {}))
        else:
            outcomes = []
            for r in reports:
                sums = [_aggregate_of(r, n).abs_sum for n in ("dense1.weight", "dense2.weight", _head_weight(r))]
                outcomes.append(sums[0] >= sums[1] >= sums[2])
            checks.append(_fraction_check(f"dense-non-increasing[{label}]", outcomes, {}))

        outcomes = []
        for r in reports:
            aggregates = aggregate(r)
            weights = [a.abs_sum for a in aggregates if a.kind is BlockKind.WEIGHT]
            biases = [a.abs_sum for a in aggregates if a.kind is BlockKind.BIAS]
            outcomes.append(statistics.median(biases) < statistics.median(weights))
        checks.append(_fraction_check(f"bias-below-weight[{label}]", outcomes, {}))

        if scenario is ScenarioKind.ITL:
            heads = [b for r in reports for b in r.blocks if b.head_id is not None]
            untouched = all(b.abs_delta_sum == 0.0 for b in heads)
            checks.append(CheckResult(name=f"head-isolation[{label}]", passed=untouched,
                                      details={"head_blocks": len(heads)}))
    return checks

"""
Training Service Module

Trains the CNN through a task sequence and tracks, at every transition, how
each parameter contributed to the change of the previous task's loss while
the next task is learned.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from forgetloc.engine.attribution import (
    ModelLossField, TrajectoryRecorder, begin_tracking, finalize, record_step
)
from forgetloc.engine.network import Batch, ConvNet, accuracy, build_model, gradients
from forgetloc.engine.optim import Optimizer, StepDelta
from forgetloc.models.schemas import (
    AttributionReport, Mode, ModelConfig, PathIntegralConfig, RunResult,
    ScenarioSpec, TrackingWindow, TrainConfig
)
from forgetloc.services.data_service import DataService
from forgetloc.services.scenario_service import Task, TaskSequence, build_sequence
from forgetloc.utils.exceptions import InvalidInputError
from forgetloc.utils.logger import logger


def run_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent shuffle and dropout generators of one run"""
    shuffle, drop = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(drop)


class TransitionTracker:
    """Attribution of task A's loss while task B trains, over the configured window"""

    def __init__(self, model: ConvNet, task_a: Task, task_b: Task, transition: int,
                 path_config: PathIntegralConfig, train_config: TrainConfig,
                 eval_seed: int, scenario: Optional[ScenarioSpec] = None,
                 record_trajectory: bool = False):
        self.model = model
        self.task_a = task_a
        self.task_b = task_b
        self.transition = transition
        self.path_config = path_config
        self.train_config = train_config
        self.scenario = scenario
        self.field = ModelLossField(model, task_a.eval_set(path_config.eval_set_size, eval_seed), task_a.head_id)
        self.accuracy_a_before = accuracy(model, task_a.test.images, task_a.test.labels, task_a.head_id)
        start = model.snapshot()
        self.ledger = begin_tracking(self.field, start, path_config)
        self.trajectory = TrajectoryRecorder(start=start) if record_trajectory else None
        self.report: Optional[AttributionReport] = None

    @property
    def active(self) -> bool:
        return self.report is None

    def on_step(self, delta: StepDelta, epoch: int) -> None:
        if not self.active:
            return
        record_step(self.ledger, self.field, delta)
        if self.trajectory is not None:
            self.trajectory.append(delta)

    def on_epoch_end(self, epoch: int) -> None:
        if self.path_config.window is TrackingWindow.FIRST_EPOCH:
            self.close()

    def close(self) -> AttributionReport:
        if self.active:
            self.report = finalize(
                self.ledger, self.field, self.model.params(),
                scenario=self.scenario.kind if self.scenario else None,
                transition=self.transition,
                head_id_a=self.task_a.head_id,
                accuracy_a_before=self.accuracy_a_before,
                accuracy_a_after=accuracy(self.model, self.task_a.test.images,
                                          self.task_a.test.labels, self.task_a.head_id),
                accuracy_b_after=accuracy(self.model, self.task_b.test.images,
                                          self.task_b.test.labels, self.task_b.head_id),
                train_config=self.train_config
            )
        return self.report


def train_task(model: ConvNet, task: Task, config: TrainConfig,
               shuffle_rng: np.random.Generator, dropout_rng: np.random.Generator,
               tracker: Optional[TransitionTracker] = None) -> int:
    """Mini-batch training of one task with a fresh optimizer; returns the number of steps"""
    train = task.train.head(config.train_limit)
    if len(train) == 0:
        raise InvalidInputError(f"task {task.name} has no training examples")
    optimizer = Optimizer(config)
    trainable = [block.name for block in model.trainable_blocks(task.head_id)]
    params = model.params()

    for epoch in range(config.epochs):
        started = time.time()
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch.from_pixels(train.images[idx], train.labels[idx])
            loss, grads = gradients(model, batch, task.head_id, Mode.TRAIN, dropout_rng)
            delta = optimizer.step({name: grads[name] for name in trainable}, params)
            losses.append(loss)
            if tracker is not None:
                tracker.on_step(delta, epoch)
        if tracker is not None:
            tracker.on_epoch_end(epoch)
        logger.info(f"[{task.name}] epoch {epoch + 1}/{config.epochs}: "
                    f"train loss {np.mean(losses):.4f} ({time.time() - started:.1f}s)")
    return optimizer.steps


@dataclass
class SequenceOutcome:
    model: ConvNet
    reports: List[AttributionReport]
    ledgers: List[Dict[str, np.ndarray]] = field(default_factory=list)
    trajectories: List[TrajectoryRecorder] = field(default_factory=list)


def run_sequence_with_attribution(sequence: TaskSequence, train_config: TrainConfig,
                                  path_config: PathIntegralConfig, seed: int,
                                  record_trajectory: bool = False) -> SequenceOutcome:
    """Train every task in order, attributing forgetting of task k while task k+1 trains"""
    if len(sequence) < 2:
        raise InvalidInputError("attribution needs at least two tasks")
    model = build_model(ModelConfig(head_count=sequence.head_count), seed)
    shuffle_rng, dropout_rng = run_streams(seed)
    eval_seed = path_config.eval_set_seed if path_config.eval_set_seed is not None else seed
    outcome = SequenceOutcome(model=model, reports=[])

    for k, task in enumerate(sequence.tasks):
        tracker = None
        if k > 0:
            tracker = TransitionTracker(model, sequence.tasks[k - 1], task, k - 1, path_config,
                                        train_config, eval_seed, sequence.spec, record_trajectory)
        logger.info(f"Training task {k + 1}/{len(sequence)}: {task.name} (head {task.head_id})")
        train_task(model, task, train_config, shuffle_rng, dropout_rng, tracker)
        if tracker is not None:
            outcome.reports.append(tracker.close())
            outcome.ledgers.append(tracker.ledger.contributions)
            if tracker.trajectory is not None:
                outcome.trajectories.append(tracker.trajectory)
    return outcome


def run_with_attribution(sequence: TaskSequence, train_config: TrainConfig,
                         path_config: PathIntegralConfig, seed: int) -> Tuple[ConvNet, AttributionReport]:
    """Two-task case: train A untracked, then B with per-step attribution of A's loss"""
    if len(sequence) != 2:
        raise InvalidInputError(f"run_with_attribution expects two tasks, got {len(sequence)}")
    outcome = run_sequence_with_attribution(sequence, train_config, path_config, seed)
    return outcome.model, outcome.reports[0]

# ============================================================================
# MULTI-RUN EXPERIMENTS
# ============================================================================

@dataclass
class RunArtifacts:
    result: RunResult
    ledgers: List[Dict[str, np.ndarray]]
    model: Optional[ConvNet] = None


def execute_run(spec: ScenarioSpec, train_config: TrainConfig, path_config: PathIntegralConfig,
                run_index: int, seed: int, sequence: Optional[TaskSequence] = None,
                data_dir: Optional[Path] = None, keep_model: bool = False) -> RunArtifacts:
    if sequence is None:
        sequence = build_sequence(spec, DataService(data_dir))
    logger.info(f"Run {run_index} (seed {seed}) started")
    outcome = run_sequence_with_attribution(sequence, train_config, path_config, seed)
    result = RunResult(run_index=run_index, seed=seed, scenario=spec.kind, reports=outcome.reports)
    return RunArtifacts(result=result, ledgers=outcome.ledgers, model=outcome.model if keep_model else None)


def _execute_run_in_worker(args) -> RunArtifacts:
    return execute_run(*args)


def run_experiment(spec: ScenarioSpec, train_config: TrainConfig, path_config: PathIntegralConfig,
                   seed: int, runs: int, workers: int = 1,
                   data_dir: Optional[Path] = None, keep_model: bool = False) -> List[RunArtifacts]:
    """Runs with seeds seed, seed+1, ...; results ordered by run index whatever the worker count"""
    if runs < 1:
        raise InvalidInputError(f"runs must be positive, got {runs}")
    seeds = [seed + i for i in range(runs)]

    if workers <= 1 or runs == 1:
        sequence = build_sequence(spec, DataService(data_dir))
        return [execute_run(spec, train_config, path_config, i, s, sequence, keep_model=keep_model)
                for i, s in enumerate(seeds)]

    jobs = [(spec, train_config, path_config, i, s, None, data_dir, keep_model) for i, s in enumerate(seeds)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        artifacts = list(pool.map(_execute_run_in_worker, jobs))
    return sorted(artifacts, key=lambda a: a.result.run_index)

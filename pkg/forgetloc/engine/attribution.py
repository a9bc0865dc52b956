"""
Attribution Module

Splits the change of an old task's loss along a training trajectory into one
contribution per parameter. Each optimizer step is the straight segment
theta_before + t * delta, t in [0, 1]; along it the old-task gradient is
integrated by quadrature and multiplied with the step's delta, coordinate by
coordinate. The exact endpoint difference of the loss is kept next to the
summed contributions so the approximation error is always reported.

Usage:
    field = ModelLossField(model, eval_set, head_id=0)
    ledger = begin_tracking(field, model.snapshot(), path_config)
    for each optimizer step:
        record_step(ledger, field, step_delta)
    report = finalize(ledger, field, model.params())
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from forgetloc.engine.network import Batch, ConvNet, gradients
from forgetloc.engine.optim import StepDelta
from forgetloc.models.schemas import (
    AttributionReport, BlockInfo, BlockKind, BlockReport, Mode,
    PathIntegralConfig, Quadrature
)
from forgetloc.utils.exceptions import ConsistencyError, InvalidInputError, UsageError
from forgetloc.utils.logger import logger

# ============================================================================
# LOSS FIELDS
# ============================================================================

@dataclass(frozen=True)
class FieldPoint:
    loss: float
    grads: Dict[str, np.ndarray]


class LossField(Protocol):
    """A deterministic scalar loss over named parameter arrays, with its gradient"""

    def evaluate(self, params: Mapping[str, np.ndarray]) -> FieldPoint: ...

    def fingerprint(self) -> str: ...

    def block_infos(self) -> List[BlockInfo]: ...


@dataclass
class EvalSet:
    """Fixed old-task examples that define the tracked loss for a whole run"""
    batch: Batch
    indices: np.ndarray
    fingerprint: str

    def __len__(self) -> int:
        return len(self.batch)

    @staticmethod
    def compute_fingerprint(batch: Batch) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(batch.images).tobytes())
        digest.update(np.ascontiguousarray(batch.labels).tobytes())
        return digest.hexdigest()

    def current_fingerprint(self) -> str:
        return self.compute_fingerprint(self.batch)

    @classmethod
    def draw(cls, pixels: np.ndarray, labels: np.ndarray, size: int, seed: int) -> "EvalSet":
        """Seeded subset without replacement, kept in ascending index order"""
        if size < 1:
            raise InvalidInputError(f"eval set size must be positive, got {size}")
        rng = np.random.default_rng(seed)
        count = min(size, len(labels))
        indices = np.sort(rng.choice(len(labels), size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
        batch = Batch.from_pixels(pixels[indices], labels[indices])
        batch.images.setflags(write=False)
        batch.labels.setflags(write=False)
        return cls(batch=batch, indices=indices, fingerprint=cls.compute_fingerprint(batch))


class ModelLossField:
    """Eval-mode loss of one head of a model on a fixed EvalSet"""

    def __init__(self, model: ConvNet, eval_set: EvalSet, head_id: int):
        model.check_head(head_id)
        if len(eval_set) == 0:
            raise InvalidInputError("the evaluation set is empty; the tracked loss is undefined")
        self.model = model
        self.eval_set = eval_set
        self.head_id = head_id

    def evaluate(self, params: Mapping[str, np.ndarray]) -> FieldPoint:
        with self.model.swapped(params):
            loss, grads = gradients(self.model, self.eval_set.batch, self.head_id, Mode.EVAL)
        return FieldPoint(loss=loss, grads=grads)

    def fingerprint(self) -> str:
        return self.eval_set.current_fingerprint()

    def block_infos(self) -> List[BlockInfo]:
        return self.model.block_infos()


class QuadraticLossField:
    """L(theta) = 1/2 * sum_i a_i * theta_i^2, with an exactly linear gradient"""

    def __init__(self, curvature: Mapping[str, np.ndarray]):
        self.curvature = {name: np.asarray(a, dtype=np.float64) for name, a in curvature.items()}

    def evaluate(self, params: Mapping[str, np.ndarray]) -> FieldPoint:
        loss = math.fsum(0.5 * float(np.sum(a * params[name] ** 2)) for name, a in self.curvature.items())
        return FieldPoint(loss=loss, grads={name: a * params[name] for name, a in self.curvature.items()})

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.curvature):
            digest.update(name.encode())
            digest.update(self.curvature[name].tobytes())
        return digest.hexdigest()

    def block_infos(self) -> List[BlockInfo]:
        return [BlockInfo(name=name, kind=BlockKind.WEIGHT, shape=list(a.shape), position=i)
                for i, (name, a) in enumerate(self.curvature.items())]

# ============================================================================
# LEDGER
# ============================================================================

def quadrature_nodes(config: PathIntegralConfig) -> List[Tuple[float, float]]:
    """(t, weight) pairs on [0, 1] for one optimizer step"""
    k = config.substeps
    if config.quadrature is Quadrature.LEFT_RIEMANN:
        return [(i / k, 1.0 / k) for i in range(k)]
    nodes = [(i / k, 1.0 / k) for i in range(k + 1)]
    nodes[0] = (0.0, 0.5 / k)
    nodes[-1] = (1.0, 0.5 / k)
    return nodes


@dataclass
class AttributionLedger:
    config: PathIntegralConfig
    blocks: List[BlockInfo]
    contributions: Dict[str, np.ndarray]
    loss_start: float
    eval_fingerprint: str
    loss_end: Optional[float] = None
    steps_recorded: int = 0
    loss_trace: List[float] = field(default_factory=list)
    # gradient at the current trajectory point, reused as the next step's t=0 node
    _cursor: Optional[Tuple[Dict[str, np.ndarray], FieldPoint]] = None

    @property
    def approx_total(self) -> float:
        return math.fsum(self.block_sums())

    def block_sums(self) -> List[float]:
        return [float(np.sum(self.contributions[info.name])) for info in self.blocks]


def _matches(cursor_params: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray]) -> bool:
    return all(name in params and np.array_equal(values, params[name])
               for name, values in cursor_params.items())


def _point_at(ledger: AttributionLedger, loss_field: LossField,
              params: Mapping[str, np.ndarray]) -> FieldPoint:
    if ledger._cursor is not None and _matches(ledger._cursor[0], params):
        return ledger._cursor[1]
    point = loss_field.evaluate(params)
    ledger.loss_trace.append(point.loss)
    ledger._cursor = ({name: np.array(v, copy=True) for name, v in params.items()}, point)
    return point


def begin_tracking(loss_field: LossField, params: Mapping[str, np.ndarray],
                   config: PathIntegralConfig) -> AttributionLedger:
    """Zeroed ledger whose start loss is the field evaluated at the transition point"""
    infos = loss_field.block_infos()
    ledger = AttributionLedger(
        config=config,
        blocks=infos,
        contributions={info.name: np.zeros(info.shape, dtype=np.float64) for info in infos},
        loss_start=0.0,
        eval_fingerprint=loss_field.fingerprint()
    )
    ledger.loss_start = _point_at(ledger, loss_field, params).loss
    logger.debug(f"Tracking started: loss_start={ledger.loss_start:.6f}, {len(infos)} blocks")
    return ledger


def record_step(ledger: AttributionLedger, loss_field: LossField, delta: StepDelta) -> AttributionLedger:
    """Accumulate sum_k w_k * g_i(t_k) * delta_i for every coordinate of one step"""
    if ledger.loss_end is not None:
        raise UsageError("ledger is already finalized")
    if loss_field.fingerprint() != ledger.eval_fingerprint:
        raise ConsistencyError("evaluation data changed during tracking")
    for name, d in delta.deltas.items():
        if name not in ledger.contributions:
            raise ConsistencyError(f"step moves {name}, which the ledger does not track")
        if d.shape != ledger.contributions[name].shape:
            raise ConsistencyError(
                f"{name}: delta shape {d.shape} != ledger shape {ledger.contributions[name].shape}"
            )

    ledger.steps_recorded += 1
    if delta.is_zero():
        return ledger

    before = _cursor_base(ledger, delta)
    weighted: Dict[str, np.ndarray] = {}
    for t, weight in quadrature_nodes(ledger.config):
        if t == 0.0:
            point = _point_at(ledger, loss_field, before)
        else:
            node = dict(before)
            for name, d in delta.deltas.items():
                node[name] = before[name] + t * d
            point = loss_field.evaluate(node)
            if t == 1.0:
                ledger.loss_trace.append(point.loss)
                ledger._cursor = (node, point)
        for name in delta.deltas:
            term = weight * point.grads[name]
            weighted[name] = weighted[name] + term if name in weighted else term

    for name, d in delta.deltas.items():
        ledger.contributions[name] += weighted[name] * d
    return ledger


def _cursor_base(ledger: AttributionLedger, delta: StepDelta) -> Dict[str, np.ndarray]:
    """Full parameter dict at the segment start: moved blocks from the delta, the rest from the cursor"""
    if ledger._cursor is None:
        missing = [info.name for info in ledger.blocks if info.name not in delta.before]
        if missing:
            raise UsageError(f"step does not carry start values for {missing[:3]}")
        return dict(delta.before)
    base = dict(ledger._cursor[0])
    base.update(delta.before)
    return base


def finalize(ledger: AttributionLedger, loss_field: LossField, params: Mapping[str, np.ndarray],
             **report_fields) -> AttributionReport:
    """Exact endpoint difference next to the summed per-parameter contributions"""
    if ledger.steps_recorded == 0:
        raise UsageError("cannot finalize a ledger without recorded steps")
    if loss_field.fingerprint() != ledger.eval_fingerprint:
        raise ConsistencyError("evaluation data changed during tracking")
    ledger.loss_end = _point_at(ledger, loss_field, params).loss

    exact = ledger.loss_end - ledger.loss_start
    sums = ledger.block_sums()
    approx = math.fsum(sums)
    relative_error = abs(approx - exact) / max(abs(exact), ledger.config.relative_error_floor)
    logger.info(f"Attribution finalized: exact dL={exact:.6g}, approx={approx:.6g}, "
                f"relative error={relative_error:.3g} over {ledger.steps_recorded} steps")

    blocks = [
        BlockReport(
            name=info.name,
            kind=info.kind,
            shape=info.shape,
            position=info.position,
            head_id=info.head_id,
            n_elements=info.n_elements,
            delta_sum=block_sum,
            abs_delta_sum=float(np.sum(np.abs(ledger.contributions[info.name])))
        )
        for info, block_sum in zip(ledger.blocks, sums)
    ]
    return AttributionReport(
        steps_recorded=ledger.steps_recorded,
        loss_start=ledger.loss_start,
        loss_end=ledger.loss_end,
        exact_delta=exact,
        approx_delta=approx,
        relative_error=relative_error,
        eval_fingerprint=ledger.eval_fingerprint,
        blocks=blocks,
        loss_trace=list(ledger.loss_trace),
        path_config=ledger.config,
        **report_fields
    )

# ============================================================================
# TRAJECTORY REPLAY
# ============================================================================

@dataclass
class TrajectoryRecorder:
    """Start point and every step of a tracked window, for replay under several quadratures"""
    start: Dict[str, np.ndarray]
    steps: List[StepDelta] = field(default_factory=list)

    def append(self, delta: StepDelta) -> None:
        self.steps.append(delta)

    def end(self) -> Dict[str, np.ndarray]:
        current = {name: values.copy() for name, values in self.start.items()}
        for delta in self.steps:
            for name, d in delta.deltas.items():
                current[name] = delta.before[name] + d
        return current


def replay(loss_field: LossField, trajectory: TrajectoryRecorder,
           config: PathIntegralConfig) -> Tuple[AttributionLedger, AttributionReport]:
    """Finalized ledger and report of a recorded trajectory under one quadrature"""
    ledger = begin_tracking(loss_field, trajectory.start, config)
    for delta in trajectory.steps:
        record_step(ledger, loss_field, delta)
    return ledger, finalize(ledger, loss_field, trajectory.end())


def attribute_trajectory(loss_field: LossField, trajectory: TrajectoryRecorder,
                         config: PathIntegralConfig) -> AttributionReport:
    return replay(loss_field, trajectory, config)[1]


def trajectory_from_path(path: Sequence[Mapping[str, np.ndarray]]) -> TrajectoryRecorder:
    """One step per consecutive pair of parameter points"""
    if len(path) < 2:
        raise InvalidInputError("a path needs at least two points")
    current = {n: np.array(v, dtype=np.float64) for n, v in path[0].items()}
    trajectory = TrajectoryRecorder(start={n: v.copy() for n, v in current.items()})
    for step, target in enumerate(path[1:], start=1):
        deltas = {n: np.asarray(target[n], dtype=np.float64) - current[n] for n in current}
        trajectory.append(StepDelta(deltas=deltas, before=current, step=step))
        current = {n: current[n] + deltas[n] for n in current}
    return trajectory


def attribute_path(loss_field: LossField, path: Sequence[Mapping[str, np.ndarray]],
                   config: PathIntegralConfig) -> AttributionReport:
    """Attribution along an explicit sequence of parameter points"""
    return attribute_trajectory(loss_field, trajectory_from_path(path), config)

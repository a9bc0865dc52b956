"""
Scenario Service Module

Builds continual-learning task sequences from the cached datasets:
ITL (MNIST then FashionMNIST, one head per task), IDL by pixel permutation or
intensity inversion (shared head), and ICL by disjoint class splits (shared
10-way head).
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from forgetloc.engine.attribution import EvalSet
from forgetloc.models.schemas import DataSource, ScenarioKind, ScenarioSpec, Split
from forgetloc.services.data_service import DataService, Dataset, data_service
from forgetloc.utils.exceptions import InvalidInputError
from forgetloc.utils.logger import logger


@dataclass(frozen=True)
class Task:
    name: str
    train: Dataset
    test: Dataset
    head_id: int

    def eval_set(self, size: int, seed: int) -> EvalSet:
        """Fixed seeded subset of this task's test split"""
        return EvalSet.draw(self.test.images, self.test.labels, size, seed)


@dataclass(frozen=True)
class TaskSequence:
    spec: ScenarioSpec
    tasks: List[Task]

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def head_count(self) -> int:
        return len({task.head_id for task in self.tasks})


def pixel_permutation(permutation_seed: int, size: int = 28 * 28) -> np.ndarray:
    return np.random.default_rng(permutation_seed).permutation(size)


def permute_pixels(ds: Dataset, permutation_seed: int, identity: bool = False) -> Dataset:
    """Apply one fixed permutation of pixel positions to every image"""
    count, rows, cols, channels = ds.images.shape
    order = np.arange(rows * cols) if identity else pixel_permutation(permutation_seed, rows * cols)
    flat = ds.images.reshape(count, rows * cols, channels)
    permuted = flat[:, order, :].reshape(ds.images.shape)
    return Dataset(permuted, ds.labels.copy(), ds.split, ds.source)


def invert_intensities(ds: Dataset) -> Dataset:
    return Dataset((255 - ds.images).astype(np.uint8), ds.labels.copy(), ds.split, ds.source)


def split_by_classes(ds: Dataset, groups: Sequence[Iterable[int]]) -> List[Dataset]:
    """One dataset per class group, original example order preserved"""
    groups = [sorted(set(group)) for group in groups]
    seen = set()
    for group in groups:
        overlap = seen.intersection(group)
        if overlap:
            raise InvalidInputError(f"class groups overlap on {sorted(overlap)}")
        seen.update(group)
    return [ds.subset(np.flatnonzero(np.isin(ds.labels, group))) for group in groups]


def build_sequence(spec: ScenarioSpec, service: Optional[DataService] = None) -> TaskSequence:
    """Ordered tasks of a scenario; a pure function of `spec` and the files on disk"""
    service = service or data_service
    tasks: List[Task] = []

    if spec.kind is ScenarioKind.ITL:
        for head_id, source in enumerate(spec.sources[:spec.task_count]):
            tasks.append(Task(source.value, service.load(source, Split.TRAIN),
                              service.load(source, Split.TEST), head_id))
        return _finish(spec, tasks)

    mnist_train = service.load(DataSource.MNIST, Split.TRAIN)
    mnist_test = service.load(DataSource.MNIST, Split.TEST)
    if spec.kind is ScenarioKind.IDL_PERMUTE:
        tasks.append(Task("mnist", mnist_train, mnist_test, 0))
        for k in range(1, spec.task_count):
            seed = spec.permutation_seed + k - 1
            tasks.append(Task(f"mnist-permuted-{seed}", permute_pixels(mnist_train, seed),
                              permute_pixels(mnist_test, seed), 0))

    elif spec.kind is ScenarioKind.IDL_INVERT:
        tasks.append(Task("mnist", mnist_train, mnist_test, 0))
        tasks.append(Task("mnist-inverted", invert_intensities(mnist_train), invert_intensities(mnist_test), 0))

    elif spec.kind is ScenarioKind.ICL_SPLIT:
        groups = spec.class_groups[:spec.task_count]
        for group, train, test in zip(groups, split_by_classes(mnist_train, groups),
                                      split_by_classes(mnist_test, groups)):
            tasks.append(Task("classes-" + "".join(map(str, group)), train, test, 0))

    return _finish(spec, tasks)


def _finish(spec: ScenarioSpec, tasks: List[Task]) -> TaskSequence:
    logger.info(f"Built {spec.kind.value} sequence: " +
                ", ".join(f"{t.name} ({len(t.train)} train)" for t in tasks))
    return TaskSequence(spec=spec, tasks=tasks)

import hashlib
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pytest

from forgetloc.config.settings import app_settings
from forgetloc.engine.attribution import FieldPoint
from forgetloc.models.schemas import (
    AttributionReport, BlockInfo, BlockKind, BlockReport, ModelConfig, PathIntegralConfig, RunManifest, RunResult,
    ScenarioKind, ScenarioSpec, TrainConfig
)
from forgetloc.services.data_service import DataService
from forgetloc.services.results_service import write_experiment
from forgetloc.services.training_service import RunArtifacts


TRAIN_SIZE = 80
TEST_SIZE = 40


class QuarticLossField:
    """L = 1/4 * sum theta^4; the gradient is not linear, so quadrature error is visible"""

    def evaluate(self, params):
        theta = params["w"]
        return FieldPoint(loss=float(np.sum(theta ** 4) / 4), grads={"w": theta ** 3})

    def fingerprint(self):
        return hashlib.sha256(b"quartic").hexdigest()

    def block_infos(self):
        return [BlockInfo(name="w", kind=BlockKind.WEIGHT, shape=[2], position=0)]


def write_idx(images_path: Path, labels_path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    """IDX writer independent of the loader: big-endian header, then raw bytes"""
    count, rows, cols = images.shape[:3]
    with open(images_path, "wb") as handle:
        handle.write(struct.pack(">IIII", 0x00000803, count, rows, cols))
        handle.write(bytes(np.asarray(images, dtype=np.uint8).reshape(-1).tolist()))
    with open(labels_path, "wb") as handle:
        handle.write(struct.pack(">II", 0x00000801, len(labels)))
        handle.write(bytes(np.asarray(labels, dtype=np.uint8).tolist()))


def synthetic_split(count: int, seed: int):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
    labels = (np.arange(count) % 10).astype(np.uint8)
    return images, labels


def populate_cache(root: Path, train_size: int = TRAIN_SIZE, test_size: int = TEST_SIZE) -> Path:
    """<root>/<source>/<file> for both sources, small synthetic contents"""
    for offset, source in enumerate(("mnist", "fashion_mnist")):
        folder = root / source
        folder.mkdir(parents=True, exist_ok=True)
        write_idx(folder / "train-images-idx3-ubyte", folder / "train-labels-idx1-ubyte",
                  *synthetic_split(train_size, 10 + offset))
        write_idx(folder / "t10k-images-idx3-ubyte", folder / "t10k-labels-idx1-ubyte",
                  *synthetic_split(test_size, 20 + offset))
    return root


@pytest.fixture
def data_dir(tmp_path) -> Path:
    return populate_cache(tmp_path / "data")


@pytest.fixture
def tiny_service(data_dir) -> DataService:
    return DataService(data_dir)


@pytest.fixture
def results_dir(tmp_path, monkeypatch) -> Path:
    folder = tmp_path / "results"
    monkeypatch.setattr(app_settings, "results_dir", folder)
    return folder


@pytest.fixture(scope="session")
def real_service() -> DataService:
    service = DataService()
    if not service.is_cached("mnist"):
        pytest.skip(f"MNIST is not cached under {service.data_dir}; run `python -m forgetloc fetch`")
    return service


def _report(sums: Dict[str, float], scenario: Optional[ScenarioKind] = ScenarioKind.ICL_SPLIT,
            sizes: Optional[Dict[str, int]] = None, exact: Optional[float] = None) -> AttributionReport:
    sizes = sizes or {}
    blocks = []
    for position, (name, total) in enumerate(sums.items()):
        n = sizes.get(name, 1)
        blocks.append(BlockReport(
            name=name,
            kind=BlockKind.BIAS if name.endswith(".bias") else BlockKind.WEIGHT,
            shape=[n],
            position=position,
            head_id=int(name[4]) if name.startswith("head") else None,
            n_elements=n,
            delta_sum=total,
            abs_delta_sum=abs(total)
        ))
    approx = float(sum(sums.values()))
    exact = approx if exact is None else exact
    return AttributionReport(
        scenario=scenario,
        steps_recorded=1,
        loss_start=0.1,
        loss_end=0.1 + exact,
        exact_delta=exact,
        approx_delta=approx,
        relative_error=abs(approx - exact) / max(abs(exact), 1e-8),
        eval_fingerprint="0" * 64,
        blocks=blocks,
        path_config=PathIntegralConfig()
    )


@pytest.fixture
def report_factory():
    """Builds finalized reports from per-block signed sums"""
    return _report


REFERENCE_BLOCKS = [
    "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense1.weight", "dense1.bias",
    "dense2.weight", "dense2.bias", "head0.weight", "head0.bias",
]


@pytest.fixture
def block_sums():
    """Per-block sums shaped like a 10-block ICL run"""
    def build(seed: int = 0):
        rng = np.random.default_rng(seed)
        return {name: float(rng.uniform(0.0, 0.01 if name.endswith(".bias") else 0.2)) for name in REFERENCE_BLOCKS}
    return build


def store_runs(out_dir: Path, reports: List[AttributionReport], results_dir: Path) -> Path:
    """One stored run per report, laid out like `forgetloc run` output"""
    artifacts = []
    for index, report in enumerate(reports):
        artifacts.append(RunArtifacts(
            result=RunResult(run_index=index, seed=index, scenario=report.scenario, reports=[report]),
            ledgers=[{b.name: np.full(b.shape, b.delta_sum / b.n_elements) for b in report.blocks}]
        ))
    manifest = RunManifest(
        scenario=ScenarioSpec(kind=reports[0].scenario),
        seeds=list(range(len(reports))),
        model=ModelConfig(),
        train=TrainConfig(),
        path=PathIntegralConfig(),
        data_dir=str(out_dir.parent / "data"),
        started_at=datetime(2024, 1, 1, tzinfo=timezone.utc)
    )
    write_experiment(out_dir, manifest, artifacts, results_dir=results_dir)
    return out_dir

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from forgetloc.models.schemas import DataSource, ScenarioKind, ScenarioSpec, Split
from forgetloc.services.data_service import Dataset
from forgetloc.services.scenario_service import (
    build_sequence, invert_intensities, permute_pixels, pixel_permutation, split_by_classes
)
from forgetloc.utils.exceptions import InvalidInputError
from tests.conftest import TEST_SIZE, TRAIN_SIZE


def _dataset(seed: int, count: int = 6, labels=None) -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(count, 28, 28, 1), dtype=np.uint8)
    labels = np.arange(count) % 10 if labels is None else np.asarray(labels)
    return Dataset(images, labels.astype(np.uint8), Split.TRAIN, DataSource.MNIST)


def test_identity_permutation_is_noop():
    """The identity order reproduces every image"""
    ds = _dataset(0)
    assert np.array_equal(permute_pixels(ds, 5, identity=True).images, ds.images)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), data_seed=st.integers(0, 2**16))
def test_permutation_preserves_histograms(seed, data_seed):
    """Pixels move, their multiset per image does not"""
    ds = _dataset(data_seed, count=3)
    permuted = permute_pixels(ds, seed)
    for before, after in zip(ds.images, permuted.images):
        assert np.array_equal(np.sort(before, axis=None), np.sort(after, axis=None))
    assert np.array_equal(permuted.labels, ds.labels)


def test_permutation_is_seeded():
    """Same seed same order; another seed another order"""
    assert np.array_equal(pixel_permutation(3), pixel_permutation(3))
    assert not np.array_equal(pixel_permutation(3), pixel_permutation(4))
    assert np.array_equal(np.sort(pixel_permutation(3)), np.arange(784))


def test_inversion_endpoints():
    """0 maps to 255 and 255 maps to 0"""
    images = np.zeros((1, 28, 28, 1), dtype=np.uint8)
    images[0, 0, 0, 0] = 255
    inverted = invert_intensities(Dataset(images, np.array([1], dtype=np.uint8), Split.TEST, DataSource.MNIST))
    assert inverted.images[0, 0, 0, 0] == 0
    assert inverted.images[0, 1, 1, 0] == 255
    assert inverted.images.dtype == np.uint8


@settings(max_examples=25, deadline=None)
@given(data_seed=st.integers(0, 2**16))
def test_inversion_is_an_involution(data_seed):
    """Inverting twice gives the original images"""
    ds = _dataset(data_seed, count=2)
    assert np.array_equal(invert_intensities(invert_intensities(ds)).images, ds.images)


def test_split_partitions_by_class():
    """Each group keeps exactly its classes, in original order"""
    ds = _dataset(1, count=20)
    parts = split_by_classes(ds, [[0, 1], [2, 3]])
    assert [len(p) for p in parts] == [4, 4]
    assert set(parts[0].labels.tolist()) == {0, 1}
    assert parts[1].labels.tolist() == [2, 3, 2, 3]


def test_split_rejects_overlap():
    """Groups sharing a class are refused"""
    with pytest.raises(InvalidInputError):
        split_by_classes(_dataset(2), [[0, 1], [1, 2]])


def test_split_empty_group():
    """A group with no examples yields an empty dataset"""
    parts = split_by_classes(_dataset(3, count=5, labels=[0, 1, 2, 3, 4]), [[5, 6]])
    assert len(parts[0]) == 0


@pytest.mark.parametrize("kind,names", [
    (ScenarioKind.ITL, ["mnist", "fashion_mnist"]),
    (ScenarioKind.IDL_PERMUTE, ["mnist", "mnist-permuted-0"]),
    (ScenarioKind.IDL_INVERT, ["mnist", "mnist-inverted"]),
    (ScenarioKind.ICL_SPLIT, ["classes-01", "classes-23"]),
])
def test_build_sequence_kinds(tiny_service, kind, names):
    """Two tasks per scenario, named after what they contain"""
    sequence = build_sequence(ScenarioSpec(kind=kind), tiny_service)
    assert [t.name for t in sequence.tasks] == names
    assert sequence.head_count == (2 if kind is ScenarioKind.ITL else 1)


def test_itl_uses_both_sources(tiny_service):
    """Task B of ITL reads the FashionMNIST files on their own head"""
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.ITL), tiny_service)
    fashion = tiny_service.load(DataSource.FASHION_MNIST, Split.TRAIN)
    assert sequence.tasks[1].train is fashion
    assert [t.head_id for t in sequence.tasks] == [0, 1]


def test_icl_sizes_on_synthetic_cache(tiny_service):
    """Labels cycle 0..9, so each two-class group holds a fifth of each split"""
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.ICL_SPLIT, task_count=5), tiny_service)
    assert [len(t.train) for t in sequence.tasks] == [TRAIN_SIZE // 5] * 5
    assert [len(t.test) for t in sequence.tasks] == [TEST_SIZE // 5] * 5


def test_longer_permutation_sequences(tiny_service):
    """Later permutations use consecutive seeds"""
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.IDL_PERMUTE, task_count=4, permutation_seed=7),
                              tiny_service)
    assert [t.name for t in sequence.tasks][1:] == ["mnist-permuted-7", "mnist-permuted-8", "mnist-permuted-9"]


def test_build_sequence_is_pure(tiny_service):
    """Same spec, same pixels"""
    spec = ScenarioSpec(kind=ScenarioKind.IDL_PERMUTE, permutation_seed=11)
    a, b = build_sequence(spec, tiny_service), build_sequence(spec, tiny_service)
    assert np.array_equal(a.tasks[1].train.images, b.tasks[1].train.images)


def test_eval_set_is_seeded(tiny_service):
    """The same seed draws the same examples from the test split"""
    task = build_sequence(ScenarioSpec(kind=ScenarioKind.IDL_INVERT), tiny_service).tasks[0]
    a, b = task.eval_set(16, 3), task.eval_set(16, 3)
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != task.eval_set(16, 4).fingerprint


def test_spec_validation():
    """Inconsistent scenario definitions are rejected up front"""
    with pytest.raises(ValidationError):
        ScenarioSpec(kind=ScenarioKind.ICL_SPLIT, class_groups=[[0, 1], [1, 2]])
    with pytest.raises(ValidationError):
        ScenarioSpec(kind=ScenarioKind.ICL_SPLIT, class_groups=[[0, 10]])
    with pytest.raises(ValidationError):
        ScenarioSpec(kind=ScenarioKind.IDL_INVERT, task_count=3)
    with pytest.raises(ValidationError):
        ScenarioSpec(kind=ScenarioKind.ITL, task_count=1)

# ============================================================================
# REAL DATASETS (skipped without a populated cache)
# ============================================================================

def test_icl_real_split_sizes(real_service):
    """Classes {0,1} and {2,3} of the MNIST training split"""
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.ICL_SPLIT), real_service)
    assert [len(t.train) for t in sequence.tasks] == [12665, 12089]


def test_inverted_mean_intensity(real_service):
    """Inversion maps the mean intensity m to 255 - m"""
    sequence = build_sequence(ScenarioSpec(kind=ScenarioKind.IDL_INVERT), real_service)
    original = sequence.tasks[0].train.images.mean(dtype=np.float64)
    inverted = sequence.tasks[1].train.images.mean(dtype=np.float64)
    assert inverted == pytest.approx(255.0 - original, abs=1e-9)

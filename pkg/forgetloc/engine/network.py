"""
Network Module

The reference CNN (two strided convolutions, two dense layers, one 10-way
output head per task) built on the tensor engine, with forward/loss/gradient
entry points and versioned parameter snapshots.
"""

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from forgetloc.engine.tensor import (
    GradientTape, Tensor, add_bias, backward, conv2d, dropout, flatten,
    matmul, relu, same_padding, softmax, softmax_cross_entropy
)
from forgetloc.models.schemas import BlockInfo, BlockKind, LayerKind, Mode, ModelConfig
from forgetloc.utils.exceptions import ConsistencyError, ExportError, FormatError, InvalidInputError

SNAPSHOT_FORMAT_VERSION = 1


@dataclass
class ParameterBlock:
    name: str
    kind: BlockKind
    values: Tensor
    position: int
    head_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def info(self) -> BlockInfo:
        return BlockInfo(
            name=self.name,
            kind=self.kind,
            shape=list(self.shape),
            position=self.position,
            head_id=self.head_id
        )


@dataclass
class Batch:
    """Normalized images (B x 28 x 28 x 1, values in [0, 1]) with integer labels"""
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, labels: np.ndarray) -> "Batch":
        return cls(
            images=np.asarray(pixels, dtype=np.float64) / 255.0,
            labels=np.asarray(labels, dtype=np.int64)
        )


class ConvNet:
    """Shared convolutional trunk with one output head per task"""

    def __init__(self, config: ModelConfig, blocks: List[ParameterBlock]):
        self.config = config
        self.blocks = blocks
        self._by_name = {block.name: block for block in blocks}
        if len(self._by_name) != len(blocks):
            raise ConsistencyError("parameter block names must be unique")
        layers = config.layers
        self._conv = [layer for layer in layers if layer.kind is LayerKind.CONV]
        self._dense = [layer for layer in layers if layer.kind is LayerKind.DENSE]
        self._head = next(layer for layer in layers if layer.kind is LayerKind.OUTPUT)

    @property
    def head_count(self) -> int:
        return self.config.head_count

    @property
    def parameter_count(self) -> int:
        return sum(block.size for block in self.blocks)

    def block(self, name: str) -> ParameterBlock:
        return self._by_name[name]

    def block_infos(self) -> List[BlockInfo]:
        return [block.info() for block in self.blocks]

    def check_head(self, head_id: int) -> None:
        if not 0 <= head_id < self.head_count:
            raise InvalidInputError(f"head {head_id} does not exist (model has {self.head_count})")

    def trainable_blocks(self, head_id: int) -> List[ParameterBlock]:
        """Trunk blocks plus the blocks of one head"""
        self.check_head(head_id)
        return [b for b in self.blocks if b.head_id is None or b.head_id == head_id]

    def params(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed by block name"""
        return {block.name: block.values.data for block in self.blocks}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {block.name: block.values.data.copy() for block in self.blocks}

    def load_params(self, params: Mapping[str, np.ndarray]) -> None:
        for name, values in params.items():
            block = self._by_name[name]
            if values.shape != block.shape:
                raise ConsistencyError(f"{name}: expected shape {block.shape}, got {values.shape}")
            block.values.data[...] = values

    @contextmanager
    def swapped(self, params: Mapping[str, np.ndarray]) -> Iterator["ConvNet"]:
        """Temporarily evaluate the network at other parameter values"""
        saved = {}
        try:
            for name, values in params.items():
                block = self._by_name[name]
                if values.shape != block.shape:
                    raise ConsistencyError(f"{name}: expected shape {block.shape}, got {values.shape}")
                saved[name] = block.values.data
                block.values.data = np.asarray(values, dtype=np.float64)
            yield self
        finally:
            for name, values in saved.items():
                self._by_name[name].values.data = values

    def forward(self, images: np.ndarray, mode: Mode, head_id: int,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits of the selected head; records on the active tape"""
        self.check_head(head_id)
        expected = tuple(self.config.input_shape)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise InvalidInputError(f"images must be B x {' x '.join(map(str, expected))}, got {images.shape}")

        x = Tensor(images)
        for layer in self._conv:
            x = relu(conv2d(x, self.block(f"{layer.name}.weight").values,
                            self.block(f"{layer.name}.bias").values, layer.stride))
        x = flatten(x)
        for layer in self._dense:
            x = dropout(x, layer.dropout, mode, rng)
            x = relu(add_bias(matmul(x, self.block(f"{layer.name}.weight").values),
                              self.block(f"{layer.name}.bias").values))
        x = dropout(x, self._head.dropout, mode, rng)
        return add_bias(matmul(x, self.block(f"head{head_id}.weight").values),
                        self.block(f"head{head_id}.bias").values)


def _block_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], Tuple[int, ...], Optional[int]]]:
    """(layer name, weight shape, bias shape, head id) in model order"""
    height, width, channels = config.input_shape
    shapes = []
    for layer in config.layers:
        if layer.kind is LayerKind.CONV:
            shapes.append((layer.name, (layer.kernel, layer.kernel, channels, layer.units), (layer.units,), None))
            height = same_padding(height, layer.kernel, layer.stride)[0]
            width = same_padding(width, layer.kernel, layer.stride)[0]
            channels = layer.units
        elif layer.kind is LayerKind.DENSE:
            fan_in = height * width * channels
            shapes.append((layer.name, (fan_in, layer.units), (layer.units,), None))
            height, width, channels = 1, 1, layer.units
        else:
            for head in range(config.head_count):
                shapes.append((f"head{head}", (channels, layer.units), (layer.units,), head))
    return shapes


def build_model(config: ModelConfig, seed: int) -> ConvNet:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, drawn in model order from the seed"""
    rng = np.random.default_rng(seed)
    blocks: List[ParameterBlock] = []
    for name, weight_shape, bias_shape, head_id in _block_shapes(config):
        fan_in = int(np.prod(weight_shape[:-1]))
        bound = 1.0 / math.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=weight_shape)
        blocks.append(ParameterBlock(f"{name}.weight", BlockKind.WEIGHT,
                                     Tensor(weight, name=f"{name}.weight", requires_grad=True),
                                     len(blocks), head_id))
        blocks.append(ParameterBlock(f"{name}.bias", BlockKind.BIAS,
                                     Tensor(np.zeros(bias_shape), name=f"{name}.bias", requires_grad=True),
                                     len(blocks), head_id))
    return ConvNet(config, blocks)


def forward_loss(model: ConvNet, batch: Batch, mode: Mode, head_id: int,
                 rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, GradientTape]:
    with GradientTape() as tape:
        logits = model.forward(batch.images, mode, head_id, rng)
        loss = softmax_cross_entropy(logits, batch.labels)
    return loss, tape


def gradients(model: ConvNet, batch: Batch, head_id: int, mode: Mode = Mode.EVAL,
              rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and gradient for every block; blocks of other heads get exact zeros"""
    loss, tape = forward_loss(model, batch, mode, head_id, rng)
    grads = backward(tape, loss, [block.values for block in model.blocks])
    return loss.item(), grads


def predict(model: ConvNet, pixels: np.ndarray, head_id: int, batch_size: int = 1024) -> np.ndarray:
    """Class probabilities in eval mode"""
    chunks = []
    for start in range(0, len(pixels), batch_size):
        images = np.asarray(pixels[start:start + batch_size], dtype=np.float64) / 255.0
        chunks.append(softmax(model.forward(images, Mode.EVAL, head_id).data))
    return np.concatenate(chunks) if chunks else np.zeros((0, 10))


def accuracy(model: ConvNet, pixels: np.ndarray, labels: np.ndarray, head_id: int) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, pixels, head_id).argmax(axis=1) == labels))

# ============================================================================
# SNAPSHOTS
# ============================================================================

def save_snapshot(model: ConvNet, path: Union[str, Path]) -> Path:
    """Write parameters as .npz with a JSON manifest of (name, kind, shape, head_id)"""
    path = Path(path)
    manifest = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "head_count": model.head_count,
        "blocks": [block.info().model_dump(mode="json") for block in model.blocks],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.savez(handle, __manifest__=np.array(json.dumps(manifest)), **model.params())
    except OSError as e:
        raise ExportError(f"could not write snapshot ({e})", path) from e
    return path


def load_snapshot(path: Union[str, Path], seed: int = 0) -> ConvNet:
    path = Path(path)
    with np.load(path) as archive:
        if "__manifest__" not in archive.files:
            raise FormatError(f"{path} has no snapshot manifest")
        manifest = json.loads(str(archive["__manifest__"]))
        if manifest.get("format_version") != SNAPSHOT_FORMAT_VERSION:
            raise FormatError(f"unsupported snapshot version {manifest.get('format_version')}")
        model = build_model(ModelConfig(head_count=manifest["head_count"]), seed)
        model.load_params({entry["name"]: archive[entry["name"]] for entry in manifest["blocks"]})
    return model

"""
Binary patch classifier: P(dso_present | 224 x 224 x 3 patch).

The network is described by a plain architecture descriptor (a list of
layer dicts) so that checkpoints are self-describing. Attribution works on
the pre-sigmoid logit, `input_gradient` and `path_gradients` expose its
gradient with respect to the input pixels.
"""
import base64
import copy
import hashlib
import json
import math
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
from dsolocate import io
from dsolocate.exceptions import ArtifactIOError, ConfigurationError, DomainError, TrainingError
from dsolocate.synthgen import PATCH_SIZE, DatasetSplit, Label, LabeledPatch
from dsolocate.utils import derive_seed

INPUT_SHAPE = (PATCH_SIZE, PATCH_SIZE, 3)

# probabilities at or above the threshold are dso_present
CLASSIFICATION_THRESHOLD = 0.5

CHECKPOINT_FORMAT = "dsolocate-checkpoint"
CHECKPOINT_VERSION = 1

_EPS = np.finfo(np.float64).eps

ARCHITECTURES: Dict[str, Tuple[dict, ...]] = {
    "desk": (
        {"type": "conv", "channels": 16, "kernel": 3, "stride": 2},
        {"type": "residual", "channels": 16, "stride": 2},
        {"type": "residual", "channels": 32, "stride": 2},
        {"type": "residual", "channels": 64, "stride": 2},
        {"type": "global_pool"},
        {"type": "dense", "units": 1},
    ),
    "deep": (
        {"type": "conv", "channels": 32, "kernel": 7, "stride": 2},
        {"type": "max_pool", "kernel": 3, "stride": 2},
        {"type": "residual", "channels": 32, "stride": 1},
        {"type": "residual", "channels": 32, "stride": 1},
        {"type": "residual", "channels": 64, "stride": 2},
        {"type": "residual", "channels": 64, "stride": 1},
        {"type": "residual", "channels": 128, "stride": 2},
        {"type": "residual", "channels": 128, "stride": 1},
        {"type": "residual", "channels": 256, "stride": 2},
        {"type": "residual", "channels": 256, "stride": 1},
        {"type": "global_pool"},
        {"type": "dense", "units": 1},
    ),
}

class ResidualBlock(nn.Module):

    def __init__(self, in_channels: int, channels: int, stride: int = 1, norm: bool = True):
        super(ResidualBlock, self).__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, stride=stride, padding=1, bias=not norm)
        self.bn1 = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=1, padding=1, bias=not norm)
        self.bn2 = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.relu2 = nn.ReLU()
        if stride != 1 or in_channels != channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, channels, 1, stride=stride, bias=not norm),
                nn.BatchNorm2d(channels) if norm else nn.Identity(),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu2(out + self.shortcut(x))

class PatchClassifier(nn.Module):
    """
    Network built from an architecture descriptor, NCHW in, logits (N,) out.
    """

    def __init__(self, descriptor: Sequence[dict]):
        super(PatchClassifier, self).__init__()
        layers = []
        channels, spatial, features = 3, PATCH_SIZE, None

        for i, layer in enumerate(descriptor):
            kind = layer.get("type")
            if kind == "conv":
                k, s, norm = int(layer.get("kernel", 3)), int(layer.get("stride", 1)), bool(layer.get("norm", True))
                layers += [nn.Conv2d(channels, int(layer["channels"]), k, stride=s, padding=k // 2, bias=not norm)]
                if norm:
                    layers.append(nn.BatchNorm2d(int(layer["channels"])))
                layers.append(nn.ReLU())
                channels, spatial = int(layer["channels"]), (spatial + 2 * (k // 2) - k) // s + 1
            elif kind == "residual":
                s = int(layer.get("stride", 1))
                layers.append(ResidualBlock(channels, int(layer["channels"]), s, bool(layer.get("norm", True))))
                channels, spatial = int(layer["channels"]), (spatial - 1) // s + 1
            elif kind == "max_pool":
                k, s = int(layer.get("kernel", 2)), int(layer.get("stride", layer.get("kernel", 2)))
                layers.append(nn.MaxPool2d(k, s))
                spatial = (spatial - k) // s + 1
            elif kind == "global_pool":
                layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
                features = channels
            elif kind == "flatten":
                layers.append(nn.Flatten())
                features = channels * spatial * spatial
            elif kind == "dense":
                if features is None:
                    raise ConfigurationError(f"layer {i}: dense needs a preceding global_pool or flatten")
                layers.append(nn.Linear(features, int(layer["units"])))
                if layer.get("activation") == "relu":
                    layers.append(nn.ReLU())
                features = int(layer["units"])
            else:
                raise ConfigurationError(f"layer {i}: unknown layer type '{kind}'")
            if spatial < 1:
                raise ConfigurationError(f"layer {i}: feature map collapsed below 1 pixel")

        if not descriptor or descriptor[-1].get("type") != "dense" or int(descriptor[-1].get("units", 0)) != 1:
            raise ConfigurationError("architecture must end with a dense layer of 1 unit (the logit)")

        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x).reshape(-1)

def resolve_architecture(architecture: Union[str, Sequence[dict]]) -> Tuple[dict, ...]:
    if isinstance(architecture, str):
        try:
            return ARCHITECTURES[architecture]
        except KeyError:
            raise ConfigurationError(f"unknown architecture '{architecture}', expected one of {sorted(ARCHITECTURES)}")
    return tuple(dict(layer) for layer in architecture)

def _he_init(network: nn.Module):
    for module in network.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

class ModelParams(object):
    """
    A trained (or freshly initialized) classifier: architecture descriptor
    plus weights. The wrapped network is frozen in eval mode, treat it as
    read-only; `astype` and `with_state` return new instances.
    """

    def __init__(self, descriptor: Sequence[dict], network: PatchClassifier, training_config: Optional[dict] = None):
        self.descriptor = tuple(dict(layer) for layer in descriptor)
        self.network = network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)
        self.training_config = training_config

    @staticmethod
    def initialize(architecture: Union[str, Sequence[dict]] = "desk", seed: int = 0) -> "ModelParams":
        descriptor = resolve_architecture(architecture)
        with _seeded(derive_seed(seed, "init")):
            network = PatchClassifier(descriptor)
            _he_init(network)
        return ModelParams(descriptor, network)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    @property
    def parameter_count(self) -> int:
        return int(sum(p.numel() for p in self.network.parameters()))

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.network.state_dict().items()}

    def with_state(self, state: Dict[str, torch.Tensor]) -> "ModelParams":
        network = PatchClassifier(self.descriptor).to(self.dtype)
        network.load_state_dict(state)
        return ModelParams(self.descriptor, network, self.training_config)

    def astype(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.descriptor, copy.deepcopy(self.network).to(dtype), self.training_config)

    def digest(self) -> str:
        sha = hashlib.sha256()
        for name, tensor in sorted(self.network.state_dict().items()):
            sha.update(name.encode("utf-8"))
            sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return sha.hexdigest()

@contextmanager
def _seeded(seed: int):
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.random.set_rng_state(state)

def _to_tensor(patches: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    # N x H x W x 3 -> N x 3 x H x W
    return torch.from_numpy(np.ascontiguousarray(patches)).to(dtype).permute(0, 3, 1, 2).contiguous()

def _check_shape(patch: np.ndarray, batched: bool = False):
    shape = tuple(np.shape(patch)[1:] if batched else np.shape(patch))
    if shape != INPUT_SHAPE:
        raise DomainError(f"expected a {INPUT_SHAPE} patch, got {shape}")

def _sigmoid(logits: np.ndarray) -> np.ndarray:
    # clipped so that no output is exactly 0 or 1
    p = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return np.clip(p, _EPS, 1.0 - _EPS)

def logits(params: ModelParams, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """
        Pre-sigmoid scores of an N x 224 x 224 x 3 batch.
    """
    _check_shape(patches, batched=True)
    out = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            out.append(params.network(_to_tensor(patches[start:start + batch_size], params.dtype)).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)

def predict_proba(params: ModelParams, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return _sigmoid(logits(params, patches, batch_size))

def forward(params: ModelParams, patch: np.ndarray) -> float:

    """
        P(dso_present) of one patch, in [0,1].

        Args:
            params (ModelParams): Classifier
            patch (np.ndarray): 224 x 224 x 3 intensities in [0,1]

        Returns:
            float
    """

    _check_shape(patch)
    if np.min(patch) < 0.0 or np.max(patch) > 1.0:
        raise DomainError("patch intensities must lie in [0,1]")
    return float(predict_proba(params, np.asarray(patch)[None])[0])

def path_gradients(params: ModelParams, patches: np.ndarray, target: Label = Label.DSO_PRESENT) -> Tuple[np.ndarray, np.ndarray]:

    """
        Scores and their input gradients for a batch, the score being the
        logit for dso_present and its negation for dso_absent.

        Returns:
            (np.ndarray, np.ndarray): scores (N,) and gradients N x H x W x 3
    """

    _check_shape(patches, batched=True)
    sign = 1.0 if Label(target) == Label.DSO_PRESENT else -1.0
    x = _to_tensor(patches, params.dtype).requires_grad_(True)
    with torch.enable_grad():
        scores = sign * params.network(x)
        grads, = torch.autograd.grad(scores.sum(), x)
    return (
        scores.detach().double().numpy(),
        grads.detach().permute(0, 2, 3, 1).double().numpy(),
    )

def input_gradient(params: ModelParams, patch: np.ndarray, target: Label = Label.DSO_PRESENT) -> np.ndarray:
    """
        d(score for target) / d(each input pixel) as a 224 x 224 x 3 grid.
    """
    _check_shape(patch)
    return path_gradients(params, np.asarray(patch)[None], target)[1][0]

@dataclass(frozen=True)
class TrainingConfig:

    optimizer: str = "adam"
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    early_stop: Optional[int] = None
    architecture: Union[str, Tuple[dict, ...]] = "desk"
    deterministic: bool = True
    threads: Optional[int] = None

    def validate(self):
        if self.optimizer.lower() != "adam":
            raise ConfigurationError(f"only the adam optimizer is supported, got '{self.optimizer}'")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop is not None and self.early_stop < 1:
            raise ConfigurationError(f"early_stop patience must be >= 1, got {self.early_stop}")
        resolve_architecture(self.architecture)
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        if not isinstance(self.architecture, str):
            data["architecture"] = [dict(layer) for layer in self.architecture]
        return data

@dataclass
class EpochRecord:

    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

@dataclass
class TrainingHistory:

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

@contextmanager
def _torch_mode(deterministic: bool, threads: Optional[int]):
    previous_threads = torch.get_num_threads()
    previous_mode = torch.are_deterministic_algorithms_enabled()
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(int(threads))
    try:
        yield
    finally:
        torch.set_num_threads(previous_threads)
        torch.use_deterministic_algorithms(previous_mode)

def _stack(patches: Sequence[LabeledPatch]) -> Tuple[np.ndarray, np.ndarray]:
    pixels = np.stack([p.pixels for p in patches]) if patches else np.zeros((0,) + INPUT_SHAPE, dtype=np.uint16)
    labels = np.array([p.label == Label.DSO_PRESENT for p in patches], dtype=np.float32)
    return pixels, labels

def _batch(pixels: np.ndarray, idx: np.ndarray, dtype) -> torch.Tensor:
    return _to_tensor(io.from_uint16(pixels[idx]), dtype)

def _accuracy(network: nn.Module, pixels: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> Optional[float]:
    if len(pixels) == 0:
        return None
    network.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            idx = np.arange(start, min(start + batch_size, len(pixels)))
            probs = _sigmoid(network(_batch(pixels, idx, torch.float32)).double().numpy())
            correct += int(np.sum((probs >= CLASSIFICATION_THRESHOLD) == (labels[idx] > 0.5)))
    return correct / len(pixels)

def train(split: DatasetSplit, config: TrainingConfig = TrainingConfig(), logger = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[ModelParams, TrainingHistory]:

    """
        Minimizes binary cross-entropy with ADAM, evaluating validation
        accuracy after every epoch. With early_stop set, training stops
        after that many epochs without a validation improvement and the
        best weights are returned. Bit-reproducible in deterministic mode.

        Args:
            split (DatasetSplit): Training and validation patches
            config (TrainingConfig): Hyperparameters
            logger: Optional logger, receives one JSON line per epoch
            on_epoch (Callable[[EpochRecord], None]): Optional progress callback

        Returns:
            (ModelParams, TrainingHistory)
    """

    config.validate()
    if not split.train:
        raise DomainError("training split is empty")

    descriptor = resolve_architecture(config.architecture)
    train_pixels, train_labels = _stack(split.train)
    val_pixels, val_labels = _stack(split.val)
    history = TrainingHistory()

    with _torch_mode(config.deterministic, config.threads), _seeded(derive_seed(config.seed, "init")):
        network = PatchClassifier(descriptor)
        _he_init(network)
        optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
        order_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))

        best_state, best_val, stale = None, -1.0, 0
        for epoch in range(1, config.epochs + 1):
            network.train()
            total_loss, correct = 0.0, 0
            order = order_rng.permutation(len(train_pixels))
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                x = _batch(train_pixels, idx, torch.float32)
                y = torch.from_numpy(train_labels[idx])
                try:
                    out = network(x)
                    loss = F.binary_cross_entropy_with_logits(out, y)
                    if not torch.isfinite(loss):
                        raise TrainingError("loss diverged to a non-finite value", epoch)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                except RuntimeError as e:
                    raise TrainingError(f"optimization step failed: {e}", epoch)
                if not all(bool(torch.isfinite(p).all()) for p in network.parameters()):
                    raise TrainingError("weights diverged to non-finite values", epoch)
                total_loss += float(loss.detach()) * len(idx)
                correct += int(torch.sum((out.detach() >= 0.0) == (y > 0.5)))

            seen = max(1, len(train_pixels))
            record = EpochRecord(
                epoch=epoch,
                train_loss=total_loss / seen,
                train_accuracy=correct / seen,
                val_accuracy=_accuracy(network, val_pixels, val_labels),
            )
            if not math.isfinite(record.train_loss):
                raise TrainingError("loss diverged to a non-finite value", epoch)
            history.records.append(record)
            if logger is not None:
                logger.info(record.to_json())
            if on_epoch is not None:
                on_epoch(record)

            score = record.val_accuracy if record.val_accuracy is not None else record.train_accuracy
            if score > best_val:
                best_val, stale, history.best_epoch = score, 0, epoch
                best_state = copy.deepcopy(network.state_dict())
            else:
                stale += 1
            if config.early_stop is not None and stale >= config.early_stop:
                history.stopped_early = True
                if logger is not None:
                    logger.info(f"Early stop at epoch {epoch}, best epoch {history.best_epoch} (val accuracy {best_val:.4f})")
                break

        if config.early_stop is not None and best_state is not None:
            network.load_state_dict(best_state)

    return ModelParams(descriptor, network, config.to_dict()), history

def evaluate_accuracy(params: ModelParams, patches: Sequence[LabeledPatch]) -> float:

    """
        Share of patches whose thresholded prediction (>= 0.5 is present)
        matches the label.
    """

    if not patches:
        raise DomainError("cannot evaluate accuracy on an empty patch list")
    report = classification_report(params, patches)
    return report["accuracy"]

def classification_report(params: ModelParams, patches: Sequence[LabeledPatch]) -> dict:

    """
        Accuracy plus precision and recall of each class.
    """

    if not patches:
        raise DomainError("cannot evaluate an empty patch list")
    pixels, labels = _stack(patches)
    probs = np.concatenate([
        predict_proba(params, io.from_uint16(pixels[start:start + 64]))
        for start in range(0, len(pixels), 64)
    ])
    predicted = probs >= CLASSIFICATION_THRESHOLD
    actual = labels > 0.5

    report = {"accuracy": float(np.mean(predicted == actual)), "count": int(len(patches))}
    for name, positive in ((Label.DSO_PRESENT.value, True), (Label.DSO_ABSENT.value, False)):
        pred_c, true_c = predicted == positive, actual == positive
        tp = int(np.sum(pred_c & true_c))
        report[name] = {
            "precision": tp / int(np.sum(pred_c)) if np.any(pred_c) else 0.0,
            "recall": tp / int(np.sum(true_c)) if np.any(true_c) else 0.0,
            "support": int(np.sum(true_c)),
        }
    return report

def save_checkpoint(params: ModelParams, path, history: Optional[TrainingHistory] = None):

    """
        Writes a single JSON checkpoint:
            {"format": "dsolocate-checkpoint", "version": 1,
             "descriptor": [...], "training_config": {...} | null,
             "parameter_count": int, "history": [...] | null,
             "tensors": {name: {"dtype": str, "shape": [...], "data": base64 little-endian bytes}}}
        Identical weights give identical bytes.
    """

    tensors = {}
    for name, tensor in params.network.state_dict().items():
        array = tensor.detach().cpu().numpy()
        dtype = "<i8" if array.dtype.kind in "iu" else "<f4"
        tensors[name] = {
            "dtype": dtype,
            "shape": list(array.shape),
            "data": base64.b64encode(np.ascontiguousarray(array.astype(dtype)).tobytes()).decode("ascii"),
        }
    io.write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "descriptor": [dict(layer) for layer in params.descriptor],
        "training_config": params.training_config,
        "parameter_count": params.parameter_count,
        "history": [asdict(r) for r in history.records] if history is not None else None,
        "tensors": tensors,
    })

def load_checkpoint(path) -> ModelParams:

    """
        Reads a checkpoint written by save_checkpoint.
    """

    doc = io.read_json(path)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactIOError(path, "not a dsolocate checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ArtifactIOError(path, f"unsupported checkpoint version {doc.get('version')}")

    descriptor = tuple(doc["descriptor"])
    network = PatchClassifier(descriptor)
    state = {}
    for name, entry in doc["tensors"].items():
        array = np.frombuffer(base64.b64decode(entry["data"]), dtype=entry["dtype"]).reshape(entry["shape"])
        state[name] = torch.from_numpy(array.astype(np.int64 if entry["dtype"] == "<i8" else np.float32))
    try:
        network.load_state_dict(state)
    except RuntimeError as e:
        raise ArtifactIOError(path, f"weights do not fit the architecture: {e}")
    return ModelParams(descriptor, network, doc.get("training_config"))

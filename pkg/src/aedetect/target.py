"""The frozen target classifier and its tap points."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aedm
from . import autodiff as ad
from .autodiff import DimensionError, Tape, Tensor
from .data import LabeledSet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class LayerSpec:
    kind: str  # conv | relu | flatten | dense
    units: int = 0  # filters for conv, outputs for dense
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0


@dataclass
class NetworkConfig:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    taps: dict[str, int]  # tap name -> index of the layer whose output is captured
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**{**l, "kernel": tuple(l.get("kernel", (3, 3)))})
                       for l in self.layers]
        idx = list(self.taps.values())
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"tap indices must be strictly increasing, got {idx}")
        if self.layers[-1].kind != "dense" or self.layers[-1].units != self.num_classes:
            raise ValueError("final layer must be dense with num_classes outputs")

    @property
    def tap_names(self) -> list[str]:
        return list(self.taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for l in d["layers"]:
            l["kernel"] = list(l["kernel"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(tuple(d["input_shape"]), list(d["layers"]), dict(d["taps"]), int(d["num_classes"]))


def _stride2_kernel(extent: int) -> int:
    # with padding 1 and stride 2 the extent divides exactly iff kernel parity matches
    return 4 if extent % 2 == 0 else 3


def build_small_convnet(input_shape, num_classes: int) -> NetworkConfig:
    """Three conv+relu blocks and a dense head, tapped after each block and at the logits."""
    c, h, w = (int(v) for v in input_shape)
    if h < 8 or w < 8:
        raise ValueError(f"input must be at least 8x8, got {h}x{w}")
    layers = [LayerSpec("conv", 16, (3, 3), 1, 1), LayerSpec("relu")]
    for filters in (32, 64):
        k = (_stride2_kernel(h), _stride2_kernel(w))
        layers += [LayerSpec("conv", filters, k, 2, 1), LayerSpec("relu")]
        h = ad.conv_output_extent(h, k[0], 2, 1)
        w = ad.conv_output_extent(w, k[1], 2, 1)
    layers += [LayerSpec("flatten"), LayerSpec("dense", num_classes)]
    taps = {"tap1": 1, "tap2": 3, "tap3": 5, "tap4": 7}
    return NetworkConfig((c, int(input_shape[1]), int(input_shape[2])), layers, taps, num_classes)


def layer_shapes(config: NetworkConfig) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer."""
    shape = tuple(config.input_shape)
    out = []
    for spec in config.layers:
        if spec.kind == "conv":
            shape = (spec.units,
                     ad.conv_output_extent(shape[1], spec.kernel[0], spec.stride, spec.padding),
                     ad.conv_output_extent(shape[2], spec.kernel[1], spec.stride, spec.padding))
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            shape = (spec.units,)
        out.append(shape)
    return out


def tap_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = layer_shapes(config)
    return {name: shapes[i] for name, i in config.taps.items()}


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = [tuple(config.input_shape)] + layer_shapes(config)
    out = {}
    for i, spec in enumerate(config.layers):
        fan_in = shapes[i]
        if spec.kind == "conv":
            out[f"layer{i}.w"] = (spec.units, fan_in[0], *spec.kernel)
            out[f"layer{i}.b"] = (spec.units,)
        elif spec.kind == "dense":
            out[f"layer{i}.w"] = (fan_in[0], spec.units)
            out[f"layer{i}.b"] = (spec.units,)
    return out


def init_params(config: NetworkConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
    return params


@dataclass
class TrainedNetwork:
    config: NetworkConfig
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        # frozen: leaves never require grad and their buffers are read-only
        self.params = {k: v if isinstance(v, Tensor) and not v.requires_grad else Tensor(v)
                       for k, v in self.params.items()}

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def _run(config: NetworkConfig, params: dict[str, Tensor], x: Tensor, capture: bool):
    if tuple(x.shape[1:]) != tuple(config.input_shape):
        raise DimensionError(f"input shape {x.shape[1:]} does not match {config.input_shape}")
    taps_at = {i: name for name, i in config.taps.items()} if capture else {}
    acts = {}
    h = x
    for i, spec in enumerate(config.layers):
        if spec.kind == "conv":
            h = ad.conv2d(h, params[f"layer{i}.w"], spec.stride, spec.padding, params[f"layer{i}.b"])
        elif spec.kind == "relu":
            h = ad.relu(h)
        elif spec.kind == "flatten":
            h = ad.flatten(h)
        elif spec.kind == "dense":
            h = ad.dense(h, params[f"layer{i}.w"], params[f"layer{i}.b"])
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if i in taps_at:
            acts[taps_at[i]] = h
    return h, acts


def forward(net: TrainedNetwork, x: Tensor) -> Tensor:
    return _run(net.config, net.params, x, capture=False)[0]


def forward_with_taps(net: TrainedNetwork, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    return _run(net.config, net.params, x, capture=True)


def tap_activations(net: TrainedNetwork, images: np.ndarray, batch_size: int = 256):
    """Batched numpy convenience: (logits, {tap: activations})."""
    logits, acts = [], {name: [] for name in net.config.taps}
    for start in range(0, len(images), batch_size):
        out, taps = forward_with_taps(net, Tensor(images[start:start + batch_size]))
        logits.append(out.data)
        for name, t in taps.items():
            acts[name].append(t.data)
    if not logits:
        raise ValueError("no inputs")
    return np.concatenate(logits), {k: np.concatenate(v) for k, v in acts.items()}


def logits_of(net, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([net(Tensor(images[s:s + batch_size])).data
                           for s in range(0, len(images), batch_size)])


def predict(net, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class ids; ties go to the lowest index."""
    return np.argmax(logits_of(net, images, batch_size), axis=1)


def accuracy(net, dataset: LabeledSet) -> float:
    return float(np.mean(predict(net, dataset.images) == dataset.labels))


def train_classifier(config: NetworkConfig, train: LabeledSet, epochs: int = 3, lr: float = 1e-3,
                     batch: int = 64, seed: int = 0, val_fraction: float = 0.1) -> TrainedNetwork:
    """Adam on mean cross-entropy; a tail of ``train`` is held out for validation."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.labels.min() < 0 or train.labels.max() >= config.num_classes:
        raise ValueError(f"labels must lie in [0, {config.num_classes})")
    init_ss, order_ss = np.random.SeedSequence(seed).spawn(2)
    order_rng = np.random.default_rng(order_ss)
    n_val = int(round(len(train) * val_fraction))
    fit, val = train.subset(slice(0, len(train) - n_val)), train.subset(slice(len(train) - n_val, None))
    params = {k: Tensor(v, requires_grad=True)
              for k, v in init_params(config, np.random.default_rng(init_ss)).items()}
    state = ad.OptimizerState("adam", lr)
    names = list(params)
    last_loss = float("nan")
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(fit))
        for start in range(0, len(fit), batch):
            idx = order[start:start + batch]
            try:
                with Tape() as tape:
                    logits, _ = _run(config, params, Tensor(fit.images[idx]), capture=False)
                    loss = ad.cross_entropy(logits, fit.labels[idx])
            except ad.NonFiniteError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch}, step {step} (last loss {last_loss:.4g}): {exc}") from exc
            grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
            params = ad.optimizer_step(state, params, grads)
            last_loss = loss.item()
            step += 1
        log.info("target epoch %d loss %.4f", epoch + 1, last_loss)
    net = TrainedNetwork(config, {k: Tensor(v.data) for k, v in params.items()})
    net.metadata = {
        "epochs": epochs, "lr": lr, "batch": batch, "seed": seed,
        "final_loss": last_loss,
        "train_accuracy": accuracy(net, fit),
        "val_accuracy": accuracy(net, val) if len(val) else None,
    }
    return net


def save_network(net: TrainedNetwork, stem: str | Path) -> None:
    stem = Path(stem)
    aedm.save(stem.with_suffix(".aedm"), {k: v.data for k, v in net.params.items()})
    sidecar = {"format_version": FORMAT_VERSION, "config": net.config.to_dict(), "metadata": net.metadata}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_network(stem: str | Path) -> TrainedNetwork:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {sidecar.get('format_version')}")
    tensors = aedm.load(stem.with_suffix(".aedm"))
    return TrainedNetwork(NetworkConfig.from_dict(sidecar["config"]),
                          {k: Tensor(v) for k, v in tensors.items()}, sidecar["metadata"])

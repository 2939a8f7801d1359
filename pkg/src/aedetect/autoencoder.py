"""Per-tap Wasserstein autoencoders (MMD prior matching) and manifold features.

Each tap of the target network gets its own encoder/decoder pair trained on
clean activations only. An input is then described per tap by its
reconstruction error (distance from the learned manifold) and latent norm
(position within it), or by the raw latent vector.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aedm
from . import autodiff as ad
from .artifacts import read_csv, write_csv
from .autodiff import DimensionError, Tape, Tensor
from .target import TrainedNetwork, tap_activations

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PROVENANCES = ("clean", "noisy", "adversarial", "unknown")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class AutoencoderConfig:
    tap: str
    input_shape: tuple[int, ...]
    latent_dim: int = 16
    conv_filters: int = 32
    conv_layers: int = 2
    hidden: int = 32  # dense encoder width (rank-1 taps)
    mmd_weight: float = 1.0
    kernel: str = "imq"
    kernel_scale: float | None = None  # defaults to 2 * latent_dim
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.mmd_weight < 0:
            raise ConfigError("mmd_weight must be >= 0")
        if len(self.input_shape) not in (1, 3):
            raise ConfigError(f"tap {self.tap}: unsupported activation rank {len(self.input_shape)}")
        if self.kernel_scale is None:
            self.kernel_scale = 2.0 * self.latent_dim

    @property
    def convolutional(self) -> bool:
        return len(self.input_shape) == 3

    @classmethod
    def for_tap(cls, tap: str, shape, **overrides) -> "AutoencoderConfig":
        """Desk-scale default: Z=16 for spatial taps, Z=8 for flat ones."""
        if "latent_dim" not in overrides:
            overrides["latent_dim"] = 16 if len(shape) == 3 else 8
        return cls(tap=tap, input_shape=tuple(shape), **overrides)


def _stride2_kernel(extent: int) -> int:
    return 4 if extent % 2 == 0 else 3


def _conv_plan(cfg: AutoencoderConfig):
    """Kernel sizes and spatial extents of the encoder's stride-2 stack."""
    c, h, w = cfg.input_shape
    plan = []
    for _ in range(cfg.conv_layers):
        k = (_stride2_kernel(h), _stride2_kernel(w))
        plan.append((k, (h, w)))
        h = ad.conv_output_extent(h, k[0], 2, 1)
        w = ad.conv_output_extent(w, k[1], 2, 1)
    return plan, (cfg.conv_filters, h, w)


def param_shapes(cfg: AutoencoderConfig) -> dict[str, tuple[int, ...]]:
    z = cfg.latent_dim
    if not cfg.convolutional:
        d, hdn = cfg.input_shape[0], cfg.hidden
        return {"enc0.w": (d, hdn), "enc0.b": (hdn,), "enc1.w": (hdn, z), "enc1.b": (z,),
                "dec0.w": (z, hdn), "dec0.b": (hdn,), "dec1.w": (hdn, d), "dec1.b": (d,)}
    plan, bottom = _conv_plan(cfg)
    shapes = {}
    chans = cfg.input_shape[0]
    for i, (k, _) in enumerate(plan):
        shapes[f"enc{i}.w"] = (cfg.conv_filters, chans, *k)
        shapes[f"enc{i}.b"] = (cfg.conv_filters,)
        chans = cfg.conv_filters
    flat = int(np.prod(bottom))
    shapes["enc_fc.w"], shapes["enc_fc.b"] = (flat, z), (z,)
    shapes["dec_fc.w"], shapes["dec_fc.b"] = (z, flat), (flat,)
    # decoder mirrors the encoder: transposed convs in reverse order
    for j, i in enumerate(reversed(range(len(plan)))):
        out_chans = cfg.input_shape[0] if i == 0 else cfg.conv_filters
        shapes[f"dec{j}.w"] = (cfg.conv_filters, out_chans, *plan[i][0])
        shapes[f"dec{j}.b"] = (out_chans,)
    return shapes


def _init(cfg: AutoencoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape, np.float32)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            if name.startswith("dec") and len(shape) == 4:
                fan_in = shape[0] * shape[2] * shape[3] // 4  # stride-2 transpose sees ~1/4 of the taps
            out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return out


def _encode(cfg, p, x: Tensor) -> Tensor:
    if not cfg.convolutional:
        return ad.dense(ad.relu(ad.dense(x, p["enc0.w"], p["enc0.b"])), p["enc1.w"], p["enc1.b"])
    h = x
    for i in range(cfg.conv_layers):
        h = ad.relu(ad.conv2d(h, p[f"enc{i}.w"], 2, 1, p[f"enc{i}.b"]))
    return ad.dense(ad.flatten(h), p["enc_fc.w"], p["enc_fc.b"])


def _decode(cfg, p, z: Tensor) -> Tensor:
    if not cfg.convolutional:
        return ad.dense(ad.relu(ad.dense(z, p["dec0.w"], p["dec0.b"])), p["dec1.w"], p["dec1.b"])
    _, bottom = _conv_plan(cfg)
    h = ad.relu(ad.dense(z, p["dec_fc.w"], p["dec_fc.b"]))
    h = ad.reshape(h, (z.shape[0],) + bottom)
    n = cfg.conv_layers
    for j in range(n):
        h = ad.conv_transpose2d(h, p[f"dec{j}.w"], 2, 1, p[f"dec{j}.b"])
        if j < n - 1:
            h = ad.relu(h)
    return h


def mmd2(a: Tensor, b: Tensor, kind: str = "imq", scale: float = 1.0) -> Tensor:
    """Biased (V-statistic) squared MMD between the rows of ``a`` and ``b``."""
    kaa = ad.mean(ad.kernel_gram(a, a, kind, scale))
    kbb = ad.mean(ad.kernel_gram(b, b, kind, scale))
    kab = ad.mean(ad.kernel_gram(a, b, kind, scale))
    return ad.sub(ad.add(kaa, kbb), ad.scale(kab, 2.0))


@dataclass
class LayerAutoencoder:
    config: AutoencoderConfig
    params: dict[str, Tensor]
    input_scale: float = 1.0
    curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.params = {k: v if isinstance(v, Tensor) and not v.requires_grad else Tensor(v)
                       for k, v in self.params.items()}

    @property
    def smoothed_curve(self) -> list[float]:
        return np.minimum.accumulate(self.curve).tolist() if self.curve else []

    def _check(self, act: np.ndarray) -> np.ndarray:
        act = np.asarray(act, dtype=np.float32)
        if act.shape[1:] != self.config.input_shape:
            raise DimensionError(f"tap {self.config.tap}: activation shape {act.shape[1:]} "
                                 f"!= {self.config.input_shape}")
        return act

    def _scaled(self, act: np.ndarray) -> Tensor:
        return Tensor(act / np.float32(self.input_scale))

    def encode(self, act: np.ndarray, batch_size: int = 256) -> np.ndarray:
        act = self._check(act)
        return np.concatenate([_encode(self.config, self.params, self._scaled(act[s:s + batch_size])).data
                               for s in range(0, len(act), batch_size)])

    def run(self, act: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Latent codes and reconstructions (in activation units)."""
        act = self._check(act)
        lat, rec = [], []
        for s in range(0, len(act), batch_size):
            z = _encode(self.config, self.params, self._scaled(act[s:s + batch_size]))
            lat.append(z.data)
            rec.append(_decode(self.config, self.params, z).data * np.float32(self.input_scale))
        return np.concatenate(lat), np.concatenate(rec)


def reconstruction_error(ae: LayerAutoencoder, act: np.ndarray) -> np.ndarray:
    """Per-sample squared L2 distance between activation and reconstruction."""
    act = ae._check(act)
    _, rec = ae.run(act)
    return _sq_err(act, rec)


def latent_norm(ae: LayerAutoencoder, act: np.ndarray) -> np.ndarray:
    return _norm(ae.encode(act))


def _sq_err(act, rec):
    d = act.astype(np.float64) - rec.astype(np.float64)
    return (d * d).reshape(len(d), -1).sum(axis=1)


def _norm(z):
    return np.sqrt((z.astype(np.float64) ** 2).sum(axis=1))


def train_wae(activations: np.ndarray, config: AutoencoderConfig, provenance: str = "clean") -> LayerAutoencoder:
    """Fit one WAE-MMD on clean activations of a single tap.

    Loss per batch: mean squared reconstruction error (over coordinates) plus
    ``mmd_weight`` times the biased MMD^2 between the batch codes and a fresh
    standard normal sample.
    """
    if provenance != "clean":
        raise ConfigError(f"autoencoders train on clean activations only, got {provenance!r}")
    act = np.asarray(activations, dtype=np.float32)
    if act.shape[1:] != config.input_shape:
        raise ConfigError(f"tap {config.tap}: activations {act.shape[1:]} incompatible with {config.input_shape}")
    if len(act) < 2:
        raise ConfigError("need at least two activations to train")
    init_ss, order_ss, prior_ss = np.random.SeedSequence(config.seed).spawn(3)
    order_rng = np.random.default_rng(order_ss)
    prior_rng = np.random.default_rng(prior_ss)
    scale = float(act.std()) or 1.0
    data = act / np.float32(scale)
    params = {k: Tensor(v, requires_grad=True) for k, v in _init(config, np.random.default_rng(init_ss)).items()}
    names = list(params)
    state = ad.OptimizerState("adam", config.lr)
    curve = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(data))
        total, count = 0.0, 0
        for s in range(0, len(data), config.batch):
            idx = order[s:s + config.batch]
            if len(idx) < 2:
                continue
            xb = Tensor(data[idx])
            prior = Tensor(prior_rng.standard_normal((len(idx), config.latent_dim)).astype(np.float32))
            try:
                with Tape() as tape:
                    z = _encode(config, params, xb)
                    loss = ad.mse(_decode(config, params, z), xb)
                    if config.mmd_weight > 0:
                        penalty = mmd2(z, prior, config.kernel, config.kernel_scale)
                        loss = ad.add(loss, ad.scale(penalty, config.mmd_weight))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"tap {config.tap}: non-finite loss at epoch {epoch}") from exc
            grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
            params = ad.optimizer_step(state, params, grads)
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / max(count, 1))
        log.info("ae %s epoch %d loss %.5f", config.tap, epoch + 1, curve[-1])
    return LayerAutoencoder(config, {k: Tensor(v.data) for k, v in params.items()}, scale, curve)


# ---------------------------------------------------------------- features

@dataclass
class FeatureMatrix:
    sample_ids: np.ndarray
    mode: str  # compact | full
    columns: list[str]
    values: np.ndarray  # (N, len(columns)) float64
    provenance: np.ndarray  # (N,) str

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if self.values.shape != (len(self.sample_ids), len(self.columns)):
            raise DimensionError(f"values {self.values.shape} vs {len(self.sample_ids)} x {len(self.columns)}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def select(self, suffix: str) -> "FeatureMatrix":
        """Columns ending with ``_<suffix>`` (e.g. ``rec_err`` or ``lat_norm``)."""
        keep = [i for i, c in enumerate(self.columns) if c.endswith("_" + suffix)]
        return FeatureMatrix(self.sample_ids, self.mode, [self.columns[i] for i in keep],
                             self.values[:, keep], self.provenance)

    def rows(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.sample_ids[idx], self.mode, list(self.columns), self.values[idx],
                             self.provenance[idx])

    @staticmethod
    def concat(parts: list["FeatureMatrix"]) -> "FeatureMatrix":
        first = parts[0]
        if any(p.columns != first.columns for p in parts):
            raise DimensionError("column layouts differ")
        return FeatureMatrix(np.concatenate([p.sample_ids for p in parts]), first.mode, list(first.columns),
                             np.concatenate([p.values for p in parts]),
                             np.concatenate([p.provenance for p in parts]))


def compact_columns(taps) -> list[str]:
    return [f"{t}_{kind}" for t in taps for kind in ("rec_err", "lat_norm")]


def full_columns(bank: dict[str, LayerAutoencoder], taps) -> list[str]:
    return [f"{t}_z{j}" for t in taps for j in range(bank[t].config.latent_dim)]


def extract_all(net: TrainedNetwork, bank: dict[str, LayerAutoencoder], inputs: np.ndarray,
                provenance: str | np.ndarray = "unknown", sample_ids=None,
                batch_size: int = 256) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Compact and full feature matrices from one forward pass per batch."""
    taps = net.config.tap_names
    missing = [t for t in taps if t not in bank]
    if missing:
        raise ConfigError(f"no autoencoder for taps {missing}")
    n = len(inputs)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    prov = np.full(n, provenance, dtype=object) if isinstance(provenance, str) else np.asarray(provenance, object)
    compact, full = [], []
    for s in range(0, n, batch_size):
        _, acts = tap_activations(net, inputs[s:s + batch_size], batch_size)
        c_cols, f_cols = [], []
        for t in taps:
            z, rec = bank[t].run(acts[t], batch_size)
            c_cols += [_sq_err(acts[t], rec), _norm(z)]
            f_cols.append(z.astype(np.float64))
        compact.append(np.stack(c_cols, axis=1))
        full.append(np.concatenate(f_cols, axis=1))
    cm = FeatureMatrix(ids, "compact", compact_columns(taps), np.concatenate(compact), prov)
    fm = FeatureMatrix(ids, "full", full_columns(bank, taps), np.concatenate(full), prov)
    return cm, fm


def extract_features(net: TrainedNetwork, bank: dict[str, LayerAutoencoder], inputs: np.ndarray,
                     mode: str = "compact", provenance="unknown", sample_ids=None,
                     batch_size: int = 256) -> FeatureMatrix:
    if mode not in ("compact", "full"):
        raise ValueError(f"unknown feature mode {mode!r}")
    cm, fm = extract_all(net, bank, inputs, provenance, sample_ids, batch_size)
    return cm if mode == "compact" else fm


def save_features(fm: FeatureMatrix, path: str | Path) -> None:
    rows = ([int(i), p, *map(float, v)] for i, p, v in zip(fm.sample_ids, fm.provenance, fm.values))
    write_csv(path, ["sample_id", "provenance", *fm.columns], rows)


def load_features(path: str | Path, mode: str | None = None) -> FeatureMatrix:
    header, rows = read_csv(path)
    if header[:2] != ["sample_id", "provenance"]:
        raise ValueError(f"{path}: not a feature matrix")
    cols = header[2:]
    if mode is None:
        mode = "compact" if cols and cols[0].endswith("_rec_err") else "full"
    values = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), len(cols))
    return FeatureMatrix(np.array([int(r[0]) for r in rows], dtype=np.int64), mode, cols, values,
                         np.array([r[1] for r in rows], dtype=object))


# ---------------------------------------------------------------- persistence

def save_bank(bank: dict[str, LayerAutoencoder], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {}
    for tap, ae in bank.items():
        aedm.save(directory / f"ae_{tap}.aedm", {k: v.data for k, v in ae.params.items()})
        meta[tap] = {"config": asdict(ae.config), "input_scale": ae.input_scale,
                     "curve": ae.curve, "smoothed_curve": ae.smoothed_curve}
    (directory / "aes.json").write_text(json.dumps({"format_version": FORMAT_VERSION, "taps": meta},
                                                   indent=2, sort_keys=True))


def load_bank(directory: str | Path) -> dict[str, LayerAutoencoder]:
    directory = Path(directory)
    meta = json.loads((directory / "aes.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported autoencoder bank version {meta.get('format_version')}")
    bank = {}
    for tap, entry in meta["taps"].items():
        cfg = AutoencoderConfig(**entry["config"])
        tensors = aedm.load(directory / f"ae_{tap}.aedm")
        bank[tap] = LayerAutoencoder(cfg, {k: Tensor(v) for k, v in tensors.items()},
                                     entry["input_scale"], entry["curve"])
    return bank

"""Detection protocol and analyses on top of frozen net + AE bank."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import detectors as det
from .artifacts import read_csv, write_csv, write_json
from .attacks import EPS_BOUNDED, AttackSpec, epsilon_sweep, run_attack
from .autoencoder import FeatureMatrix, extract_all
from .data import LabeledSet
from .target import predict


class ProtocolError(ValueError):
    pass


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------- detection dataset

@dataclass
class DetectionDataset:
    """Class 0: correctly classified clean and noisy inputs. Class 1: misclassified adversarials."""
    images: np.ndarray
    labels: np.ndarray  # 0 = clean/noisy, 1 = adversarial
    provenance: np.ndarray  # clean | noisy | adversarial
    source_index: np.ndarray  # row of the originating test sample
    attack: str
    epsilon: float | None

    def __post_init__(self):
        self.provenance = np.asarray(self.provenance, dtype=object)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_ids(self) -> np.ndarray:
        # three candidate rows per test sample
        offset = {"clean": 0, "noisy": 1, "adversarial": 2}
        return 3 * self.source_index + np.array([offset[p] for p in self.provenance], dtype=np.int64)

    @property
    def counts(self) -> dict[str, int]:
        return {p: int(np.sum(self.provenance == p)) for p in ("clean", "noisy", "adversarial")}

    def subset(self, idx) -> "DetectionDataset":
        return DetectionDataset(self.images[idx], self.labels[idx], self.provenance[idx], self.source_index[idx],
                                self.attack, self.epsilon)


def assemble_detection_dataset(clean, noisy, adversarial, labels, pred_clean, pred_noisy, pred_adv,
                               attack: str, epsilon: float | None, source_index=None) -> DetectionDataset:
    """Apply the keep rules to precomputed inputs and predictions."""
    labels = np.asarray(labels)
    src = np.arange(len(labels)) if source_index is None else np.asarray(source_index, dtype=np.int64)
    keep_clean = np.asarray(pred_clean) == labels
    keep_noisy = np.asarray(pred_noisy) == labels
    keep_adv = np.asarray(pred_adv) != labels
    n1 = int(keep_clean.sum() + keep_noisy.sum())
    n2 = int(keep_adv.sum())
    if n1 == 0 or n2 == 0:
        raise ProtocolError(f"{attack}: empty class after filtering (clean+noisy kept {n1}, adversarial kept {n2})")
    parts = [(clean, keep_clean, "clean", 0), (noisy, keep_noisy, "noisy", 0), (adversarial, keep_adv, "adversarial", 1)]
    # interleave by source so the row order is stable under any later filtering
    rows = sorted((int(src[i]), j) for j, (_, keep, _, _) in enumerate(parts) for i in np.flatnonzero(keep))
    pos = {int(s): i for i, s in enumerate(src)}
    images = np.stack([parts[j][0][pos[s]] for s, j in rows]).astype(np.float32)
    return DetectionDataset(images,
                            np.array([parts[j][3] for _, j in rows], dtype=np.int64),
                            np.array([parts[j][2] for _, j in rows], dtype=object),
                            np.array([s for s, _ in rows], dtype=np.int64), attack, epsilon)


def uniform_noise(x: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
    return np.clip(x + u, 0.0, 1.0).astype(np.float32)


def matched_noise(x: np.ndarray, adversarial: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise rescaled per sample to the L2 size of its adversarial perturbation."""
    u = rng.uniform(-1.0, 1.0, size=x.shape)
    flat = u.reshape(len(u), -1)
    target = np.sqrt(((adversarial.astype(np.float64) - x) ** 2).reshape(len(x), -1).sum(axis=1))
    norms = np.linalg.norm(flat, axis=1)
    u = (flat * (target / np.maximum(norms, 1e-12))[:, None]).reshape(x.shape)
    return np.clip(x + u, 0.0, 1.0).astype(np.float32)


def build_detection_dataset(net, test: LabeledSet, spec: AttackSpec, noise_epsilon: float | None = None,
                            seed: int = 0, attack_fn: Callable | None = None,
                            batch_size: int = 128) -> tuple[DetectionDataset, object]:
    """Attack every test sample, add a noisy twin, and filter.

    Noise is uniform in [-e, e] with e = ``noise_epsilon`` (default: the
    attack's epsilon). Attacks without an L-inf budget get L2-matched noise
    unless ``noise_epsilon`` is given. Returns the dataset and the raw attack
    batch (or the perturbed array when a custom ``attack_fn`` is supplied).
    """
    if noise_epsilon is not None and noise_epsilon < 0:
        raise ProtocolError("noise epsilon must be nonnegative")
    x, y = test.images, test.labels
    if attack_fn is None:
        batch = run_attack(net, x, y, spec, batch_size)
        adv = batch.perturbed
    else:
        batch = attack_fn(net, x, y)
        adv = getattr(batch, "perturbed", batch)
    rng = np.random.default_rng(seed)
    if noise_epsilon is None and spec.kind not in EPS_BOUNDED:
        noisy = matched_noise(x, adv, rng)
    else:
        noisy = uniform_noise(x, spec.epsilon if noise_epsilon is None else noise_epsilon, rng)
    ds = assemble_detection_dataset(x, noisy, adv, y, predict(net, x), predict(net, noisy), predict(net, adv),
                                    spec.kind, spec.epsilon if spec.kind in EPS_BOUNDED else None)
    return ds, batch


def split_10_90(labels: np.ndarray, seed: int = 0, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; per class ceil(fraction*n) (at least one) goes to train."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            raise ProtocolError(f"class {cls} has {len(idx)} samples; need at least 2 to split")
        n_train = max(1, math.ceil(fraction * len(idx) - 1e-9))
        perm = rng.permutation(idx)
        train.append(perm[:n_train])
        held.append(perm[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


# ---------------------------------------------------------------- AUROC

def auroc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted half, via midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError(f"AUROC needs both classes (positives {n_pos}, negatives {n_neg})")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # midrank for every run of equal values
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- detectors on features

@dataclass
class DetectorSettings:
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    folds: int = 5
    svm_epochs: int = 300
    svm_lr: float = 0.5
    iforest_trees: int = 100
    iforest_psi: int = 256
    rf_trees: int = 100
    rf_depth: int = 12
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "DetectorSettings":
        d = dict(d or {})
        if "c_grid" in d:
            d["c_grid"] = tuple(float(c) for c in d["c_grid"])
        return cls(**d)


def fit_supervised(x_train, y_train, settings: DetectorSettings):
    """Grid-searched linear SVM; folds shrink when a class is too small for the default."""
    folds = min(settings.folds, int(np.bincount(y_train, minlength=2).min()))
    if folds >= 2 and len(settings.c_grid) > 1:
        c = det.grid_search_cv(x_train, y_train, settings.c_grid, folds, settings.seed,
                               settings.svm_epochs, settings.svm_lr)["C"]
    else:
        c = settings.c_grid[0]
    return det.fit_linear_svm(x_train, y_train, c, settings.svm_epochs, settings.svm_lr, settings.seed)


def supervised_auroc(train: FeatureMatrix, y_train, held: FeatureMatrix, y_held, settings: DetectorSettings):
    model = fit_supervised(train.values, y_train, settings)
    scores = det.svm_score(model, held.values).values
    return auroc(scores, y_held), model, scores


def unsupervised_auroc(clean_train: FeatureMatrix, held: FeatureMatrix, y_held, settings: DetectorSettings):
    if clean_train.columns != held.columns:
        raise LayoutError("clean reference and evaluation features have different columns")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = det.fit_isolation_forest(clean_train.values, settings.iforest_trees, settings.iforest_psi,
                                         settings.seed)
    scores = det.iso_score(model, held.values).values
    return auroc(scores, y_held), model, scores


@dataclass
class AttackFeatures:
    """Everything the analyses need for one attack's detection dataset."""
    dataset: DetectionDataset
    compact: FeatureMatrix
    full: FeatureMatrix
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels


def featurize(net, bank, ds: DetectionDataset, split_seed: int, batch_size: int = 256) -> AttackFeatures:
    compact, full = extract_all(net, bank, ds.images, ds.provenance, ds.sample_ids, batch_size)
    tr, ev = split_10_90(ds.labels, split_seed)
    return AttackFeatures(ds, compact, full, tr, ev)


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    rows: list[dict]  # attack, setting, representation, auroc, n_class1, n_class2, n_train, n_eval
    fingerprint: str

    HEADER = ("attack", "setting", "representation", "auroc", "n_class1", "n_class2", "n_train", "n_eval")

    def auroc(self, attack: str, setting: str, representation: str | None = None) -> float:
        for r in self.rows:
            if r["attack"] == attack and r["setting"] == setting and \
                    (representation is None or r["representation"] == representation):
                return r["auroc"]
        raise KeyError((attack, setting, representation))

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = sorted(self.rows, key=lambda r: (r["attack"], r["setting"], r["representation"]))
        write_csv(directory / "report.csv", self.HEADER, ([r[k] for k in self.HEADER] for r in rows))
        write_json(directory / "summary.json", {"fingerprint": self.fingerprint, "results": rows})

    @classmethod
    def read(cls, directory: str | Path) -> "EvalReport":
        import json
        d = json.loads((Path(directory) / "summary.json").read_text())
        return cls(d["results"], d["fingerprint"])


def evaluate_attack(name: str, af: AttackFeatures, clean_train: FeatureMatrix,
                    settings: DetectorSettings) -> list[dict]:
    """Standard protocol: SVM on full latents and isolation forest on compact features."""
    y = af.labels
    tr, ev = af.train_idx, af.eval_idx
    base = {"attack": name, "n_class1": int((y == 0).sum()), "n_class2": int((y == 1).sum()),
            "n_train": int(len(tr)), "n_eval": int(len(ev))}
    sup, _, _ = supervised_auroc(af.full.rows(tr), y[tr], af.full.rows(ev), y[ev], settings)
    uns, _, _ = unsupervised_auroc(clean_train, af.compact.rows(ev), y[ev], settings)
    return [{**base, "setting": "supervised", "representation": "full", "auroc": sup},
            {**base, "setting": "unsupervised", "representation": "both", "auroc": uns}]


# ---------------------------------------------------------------- importance

@dataclass
class ImportanceReport:
    columns: list[str]
    raw: np.ndarray
    per_tap: dict[str, float]
    per_kind: dict[str, float]

    def to_dict(self) -> dict:
        return {"raw": dict(zip(self.columns, map(float, self.raw))), "per_tap": self.per_tap,
                "per_kind": self.per_kind}


def _compact_layout(columns: Sequence[str]) -> list[str]:
    taps = []
    for i in range(0, len(columns), 2):
        pair = columns[i:i + 2]
        if len(pair) != 2 or not pair[0].endswith("_rec_err") or not pair[1].endswith("_lat_norm") \
                or pair[0][:-len("_rec_err")] != pair[1][:-len("_lat_norm")]:
            raise LayoutError(f"columns {list(pair)} do not follow the compact (rec_err, lat_norm) layout")
        taps.append(pair[0][:-len("_rec_err")])
    return taps


def importance_from_raw(raw, columns: Sequence[str]) -> ImportanceReport:
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) != len(columns):
        raise LayoutError(f"{len(raw)} importances for {len(columns)} columns")
    taps = _compact_layout(columns)
    per_tap = {t: float(raw[2 * i] + raw[2 * i + 1]) for i, t in enumerate(taps)}
    per_kind = {"rec_err": float(raw[0::2].sum()), "lat_norm": float(raw[1::2].sum())}
    return ImportanceReport(list(columns), raw, per_tap, per_kind)


def layer_and_feature_importance(model: det.RandomForestModel, columns: Sequence[str]) -> ImportanceReport:
    if model.n_features != len(columns):
        raise LayoutError(f"forest has {model.n_features} features, layout has {len(columns)}")
    return importance_from_raw(det.rf_importances(model), columns)


def importance_for(af: AttackFeatures, settings: DetectorSettings) -> ImportanceReport:
    # fitted on the whole detection dataset: importance is descriptive, not an evaluation
    rf = det.fit_random_forest(af.compact.values, af.labels, settings.rf_trees, settings.rf_depth, settings.seed)
    return layer_and_feature_importance(rf, af.compact.columns)


# ---------------------------------------------------------------- trajectories and hypotheses

@dataclass
class TrajectoryRecord:
    sample_id: int
    attack: str
    grid: np.ndarray  # (G,) starting at 0
    taps: list[str]
    values: np.ndarray  # (G, n_taps, 2): rec_err, lat_norm

    def __post_init__(self):
        if self.grid[0] != 0:
            raise ValueError("trajectory grid must start at 0")

    def rec_err(self, tap: str) -> np.ndarray:
        return self.values[:, self.taps.index(tap), 0]

    def lat_norm(self, tap: str) -> np.ndarray:
        return self.values[:, self.taps.index(tap), 1]


def compute_trajectories(net, bank, x, y, kind: str, eps_max: float, grid_points: int,
                         sample_ids=None, spec: AttackSpec | None = None,
                         batch_size: int = 256) -> list[TrajectoryRecord]:
    """Attack sweep over linspace(0, 2*eps_max); each grid point is one batched extraction."""
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    grid, inputs = epsilon_sweep(net, x, y, kind, eps_max, grid_points, spec)
    taps = net.config.tap_names
    per_eps = []
    for xe in inputs:
        cm, _ = extract_all(net, bank, xe, "adversarial", ids, batch_size)
        per_eps.append(cm.values.reshape(len(xe), len(taps), 2))
    stacked = np.stack(per_eps, axis=1)  # (N, G, taps, 2)
    return [TrajectoryRecord(int(i), kind, grid, list(taps), stacked[n]) for n, i in enumerate(ids)]


def save_trajectories(records: list[TrajectoryRecord], path: str | Path) -> None:
    rows = ([r.sample_id, r.attack, float(e), t, float(r.values[g, k, 0]), float(r.values[g, k, 1])]
            for r in records for g, e in enumerate(r.grid) for k, t in enumerate(r.taps))
    write_csv(path, ["sample_id", "attack", "epsilon", "tap", "rec_err", "lat_norm"], rows)


def load_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    _, rows = read_csv(path)
    grouped: dict[tuple[int, str], list] = {}
    for sid, attack, eps, tap, rec, lat in rows:
        grouped.setdefault((int(sid), attack), []).append((float(eps), tap, float(rec), float(lat)))
    out = []
    for (sid, attack), items in grouped.items():
        grid = sorted({e for e, *_ in items})
        taps = list(dict.fromkeys(t for _, t, _, _ in items))
        vals = np.zeros((len(grid), len(taps), 2))
        for e, t, rec, lat in items:
            vals[grid.index(e), taps.index(t)] = (rec, lat)
        out.append(TrajectoryRecord(sid, attack, np.array(grid), taps, vals))
    return out


def trajectory_increase_fraction(records: list[TrajectoryRecord], tap: str) -> float:
    """Share of trajectories whose rec_err at the last grid point exceeds its value at 0."""
    return float(np.mean([r.rec_err(tap)[-1] > r.rec_err(tap)[0] for r in records]))


@dataclass
class HypothesisFindings:
    attack: str
    h1_stat: dict[str, float]  # median relative rec_err gain minus latent-norm gain
    h2_auroc: dict[str, float]  # single-feature rec_err AUROC per tap
    h2_effect: dict[str, float]  # AUROC - 0.5
    h1_holds: bool
    h2_holds: bool
    rec_err_dominant: bool | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rel(after, before):
    return (after - before) / np.maximum(np.abs(before), 1e-12)


def hypothesis_checks(attack: str, trajectories: list[TrajectoryRecord] | None = None,
                      features: FeatureMatrix | None = None, labels=None,
                      importance: ImportanceReport | None = None) -> HypothesisFindings:
    """Effect sizes for the two hypotheses.

    H1 comes from trajectories (perpendicular vs. in-manifold movement at the
    largest budget). H2 is the per-tap rec_err AUROC on the detection data
    when given, else from trajectory endpoints against their starting points.
    """
    taps = None
    h1 = {}
    if trajectories:
        if len(trajectories) < 20:
            warnings.warn(f"only {len(trajectories)} trajectories; hypothesis statistics are noisy",
                          RuntimeWarning, stacklevel=2)
        taps = trajectories[0].taps
        for t in taps:
            d = [_rel(r.rec_err(t)[-1], r.rec_err(t)[0]) - _rel(r.lat_norm(t)[-1], r.lat_norm(t)[0])
                 for r in trajectories]
            h1[t] = float(np.median(d))
    h2 = {}
    if features is not None:
        y = np.asarray(labels)
        rec = features.select("rec_err")
        taps = taps or [c[:-len("_rec_err")] for c in rec.columns]
        for j, c in enumerate(rec.columns):
            h2[c[:-len("_rec_err")]] = auroc(rec.values[:, j], y)
    elif trajectories:
        y = np.r_[np.zeros(len(trajectories)), np.ones(len(trajectories))]
        for t in taps:
            s = np.r_[[r.rec_err(t)[0] for r in trajectories], [r.rec_err(t)[-1] for r in trajectories]]
            h2[t] = auroc(s, y)
    taps = taps or []
    deepest, first = (taps[-1], taps[0]) if taps else (None, None)
    return HypothesisFindings(
        attack, h1, h2, {t: v - 0.5 for t, v in h2.items()},
        h1_holds=bool(h1) and h1[deepest] > 0,
        h2_holds=bool(h2) and h2[deepest] >= h2[first],
        rec_err_dominant=None if importance is None else importance.per_kind["rec_err"] > importance.per_kind["lat_norm"])


# ---------------------------------------------------------------- KDE

def kde2d_grid(points, bandwidth, grid) -> np.ndarray:
    """Gaussian product-kernel density at every (xs[i], ys[j]); result[i, j]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (2,))
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")
    xs, ys = (np.asarray(g, dtype=np.float64) for g in grid)
    kx = np.exp(-0.5 * ((xs[:, None] - pts[None, :, 0]) / bw[0]) ** 2) / (bw[0] * math.sqrt(2 * math.pi))
    ky = np.exp(-0.5 * ((ys[:, None] - pts[None, :, 1]) / bw[1]) ** 2) / (bw[1] * math.sqrt(2 * math.pi))
    return kx @ ky.T / len(pts)


def save_kde(path: str | Path, xs, ys, density) -> None:
    write_csv(path, ["x", "y", "density"],
              ([float(x), float(y), float(density[i, j])] for i, x in enumerate(xs) for j, y in enumerate(ys)))


def kde_for_tap(features: FeatureMatrix, labels, tap: str, size: int = 40):
    """Clean-vs-adversarial density grids in the (rec_err, lat_norm) plane of one tap."""
    cols = [features.columns.index(f"{tap}_rec_err"), features.columns.index(f"{tap}_lat_norm")]
    pts = features.values[:, cols]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    xs = np.linspace(lo[0] - 0.1 * span[0], hi[0] + 0.1 * span[0], size)
    ys = np.linspace(lo[1] - 0.1 * span[1], hi[1] + 0.1 * span[1], size)
    bw = np.maximum(pts.std(axis=0) * len(pts) ** (-1 / 6), 1e-9)  # Scott's rule in 2-D
    y = np.asarray(labels)
    return xs, ys, {cls: kde2d_grid(pts[y == k], bw, (xs, ys)) for k, cls in ((0, "normal"), (1, "adversarial"))
                    if np.any(y == k)}


# ---------------------------------------------------------------- studies

def pgd_iteration_study(net, bank, test: LabeledSet, clean_train: FeatureMatrix, iterations: Sequence[int],
                        epsilon: float, settings: DetectorSettings, seed: int = 0) -> dict:
    """Unsupervised AUROC as a function of PGD iteration count."""
    rows = []
    for it in iterations:
        spec = AttackSpec("pgd", epsilon=epsilon, steps=int(it), seed=seed)
        ds, _ = build_detection_dataset(net, test, spec, seed=seed)
        af = featurize(net, bank, ds, seed)
        a, _, _ = unsupervised_auroc(clean_train, af.compact.rows(af.eval_idx), af.labels[af.eval_idx], settings)
        rows.append({"iterations": int(it), "auroc": a, "n_class2": int(ds.labels.sum())})
    values = [r["auroc"] for r in rows]
    return {"rows": rows, "monotone": bool(all(b >= a for a, b in zip(values, values[1:])))}


def transfer_study(source: AttackFeatures, targets: dict[str, AttackFeatures], settings: DetectorSettings) -> dict:
    """Fit the supervised detector on the source train split; score each target's eval split."""
    y = source.labels
    model = fit_supervised(source.full.values[source.train_idx], y[source.train_idx], settings)
    out = {}
    for name, af in sorted(targets.items()):
        ev = af.eval_idx
        out[name] = auroc(det.svm_score(model, af.full.values[ev]).values, af.labels[ev])
    return out


REPRESENTATIONS = ("full", "both", "rec_err", "lat_norm")


def _representation(af: AttackFeatures, rep: str) -> FeatureMatrix:
    if rep == "full":
        return af.full
    if rep == "both":
        return af.compact
    return af.compact.select(rep)


def representation_ablation(af: AttackFeatures, clean_train: FeatureMatrix, settings: DetectorSettings) -> list[dict]:
    y, tr, ev = af.labels, af.train_idx, af.eval_idx
    rows = []
    for rep in REPRESENTATIONS:
        fm = _representation(af, rep)
        a, _, _ = supervised_auroc(fm.rows(tr), y[tr], fm.rows(ev), y[ev], settings)
        rows.append({"setting": "supervised", "representation": rep, "auroc": a})
    for rep in REPRESENTATIONS[1:]:
        ref = clean_train if rep == "both" else clean_train.select(rep)
        a, _, _ = unsupervised_auroc(ref, _representation(af, rep).rows(ev), y[ev], settings)
        rows.append({"setting": "unsupervised", "representation": rep, "auroc": a})
    return rows

"""Experiment configuration, run manifest and stage orchestration."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import aedm
from . import evaluation as ev
from .artifacts import read_csv, read_json, write_csv, write_json
from .attacks import AttackSpec, save_batch
from .autoencoder import (AutoencoderConfig, FeatureMatrix, extract_all, load_bank, load_features, save_bank,
                          save_features, train_wae)
from .data import LabeledSet, derive_seed, load_idx_pair, synth_dataset
from .detectors import save_model, save_scores
from .target import build_small_convnet, load_network, save_network, tap_activations, train_classifier

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "AEDETECT_OUTPUT_ROOT"

STAGES = ("train-target", "train-aes", "attack", "features", "detect", "evaluate", "trajectory", "importance",
          "study-pgd-iters", "study-transfer", "study-ablation")
DEPENDS = {
    "train-target": (),
    "train-aes": ("train-target",),
    "attack": ("train-target",),
    "features": ("train-aes", "attack"),
    "detect": ("features",),
    "evaluate": ("detect",),
    "trajectory": ("train-aes",),
    "importance": ("features", "trajectory"),
    "study-pgd-iters": ("features",),
    "study-transfer": ("features",),
    "study-ablation": ("features",),
}


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


DEFAULTS: dict = {
    "data": {"source": "synthetic", "num_classes": 10, "n_per_class": 350, "image_size": [1, 28, 28],
             "sigma": 0.08, "n_train": 3000, "n_test": 500, "ae_samples": 2000, "reference_samples": 1000},
    "target": {"epochs": 3, "lr": 1e-3, "batch": 64},
    "autoencoder": {"epochs": 8, "lr": 1e-3, "batch": 64, "mmd_weight": 1.0, "conv_filters": 32,
                    "latent_conv": 16, "latent_dense": 8},
    "attacks": {"kinds": ["fgsm", "bim", "pgd", "deepfool", "cw"], "epsilon": 0.3, "noise_epsilon": None,
                "cw_steps": 50, "cw_const": 1.0, "cw_lr": 0.05, "deepfool_steps": 50},
    "detector": {},
    "trajectory": {"attacks": ["fgsm", "bim", "pgd"], "samples": 50, "grid_points": 5, "kde_size": 40},
    "studies": {"pgd_iterations": [1, 5, 10, 20, 40], "transfer_source": "fgsm", "ablation_attack": "fgsm"},
    "output_dir": "run",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """``a.b.c=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path: str | Path, overrides=()) -> "ExperimentConfig":
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        for o in overrides:
            apply_override(user, o)
        return cls.from_dict(user, base_dir=Path(path).parent)

    @classmethod
    def from_dict(cls, user: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if "seed" not in user or not isinstance(user["seed"], int):
            raise ConfigError("config must set an explicit integer 'seed'")
        raw = _merge(DEFAULTS, user)
        data = raw["data"]
        if data["source"] == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in data:
                    raise ConfigError(f"data.{key} is required for idx input")
                p = Path(data[key])
                if not p.is_absolute() and base_dir is not None:
                    p = base_dir / p
                if not p.exists():
                    raise ConfigError(f"data.{key}: {p} does not exist")
                data[key] = str(p.resolve())
        elif data["source"] != "synthetic":
            raise ConfigError(f"unknown data source {data['source']!r}")
        for kind in raw["attacks"]["kinds"]:
            AttackSpec(kind)  # validates the name
        if raw["studies"]["transfer_source"] not in raw["attacks"]["kinds"]:
            raise ConfigError("studies.transfer_source must be one of attacks.kinds")
        ev.DetectorSettings.from_dict(raw["detector"])
        return cls(raw)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def fingerprint(self) -> str:
        payload = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def stage_seed(self, *names: str) -> int:
        return int(derive_seed(self.seed, *names).generate_state(1)[0])

    def output_dir(self) -> Path:
        out = Path(self.raw["output_dir"])
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
        return out

    def detector_settings(self) -> ev.DetectorSettings:
        d = dict(self.raw["detector"])
        d.setdefault("seed", self.stage_seed("detect"))
        return ev.DetectorSettings.from_dict(d)

    def attack_spec(self, kind: str, **over) -> AttackSpec:
        a = self.raw["attacks"]
        kw = {"epsilon": float(a["epsilon"]), "seed": self.stage_seed("attack", kind)}
        if kind == "cw":
            kw.update(steps=int(a["cw_steps"]), cw_const=float(a["cw_const"]), cw_lr=float(a["cw_lr"]))
        elif kind == "deepfool":
            kw.update(steps=int(a["deepfool_steps"]))
        kw.update(over)
        return AttackSpec(kind, **kw)


class RunManifest:
    """Stage completion flags keyed by config fingerprint, persisted as JSON."""

    def __init__(self, path: Path, fingerprint: str):
        self.path = path
        self.fingerprint = fingerprint
        self.stages: dict[str, dict] = {}
        if path.exists():
            data = read_json(path)
            self.stages = data.get("stages", {})

    def done(self, stage: str) -> bool:
        entry = self.stages.get(stage)
        return bool(entry and entry.get("complete") and entry.get("fingerprint") == self.fingerprint)

    def mark(self, stage: str, artifacts: list[str]) -> None:
        self.stages[stage] = {"complete": True, "fingerprint": self.fingerprint, "artifacts": sorted(artifacts)}
        self.save()

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_json(self.path, {"fingerprint": self.fingerprint, "tool_version": __version__,
                               "stages": self.stages})


# ---------------------------------------------------------------- stage context

class Run:
    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.out = cfg.output_dir()
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.out / "manifest.json", cfg.fingerprint())
        self._cache: dict = {}
        self.executed: list[str] = []
        (self.out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # cached loaders -------------------------------------------------
    def datasets(self) -> tuple[LabeledSet, LabeledSet]:
        if "data" not in self._cache:
            d = self.cfg.raw["data"]
            if d["source"] == "synthetic":
                full = synth_dataset(int(d["num_classes"]), int(d["n_per_class"]), tuple(d["image_size"]),
                                     float(d["sigma"]), seed=self.cfg.stage_seed("data"))
                n_train, n_test = int(d["n_train"]), int(d["n_test"])
                if n_train + n_test > len(full):
                    raise ConfigError(f"n_train + n_test = {n_train + n_test} exceeds {len(full)} generated samples")
                train, test = full.subset(slice(0, n_train)), full.subset(slice(n_train, n_train + n_test))
            else:
                train = load_idx_pair(d["train_images"], d["train_labels"])
                test = load_idx_pair(d["test_images"], d["test_labels"])
                if d.get("n_train"):
                    train = train.subset(slice(0, int(d["n_train"])))
                if d.get("n_test"):
                    test = test.subset(slice(0, int(d["n_test"])))
            self._cache["data"] = (train, test)
        return self._cache["data"]

    def net(self):
        if "net" not in self._cache:
            self._cache["net"] = load_network(self.out / "target" / "net")
        return self._cache["net"]

    def bank(self):
        if "bank" not in self._cache:
            self._cache["bank"] = load_bank(self.out / "aes")
        return self._cache["bank"]

    def clean_reference(self) -> FeatureMatrix:
        return load_features(self.out / "features" / "clean_reference_compact.csv", "compact")

    def attack_features(self, kind: str) -> ev.AttackFeatures:
        key = ("af", kind)
        if key not in self._cache:
            ds = load_dataset(self.out / "attacks" / f"{kind}_dataset")
            compact = load_features(self.out / "features" / f"{kind}_compact.csv", "compact")
            full = load_features(self.out / "features" / f"{kind}_full.csv", "full")
            _, rows = read_csv(self.out / "features" / f"{kind}_split.csv")
            split = np.array([r[1] for r in rows])
            self._cache[key] = ev.AttackFeatures(ds, compact, full, np.flatnonzero(split == "train"),
                                                 np.flatnonzero(split == "eval"))
        return self._cache[key]


# ---------------------------------------------------------------- dataset persistence

def save_dataset(ds: ev.DetectionDataset, stem: Path) -> None:
    aedm.save(stem.with_suffix(".aedm"), {"images": ds.images})
    write_csv(stem.with_suffix(".csv"), ["sample_id", "source_index", "provenance", "label"],
              zip(ds.sample_ids, ds.source_index, ds.provenance, ds.labels))
    write_json(stem.with_suffix(".json"), {"attack": ds.attack, "epsilon": ds.epsilon, "counts": ds.counts})


def load_dataset(stem: Path) -> ev.DetectionDataset:
    meta = read_json(stem.with_suffix(".json"))
    _, rows = read_csv(stem.with_suffix(".csv"))
    images = aedm.load(stem.with_suffix(".aedm"))["images"]
    return ev.DetectionDataset(images, np.array([int(r[3]) for r in rows], dtype=np.int64),
                               np.array([r[2] for r in rows], dtype=object),
                               np.array([int(r[1]) for r in rows], dtype=np.int64), meta["attack"], meta["epsilon"])


# ---------------------------------------------------------------- stages

def stage_train_target(run: Run) -> list[str]:
    train, test = run.datasets()
    t = run.cfg.raw["target"]
    cfg = build_small_convnet(train.images.shape[1:], int(run.cfg.raw["data"].get("num_classes") or
                                                          int(train.labels.max()) + 1))
    net = train_classifier(cfg, train, int(t["epochs"]), float(t["lr"]), int(t["batch"]),
                           seed=run.cfg.stage_seed("train-target"))
    from .target import accuracy
    net.metadata["test_accuracy"] = accuracy(net, test)
    save_network(net, run.path("target", "net"))
    run._cache["net"] = net
    log.info("target test accuracy %.4f", net.metadata["test_accuracy"])
    return ["target/net.aedm", "target/net.json"]


def stage_train_aes(run: Run) -> list[str]:
    train, _ = run.datasets()
    net = run.net()
    a = run.cfg.raw["autoencoder"]
    n = min(int(run.cfg.raw["data"]["ae_samples"]), len(train))
    _, acts = tap_activations(net, train.images[:n])
    bank = {}
    from .target import tap_shapes
    for tap, shape in tap_shapes(net.config).items():
        cfg = AutoencoderConfig.for_tap(
            tap, shape, latent_dim=int(a["latent_conv"] if len(shape) == 3 else a["latent_dense"]),
            conv_filters=int(a["conv_filters"]), mmd_weight=float(a["mmd_weight"]), epochs=int(a["epochs"]),
            lr=float(a["lr"]), batch=int(a["batch"]), seed=run.cfg.stage_seed("train-aes", tap))
        bank[tap] = train_wae(acts[tap], cfg, provenance="clean")
    save_bank(bank, run.out / "aes")
    run._cache["bank"] = bank
    return ["aes/aes.json"] + [f"aes/ae_{t}.aedm" for t in bank]


def stage_attack(run: Run) -> list[str]:
    _, test = run.datasets()
    net = run.net()
    noise = run.cfg.raw["attacks"]["noise_epsilon"]
    noise = None if noise is None else float(noise)
    arts = []
    for kind in run.cfg.raw["attacks"]["kinds"]:
        spec = run.cfg.attack_spec(kind)
        ds, batch = ev.build_detection_dataset(net, test, spec, noise, seed=run.cfg.stage_seed("noise", kind))
        save_batch(batch, run.path("attacks", kind))
        save_dataset(ds, run.path("attacks", f"{kind}_dataset"))
        log.info("%s: success %.3f, counts %s", kind, batch.success_rate, ds.counts)
        arts += [f"attacks/{kind}.aedm", f"attacks/{kind}.csv", f"attacks/{kind}_dataset.aedm"]
    return arts


def stage_features(run: Run) -> list[str]:
    train, _ = run.datasets()
    net, bank = run.net(), run.bank()
    n = min(int(run.cfg.raw["data"]["reference_samples"]), len(train))
    ref, _ = extract_all(net, bank, train.images[:n], "clean")
    save_features(ref, run.path("features", "clean_reference_compact.csv"))
    arts = ["features/clean_reference_compact.csv"]
    for kind in run.cfg.raw["attacks"]["kinds"]:
        ds = load_dataset(run.out / "attacks" / f"{kind}_dataset")
        af = ev.featurize(net, bank, ds, run.cfg.stage_seed("split", kind))
        save_features(af.compact, run.path("features", f"{kind}_compact.csv"))
        save_features(af.full, run.path("features", f"{kind}_full.csv"))
        split = np.full(len(ds), "eval", dtype=object)
        split[af.train_idx] = "train"
        write_csv(run.path("features", f"{kind}_split.csv"), ["sample_id", "split"], zip(ds.sample_ids, split))
        arts += [f"features/{kind}_{s}.csv" for s in ("compact", "full", "split")]
    return arts


def stage_detect(run: Run) -> list[str]:
    settings = run.cfg.detector_settings()
    ref = run.clean_reference()
    results, arts = [], []
    for kind in run.cfg.raw["attacks"]["kinds"]:
        af = run.attack_features(kind)
        y, tr, evi = af.labels, af.train_idx, af.eval_idx
        base = {"attack": kind, "n_class1": int((y == 0).sum()), "n_class2": int((y == 1).sum()),
                "n_train": int(len(tr)), "n_eval": int(len(evi))}
        sup, svm, s_scores = ev.supervised_auroc(af.full.rows(tr), y[tr], af.full.rows(evi), y[evi], settings)
        uns, iso, u_scores = ev.unsupervised_auroc(ref, af.compact.rows(evi), y[evi], settings)
        save_model(svm, run.path("detect", f"{kind}_svm.json"))
        save_model(iso, run.path("detect", f"{kind}_iforest.json"))
        ids = af.dataset.sample_ids[evi]
        save_scores(run.path("detect", f"{kind}_scores_supervised.csv"), ids, s_scores, y[evi])
        save_scores(run.path("detect", f"{kind}_scores_unsupervised.csv"), ids, u_scores, y[evi])
        results += [{**base, "setting": "supervised", "representation": "full", "auroc": sup},
                    {**base, "setting": "unsupervised", "representation": "both", "auroc": uns}]
        arts += [f"detect/{kind}_{n}" for n in ("svm.json", "iforest.json", "scores_supervised.csv",
                                                 "scores_unsupervised.csv")]
    write_json(run.path("detect", "results.json"), {"results": results})
    return arts + ["detect/results.json"]


def stage_evaluate(run: Run) -> list[str]:
    results = read_json(run.out / "detect" / "results.json")["results"]
    ev.EvalReport(results, run.cfg.fingerprint()).write(run.out / "report")
    return ["report/report.csv", "report/summary.json"]


def stage_trajectory(run: Run) -> list[str]:
    _, test = run.datasets()
    net, bank = run.net(), run.bank()
    t = run.cfg.raw["trajectory"]
    n = min(int(t["samples"]), len(test))
    rng = np.random.default_rng(derive_seed(run.cfg.seed, "trajectory"))
    idx = np.sort(rng.choice(len(test), size=n, replace=False))
    eps = float(run.cfg.raw["attacks"]["epsilon"])
    arts = []
    for kind in t["attacks"]:
        recs = ev.compute_trajectories(net, bank, test.images[idx], test.labels[idx], kind, eps,
                                       int(t["grid_points"]), idx, run.cfg.attack_spec(kind))
        ev.save_trajectories(recs, run.path("trajectory", f"{kind}.csv"))
        arts.append(f"trajectory/{kind}.csv")
    return arts


def stage_importance(run: Run) -> list[str]:
    settings = run.cfg.detector_settings()
    t = run.cfg.raw["trajectory"]
    imps, hyps, arts = {}, {}, []
    for kind in run.cfg.raw["attacks"]["kinds"]:
        af = run.attack_features(kind)
        imp = ev.importance_for(af, settings)
        imps[kind] = imp.to_dict()
        traj_path = run.out / "trajectory" / f"{kind}.csv"
        trajs = ev.load_trajectories(traj_path) if traj_path.exists() else None
        h = ev.hypothesis_checks(kind, trajs, af.compact, af.labels, imp)
        hyps[kind] = h.to_dict()
        if trajs:
            deepest = trajs[0].taps[-1]
            hyps[kind]["increase_fraction_deepest"] = ev.trajectory_increase_fraction(trajs, deepest)
        for tap in (af.compact.columns[0][:-8], af.compact.columns[-2][:-8]):
            xs, ys, dens = ev.kde_for_tap(af.compact, af.labels, tap, int(t["kde_size"]))
            for cls, grid in dens.items():
                name = f"kde_{kind}_{tap}_{cls}.csv"
                ev.save_kde(run.path("analysis", name), xs, ys, grid)
                arts.append(f"analysis/{name}")
    write_json(run.path("analysis", "importance.json"), {"importance": imps})
    write_json(run.path("analysis", "hypotheses.json"), {"hypotheses": hyps})
    return arts + ["analysis/importance.json", "analysis/hypotheses.json"]


def stage_study_pgd(run: Run) -> list[str]:
    _, test = run.datasets()
    res = ev.pgd_iteration_study(run.net(), run.bank(), test, run.clean_reference(),
                                 run.cfg.raw["studies"]["pgd_iterations"], float(run.cfg.raw["attacks"]["epsilon"]),
                                 run.cfg.detector_settings(), seed=run.cfg.stage_seed("study-pgd-iters"))
    write_csv(run.path("studies", "pgd_iterations.csv"), ["iterations", "auroc", "n_class2"],
              ([r["iterations"], r["auroc"], r["n_class2"]] for r in res["rows"]))
    write_json(run.path("studies", "pgd_iterations.json"), res)
    return ["studies/pgd_iterations.csv", "studies/pgd_iterations.json"]


def stage_study_transfer(run: Run) -> list[str]:
    src = run.cfg.raw["studies"]["transfer_source"]
    kinds = run.cfg.raw["attacks"]["kinds"]
    table = ev.transfer_study(run.attack_features(src), {k: run.attack_features(k) for k in kinds},
                              run.cfg.detector_settings())
    write_csv(run.path("studies", "transfer.csv"), ["source", "target", "auroc"],
              ([src, k, v] for k, v in table.items()))
    return ["studies/transfer.csv"]


def stage_study_ablation(run: Run) -> list[str]:
    kind = run.cfg.raw["studies"]["ablation_attack"]
    rows = ev.representation_ablation(run.attack_features(kind), run.clean_reference(), run.cfg.detector_settings())
    write_csv(run.path("studies", "ablation.csv"), ["attack", "setting", "representation", "auroc"],
              ([kind, r["setting"], r["representation"], r["auroc"]] for r in rows))
    return ["studies/ablation.csv"]


STAGE_FUNCS: dict[str, Callable[[Run], list[str]]] = {
    "train-target": stage_train_target, "train-aes": stage_train_aes, "attack": stage_attack,
    "features": stage_features, "detect": stage_detect, "evaluate": stage_evaluate,
    "trajectory": stage_trajectory, "importance": stage_importance, "study-pgd-iters": stage_study_pgd,
    "study-transfer": stage_study_transfer, "study-ablation": stage_study_ablation,
}


def run_stage(run: Run, stage: str) -> bool:
    """Execute one stage; returns False when it was skipped as already complete."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    if not run.force:
        if run.manifest.done(stage):
            log.info("%s: up to date, skipping", stage)
            return False
        for dep in DEPENDS[stage]:
            if not run.manifest.done(dep):
                raise DependencyError(f"stage '{stage}' needs '{dep}', which has not completed for this "
                                      f"config; run `aedetect {dep}` first")
    log.info("%s: running", stage)
    start = time.perf_counter()
    artifacts = STAGE_FUNCS[stage](run)
    run.manifest.mark(stage, artifacts)
    run.executed.append(stage)
    _record_timing(run, stage, time.perf_counter() - start)
    return True


def _record_timing(run: Run, stage: str, seconds: float) -> None:
    # wall-clock lives apart from the report so reports stay byte-stable
    path = run.out / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[stage] = round(seconds, 3)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def run_all(run: Run) -> list[str]:
    for stage in STAGES:
        run_stage(run, stage)
    return run.executed

"""Adversarial attacks against a frozen classifier.

A model here is anything callable as ``model(Tensor[B,...]) -> Tensor[B,K]``;
:class:`~aedetect.target.TrainedNetwork` qualifies. Inputs are numpy arrays in
[0, 1]. All losses use the true label. Every attack runs in chunks of
``batch_size`` samples and the per-sample result does not depend on chunking
(random starts are drawn for the full batch up front).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aedm
from . import autodiff as ad
from .artifacts import read_csv, write_csv
from .autodiff import ParameterError, Tape, Tensor
from .target import logits_of

KINDS = ("fgsm", "bim", "pgd", "deepfool", "cw")
EPS_BOUNDED = ("fgsm", "bim", "pgd")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackSpec:
    kind: str
    epsilon: float = 0.3
    steps: int | None = None
    step_size: float | None = None
    cw_confidence: float = 0.0
    cw_const: float = 1.0
    cw_lr: float = 0.01
    overshoot: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be nonnegative")
        if self.cw_confidence < 0 or self.cw_const <= 0:
            raise ParameterError("cw_confidence must be >= 0 and cw_const > 0")

    def resolved(self) -> "AttackSpec":
        """Fill in per-kind defaults and check reachability."""
        steps, size = self.steps, self.step_size
        if self.kind == "fgsm":
            steps, size = 1, self.epsilon
        elif self.kind == "bim":
            steps = steps or 10
            size = size if size is not None else self.epsilon / 4
        elif self.kind == "pgd":
            steps = steps or 40
            size = size if size is not None else 2.5 * self.epsilon / steps
        elif self.kind == "deepfool":
            steps = steps or 50
        else:
            steps = steps or 100
        if steps < 1:
            raise ParameterError("steps must be positive")
        if self.kind in ("bim", "pgd") and size * steps < self.epsilon * (1 - 1e-9):
            raise ParameterError(f"step_size*steps = {size * steps} cannot reach epsilon = {self.epsilon}")
        return replace(self, steps=steps, step_size=size)


@dataclass
class AdversarialBatch:
    kind: str
    epsilon: float | None
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    pred_clean: np.ndarray
    pred_adv: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self) else 0.0


def _finalize(model, kind, eps, x, x_adv, y, batch_size, pred_clean=None) -> AdversarialBatch:
    x_adv = np.clip(x_adv, 0, 1).astype(np.float32)
    pred_clean = logits_of(model, x, batch_size).argmax(1) if pred_clean is None else pred_clean
    pred_adv = logits_of(model, x_adv, batch_size).argmax(1)
    delta = (x_adv.astype(np.float64) - x).reshape(len(x), -1)
    return AdversarialBatch(
        kind=kind, epsilon=eps, originals=x, perturbed=x_adv, labels=np.asarray(y),
        pred_clean=pred_clean, pred_adv=pred_adv, success=pred_adv != y,
        linf=np.abs(delta).max(axis=1) if delta.size else np.zeros(len(x)),
        l2=np.sqrt((delta ** 2).sum(axis=1)))


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed cross-entropy w.r.t. the input, and the logits."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logits = model(xt)
        loss = ad.cross_entropy(logits, y, reduction="sum")
    (g,) = tape.gradient(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g, logits.data


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _prep(x, y):
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ParameterError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def fgsm(model, x, y, epsilon: float, batch_size: int = 128) -> AdversarialBatch:
    """x + eps * sign(grad), clipped to [0, 1]; sign(0) = 0."""
    if epsilon < 0:
        raise ParameterError("epsilon must be nonnegative")
    x, y = _prep(x, y)
    eps = np.float32(epsilon)
    out = np.empty_like(x)
    for sl in _chunks(len(x), batch_size):
        g, _ = loss_gradient(model, x[sl], y[sl])
        out[sl] = np.clip(x[sl] + eps * np.sign(g), 0, 1)
    return _finalize(model, "fgsm", float(epsilon), x, out, y, batch_size)


def iterative_linf(model, x, y, epsilon: float, steps: int, step_size: float,
                   random_start: bool = False, seed: int = 0, batch_size: int = 128) -> AdversarialBatch:
    """BIM (``random_start=False``) or PGD: sign steps projected onto the eps-ball and [0, 1]."""
    if epsilon < 0 or steps < 1 or step_size < 0 or (step_size == 0 and epsilon > 0):
        raise ParameterError("need epsilon >= 0, steps >= 1, step_size > 0")
    x, y = _prep(x, y)
    eps = np.float32(epsilon)
    alpha = np.float32(step_size)
    start = x.copy()
    if random_start:
        noise = np.random.default_rng(seed).uniform(-epsilon, epsilon, x.shape).astype(np.float32)
        start = np.clip(x + noise, 0, 1)
    out = np.empty_like(x)
    for sl in _chunks(len(x), batch_size):
        x0 = x[sl]
        lo, hi = x0 - eps, x0 + eps
        xa = start[sl]
        for _ in range(steps):
            g, _ = loss_gradient(model, xa, y[sl])
            xa = np.clip(np.clip(xa + alpha * np.sign(g), lo, hi), 0, 1)
        out[sl] = xa
    return _finalize(model, "pgd" if random_start else "bim", float(epsilon), x, out, y, batch_size)


def _class_gradients(model, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Logits (n,K) and per-class input gradients (n,K,D)."""
    xt = Tensor(x, requires_grad=True)
    n = len(x)
    with Tape() as tape:
        logits = model(xt)
        picks = [ad.sum(ad.pick(logits, np.full(n, c))) for c in range(k)]
    grads = np.stack([tape.gradient(p, [xt])[0].reshape(n, -1) for p in picks], axis=1)
    return logits.data, grads


def deepfool(model, x, y=None, steps_max: int = 50, overshoot: float = 0.02,
             epsilon: float | None = None, clip: tuple[float, float] | None = (0.0, 1.0),
             batch_size: int = 128) -> AdversarialBatch:
    """Iterated minimal step to the nearest linearised decision boundary.

    Stops per sample once the prediction leaves ``y`` (the clean prediction if
    ``y`` is None). The accumulated step is applied with factor ``1 + overshoot``.
    ``epsilon`` optionally bounds the result in L-inf, for epsilon sweeps.
    """
    x = np.asarray(x, dtype=np.float32)
    n = len(x)
    logits0 = logits_of(model, x, batch_size)
    k = logits0.shape[1]
    if k < 2:
        raise ParameterError("deepfool needs at least two classes")
    pred_clean = logits0.argmax(1)
    y = pred_clean.copy() if y is None else np.asarray(y, dtype=np.int64)
    flat = x.reshape(n, -1).astype(np.float64)
    r_tot = np.zeros_like(flat)
    x_cur = x.copy()
    active = np.flatnonzero(pred_clean == y)
    factor = 1.0 + overshoot
    for _ in range(steps_max):
        if active.size == 0:
            break
        still = []
        for s in range(0, active.size, batch_size):
            idx = active[s:s + batch_size]
            logits, grads = _class_gradients(model, x_cur[idx], k)
            keep = logits.argmax(1) == y[idx]
            if not keep.any():
                continue
            idx, logits, grads = idx[keep], logits[keep], grads[keep]
            rows = np.arange(len(idx))
            yi = y[idx]
            f = (logits - logits[rows, yi][:, None]).astype(np.float64)
            w = (grads - grads[rows, yi][:, None, :]).astype(np.float64)
            wn = np.linalg.norm(w, axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                dist = np.abs(f) / wn
            dist[rows, yi] = np.inf
            dist[~np.isfinite(dist)] = np.inf
            best = dist.argmin(1)
            stuck = ~np.isfinite(dist[rows, best])
            step = (np.abs(f[rows, best]) / np.maximum(wn[rows, best], 1e-30) ** 2)[:, None] * w[rows, best]
            step[stuck] = 0.0
            r_tot[idx] += step
            delta = factor * r_tot[idx]
            if epsilon is not None:
                delta = np.clip(delta, -epsilon, epsilon)
            new = flat[idx] + delta
            if clip is not None:
                new = np.clip(new, *clip)
            x_cur[idx] = new.reshape((len(idx),) + x.shape[1:]).astype(np.float32)
            still.append(idx)
        if not still:
            break
        cand = np.concatenate(still)
        active = cand[logits_of(model, x_cur[cand], batch_size).argmax(1) == y[cand]]
    if clip is None:
        pred_adv = logits_of(model, x_cur, batch_size).argmax(1)
        delta = (x_cur.astype(np.float64) - x).reshape(n, -1)
        return AdversarialBatch("deepfool", epsilon, x, x_cur, y, pred_clean, pred_adv, pred_adv != y,
                                np.abs(delta).max(1), np.sqrt((delta ** 2).sum(1)))
    return _finalize(model, "deepfool", epsilon, x, x_cur, y, batch_size, pred_clean)


def cw_l2(model, x, y, c: float = 1.0, kappa: float = 0.0, steps: int = 100, lr: float = 0.01,
          batch_size: int = 128) -> AdversarialBatch:
    """Carlini-Wagner L2 with a fixed constant, tanh reparameterisation and Adam.

    Minimises ||delta||^2 + c * max(z_y - max_{i != y} z_i + kappa, 0) and
    returns, per sample, the lowest-norm iterate that is misclassified (the
    last iterate when none is).
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    x, y = _prep(x, y)
    out = x.copy()
    for sl in _chunks(len(x), batch_size):
        out[sl] = _cw_chunk(model, x[sl], y[sl], c, kappa, steps, lr)
    return _finalize(model, "cw", None, x, out, y, batch_size)


def _cw_chunk(model, x, y, c, kappa, steps, lr):
    n = len(x)
    x_t = Tensor(x)
    half = Tensor(np.full(x.shape, 0.5, np.float32))
    kap = Tensor(np.full(n, kappa, np.float32))
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    found = logits_of(model, x, n).argmax(1) != y
    best_l2[found] = 0.0
    w = Tensor(np.arctanh(np.clip(2 * x.astype(np.float64) - 1, -1 + 1e-6, 1 - 1e-6)), requires_grad=True)
    params = {"w": w}
    state = ad.OptimizerState("adam", lr)
    last = x
    for step in range(steps + 1):
        with Tape() as tape:
            xa = ad.add(ad.scale(ad.tanh(params["w"]), 0.5), half)
            delta = ad.sub(xa, x_t)
            logits = model(xa)
            margin = ad.add(ad.sub(ad.pick(logits, y), ad.max_excluding(logits, y)), kap)
            loss = ad.add(ad.sum(ad.mul(delta, delta)), ad.scale(ad.sum(ad.relu(margin)), c))
        cur = xa.data
        l2 = ((cur.astype(np.float64) - x) ** 2).reshape(n, -1).sum(1)
        hit = (logits.data.argmax(1) != y) & (l2 < best_l2)
        best[hit] = cur[hit]
        best_l2[hit] = l2[hit]
        found |= hit
        last = cur
        if step == steps:
            break
        (g,) = tape.gradient(loss, [params["w"]])
        params = ad.optimizer_step(state, params, {"w": g})
    return np.where(found.reshape((n,) + (1,) * (x.ndim - 1)), best, last)


def run_attack(model, x, y, spec: AttackSpec, batch_size: int = 128) -> AdversarialBatch:
    spec = spec.resolved()
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.epsilon, batch_size)
    if spec.kind in ("bim", "pgd"):
        return iterative_linf(model, x, y, spec.epsilon, spec.steps, spec.step_size,
                              random_start=spec.kind == "pgd", seed=spec.seed, batch_size=batch_size)
    if spec.kind == "deepfool":
        return deepfool(model, x, y, spec.steps, spec.overshoot, batch_size=batch_size)
    return cw_l2(model, x, y, spec.cw_const, spec.cw_confidence, spec.steps, spec.cw_lr, batch_size)


def epsilon_sweep(model, x, y, kind: str, eps_max: float, grid_points: int,
                  spec: AttackSpec | None = None, batch_size: int = 128):
    """Attack re-run at every budget in linspace(0, 2*eps_max, grid_points).

    Returns ``(grid, [perturbed inputs per grid point])``; the first entry is
    the clean input.
    """
    if grid_points < 1:
        raise ParameterError("grid_points must be >= 1")
    if kind == "cw":
        raise ParameterError("cw is optimisation-based and has no fixed epsilon to sweep")
    if kind not in KINDS:
        raise ParameterError(f"unknown attack kind {kind!r}")
    x, y = _prep(x, y)
    grid = np.linspace(0.0, 2.0 * eps_max, grid_points)
    base = spec or AttackSpec(kind)
    out = []
    for eps in grid:
        if eps == 0:
            out.append(x.copy())
        elif kind == "deepfool":
            s = base.resolved()
            out.append(deepfool(model, x, y, s.steps, s.overshoot, epsilon=float(eps),
                                batch_size=batch_size).perturbed)
        else:
            s = replace(base, kind=kind, epsilon=float(eps), steps=base.steps, step_size=None)
            out.append(run_attack(model, x, y, s, batch_size).perturbed)
    return grid, out


MANIFEST_HEADER = ["sample_id", "true_label", "pred_clean", "pred_adv", "success", "linf", "l2"]


def save_batch(batch: AdversarialBatch, stem: str | Path) -> None:
    stem = Path(stem)
    aedm.save(stem.with_suffix(".aedm"), {"originals": batch.originals, "perturbed": batch.perturbed})
    rows = zip(batch.sample_ids, batch.labels, batch.pred_clean, batch.pred_adv, batch.success,
               batch.linf.astype(float), batch.l2.astype(float))
    write_csv(stem.with_suffix(".csv"), MANIFEST_HEADER, rows)


def load_batch(stem: str | Path, kind: str, epsilon: float | None = None) -> AdversarialBatch:
    stem = Path(stem)
    tensors = aedm.load(stem.with_suffix(".aedm"))
    header, rows = read_csv(stem.with_suffix(".csv"))
    if header != MANIFEST_HEADER:
        raise ValueError(f"unexpected manifest header {header}")
    cols = list(zip(*rows)) if rows else [()] * len(header)
    ints = [np.array(c, dtype=np.int64) for c in cols[:5]]
    return AdversarialBatch(kind, epsilon, tensors["originals"], tensors["perturbed"],
                            labels=ints[1], pred_clean=ints[2], pred_adv=ints[3], success=ints[4].astype(bool),
                            linf=np.array(cols[5], dtype=float), l2=np.array(cols[6], dtype=float),
                            sample_ids=ints[0])

"""Geometry diagnostics around a parameter vector.

Every routine has a model-free core that works on a flat vector with plain
``loss(theta)`` / ``grad(theta)`` callables, plus a model adapter. All of them
put the model's parameters back exactly as they found them.
"""
from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .losses import cross_entropy
from .model import EncoderClassifier
from .optim import softmax_ce

Vec = np.ndarray


# ---------------------------------------------------------------- model adapter

@contextmanager
def preserved(model: EncoderClassifier):
    """Restore the model's parameters bit-exactly on exit."""
    theta = model.params.flatten().copy()
    try:
        yield theta
    finally:
        model.params.assign(theta)


class ModelObjective:
    """Mean cross-entropy of ``model`` on ``(x, y)`` as a function of the flat parameters."""

    def __init__(self, model: EncoderClassifier, x: np.ndarray, y: np.ndarray):
        self.model, self.x, self.y = model, np.asarray(x, dtype=np.float64), np.asarray(y)

    def loss(self, theta: Vec) -> float:
        self.model.params.assign(theta)
        return float(softmax_ce(self.model.predict(self.x), self.y).mean())

    def grad(self, theta: Vec) -> Vec:
        m = self.model
        m.params.assign(theta)
        m.params.zero_grad()
        _, logits = m.forward(self.x)
        cross_entropy(logits, self.y).backward()
        m.passes["backward"] += 1
        return m.params.grad_flat()


def _domain_subsets(split, domain_names) -> dict[str, np.ndarray]:
    out = {}
    for k, name in enumerate(domain_names, start=1):
        m = split.group == k
        if m.any():
            out[name] = m
    return out


# ---------------------------------------------------------------- sharpness

def _project(eps: Vec, rho: float) -> Vec:
    n = np.linalg.norm(eps)
    return eps * (rho / n) if n > rho else eps


def sharpness_search(loss: Callable[[Vec], float], grad: Callable[[Vec], Vec], theta: Vec,
                     rho: float, m: int = 64, seed: int = 0, refine: int = 3) -> dict:
    """Estimate ``max_{||eps|| <= rho} loss(theta + eps) - loss(theta)``.

    Candidates: ``m`` seeded directions uniform on the radius-``rho`` sphere, and
    one ascent candidate (``rho * grad / ||grad||`` followed by ``refine`` projected
    normalized-gradient steps of length ``rho``). Non-finite probes are skipped
    and counted.
    """
    if m < 1 or rho <= 0:
        raise ValueError("need m >= 1 and rho > 0")
    theta = np.asarray(theta, dtype=np.float64)
    base = loss(theta)
    rng = np.random.default_rng(seed)
    best_random, nonfinite = -np.inf, 0
    for _ in range(m):
        u = rng.standard_normal(theta.size)
        u *= rho / np.linalg.norm(u)
        val = loss(theta + u)
        if not np.isfinite(val):
            nonfinite += 1
            continue
        best_random = max(best_random, val)
    g = grad(theta)
    gn = np.linalg.norm(g)
    eps = g * (rho / gn) if gn > 0 else np.zeros_like(theta)
    ascent = loss(theta + eps)
    for _ in range(refine):
        g = grad(theta + eps)
        gn = np.linalg.norm(g)
        if gn == 0 or not np.isfinite(gn):
            break
        cand = _project(eps + rho * g / gn, rho)
        val = loss(theta + cand)
        if not np.isfinite(val):
            nonfinite += 1
            break
        if val >= ascent:
            eps, ascent = cand, val
    if not np.isfinite(ascent):
        nonfinite += 1
        ascent = -np.inf
    raw = max(best_random, ascent) - base
    return {"sharpness": max(raw, 0.0), "raw": float(raw), "clamped": bool(raw < 0),
            "base_loss": float(base), "best_random": float(best_random - base),
            "ascent": float(ascent - base), "nonfinite": nonfinite}


@dataclass
class SharpnessReport:
    per_domain: dict
    mean: float
    std: float
    total: float
    rho: float
    m: int
    seed: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def zeroth_order_sharpness(model: EncoderClassifier, split, domain_names, rho: float = 0.05,
                           m: int = 64, seed: int = 0) -> SharpnessReport:
    """Per-domain sharpness of test CE (domain k = its cover and stego rows), plus the
    pooled-set value reported as ``total``. Std is the population std over domains."""
    per, details = {}, {}
    with preserved(model) as theta:
        for name, mask in _domain_subsets(split, domain_names).items():
            obj = ModelObjective(model, split.x[mask], split.y[mask])
            r = sharpness_search(obj.loss, obj.grad, theta, rho, m, seed)
            per[name], details[name] = r["sharpness"], r
        obj = ModelObjective(model, split.x, split.y)
        pooled = sharpness_search(obj.loss, obj.grad, theta, rho, m, seed)
        details["total"] = pooled
    vals = np.array(list(per.values()))
    return SharpnessReport(per, float(vals.mean()), float(vals.std()), pooled["sharpness"],
                           rho, m, seed, details)


# ---------------------------------------------------------------- proxy A-distance

def pad_from_error(err: float) -> float:
    return 2.0 * (1.0 - 2.0 * err)


def _logistic_probe(x_tr, y_tr, x_te, steps: int, lr: float) -> np.ndarray:
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd[sd == 0] = 1.0
    a, b = (x_tr - mu) / sd, (x_te - mu) / sd
    w, c = np.zeros(a.shape[1]), 0.0
    n = len(y_tr)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(a @ w + c)))
        r = p - y_tr
        w -= lr * (a.T @ r) / n
        c -= lr * r.mean()
    return (b @ w + c) > 0


def proxy_a_distance(feat_a: np.ndarray, feat_b: np.ndarray, seed: int = 0, steps: int = 500,
                     lr: float = 0.1, folds: int = 5, min_samples: int = 20) -> tuple[float, float]:
    """``(d_A, held_out_error)`` of a linear A-vs-B probe.

    The larger side is subsampled (seeded) to the size of the smaller one so a
    constant guess scores exactly chance. The probe is logistic regression trained
    by full-batch gradient descent on standardized inputs, evaluated on 80/20
    splits: ``folds=5`` rotates the held-out 20% so every sample is tested once and
    the pooled error is used (``folds=1`` is a single split). The error is clipped
    to [0, 0.5].
    """
    feat_a, feat_b = np.asarray(feat_a, float), np.asarray(feat_b, float)
    if min(len(feat_a), len(feat_b)) < min_samples:
        raise ValueError(f"need at least {min_samples} samples per side, "
                         f"got {len(feat_a)} and {len(feat_b)}")
    rng = np.random.default_rng(seed)
    n = min(len(feat_a), len(feat_b))
    sides = [f[rng.permutation(len(f))[:n]] for f in (feat_a, feat_b)]
    n_te = n - int(round(0.8 * n))
    wrong = total = 0
    for k in range(folds):
        te = np.zeros(n, dtype=bool)
        te[k * n_te:(k + 1) * n_te] = True
        if not te.any():
            break
        x_tr = np.concatenate([sides[0][~te], sides[1][~te]])
        x_te = np.concatenate([sides[0][te], sides[1][te]])
        y_tr = np.repeat([0.0, 1.0], int((~te).sum()))
        y_te = np.repeat([False, True], int(te.sum()))
        pred = _logistic_probe(x_tr, y_tr, x_te, steps, lr)
        wrong += int(np.sum(pred != y_te))
        total += y_te.size
    err = float(np.clip(wrong / total, 0.0, 0.5))
    return pad_from_error(err), err


@dataclass
class PadMatrix:
    names: list
    values: np.ndarray
    probe_acc: np.ndarray
    er: float | None = None

    def entry(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema=1\n")
            w = csv.writer(fh)
            w.writerow(["domain", *self.names])
            for name, row in zip(self.names, self.values):
                w.writerow([name, *(repr(float(v)) for v in row)])


def domain_features(model: EncoderClassifier | None, split, domain_names) -> dict[str, np.ndarray]:
    """Features per domain (``cover`` first). ``model=None`` uses the raw inputs."""
    feats = split.x if model is None else model.features(split.x, normalized=True)
    out = {"cover": feats[split.d == 0]}
    for k, name in enumerate(domain_names, start=1):
        out[name] = feats[split.d == k]
    return out


def pad_matrix(model: EncoderClassifier | None, split, domain_names, er: float | None = None,
               seed: int = 0) -> PadMatrix:
    """Pairwise PAD over cover + stego domains; one probe per unordered pair.

    The diagonal is measured, not assumed: each domain's samples are split into two
    random halves and probed against each other.
    """
    feats = domain_features(model, split, domain_names)
    names = list(feats)
    k = len(names)
    vals, acc = np.zeros((k, k)), np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            if i == j:
                f = feats[names[i]]
                perm = np.random.default_rng(seed + 7919 * (i + 1)).permutation(len(f))
                half = len(f) // 2
                d, e = proxy_a_distance(f[perm[:half]], f[perm[half:2 * half]], seed)
            else:
                d, e = proxy_a_distance(feats[names[i]], feats[names[j]], seed)
            vals[i, j] = vals[j, i] = d
            acc[i, j] = acc[j, i] = 1.0 - e
    return PadMatrix(names, vals, acc, er)


# ---------------------------------------------------------------- landscape

@dataclass
class LandscapeSlice:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray          # [G, G], losses[i, j] at (alphas[i], betas[j])
    u: np.ndarray
    v: np.ndarray
    center_loss: float
    missing: np.ndarray
    extent: float
    seed: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema=1 grid={len(self.alphas)} extent={self.extent} seed={self.seed}\n")
            w = csv.writer(fh)
            w.writerow(["alpha", "beta", "loss"])
            for i, a in enumerate(self.alphas):
                for j, b in enumerate(self.betas):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])


def filter_normalized_direction(rng: np.random.Generator, theta: Vec, blocks: list[slice]) -> Vec:
    """Gaussian direction rescaled block-wise so each block's norm equals the
    corresponding parameter block's norm."""
    d = rng.standard_normal(theta.size)
    for s in blocks:
        n = np.linalg.norm(d[s])
        d[s] *= np.linalg.norm(theta[s]) / n if n > 0 else 0.0
    return d


def landscape_grid(loss: Callable[[Vec], float], theta: Vec, blocks: list[slice] | None = None,
                   grid: int = 41, extent: float = 1.0, seed: int = 0) -> LandscapeSlice:
    if grid < 1 or grid % 2 == 0:
        raise ValueError("grid size must be odd so the center cell is theta itself")
    theta = np.asarray(theta, dtype=np.float64)
    blocks = blocks or [slice(0, theta.size)]
    rng = np.random.default_rng(seed)
    u = filter_normalized_direction(rng, theta, blocks)
    v = filter_normalized_direction(rng, theta, blocks)
    coords = np.linspace(-extent, extent, grid)
    c = grid // 2
    coords[c] = 0.0
    losses = np.empty((grid, grid))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            point = theta if (i == c and j == c) else theta + a * u + b * v
            losses[i, j] = loss(point)
    missing = ~np.isfinite(losses)
    return LandscapeSlice(coords, coords.copy(), losses, u, v, float(losses[c, c]), missing,
                          extent, seed)


def landscape_slice(model: EncoderClassifier, x, y, grid: int = 41, extent: float = 1.0,
                    seed: int = 0) -> LandscapeSlice:
    obj = ModelObjective(model, x, y)
    with preserved(model) as theta:
        return landscape_grid(obj.loss, theta, model.layer_slices(), grid, extent, seed)


# ---------------------------------------------------------------- Hessian

def hvp(grad: Callable[[Vec], Vec], theta: Vec, v: Vec) -> Vec:
    """Central gradient difference with ``h = 1e-4 (1 + ||theta||) / ||v||``."""
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    h = 1e-4 * (1.0 + np.linalg.norm(theta)) / nv
    return (grad(theta + h * v) - grad(theta - h * v)) / (2.0 * h)


@dataclass
class HessianReport:
    lambda_max: float
    trace: float
    trace_std: float
    iterations: int
    converged: bool
    n_probes: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def hessian_probe(grad: Callable[[Vec], Vec], theta: Vec, k_iters: int = 100, seed: int = 0,
                  n_probes: int = 32, tol: float = 1e-4) -> HessianReport:
    """Dominant eigenvalue by power iteration and Hutchinson trace, both through HVPs."""
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    lam, converged, it = 0.0, False, 0
    for it in range(1, k_iters + 1):
        hv = hvp(grad, theta, v)
        new = float(v @ hv)
        n = np.linalg.norm(hv)
        if it > 1 and abs(new - lam) <= tol * max(abs(lam), 1e-12):
            lam, converged = new, True
            break
        lam = new
        if n == 0:
            converged = True
            break
        v = hv / n
    samples = []
    for _ in range(n_probes):
        z = rng.choice([-1.0, 1.0], size=theta.size)
        samples.append(float(z @ hvp(grad, theta, z)))
    return HessianReport(lam, float(np.mean(samples)), float(np.std(samples)), it, converged,
                         n_probes, seed)


def model_hessian(model: EncoderClassifier, x, y, k_iters: int = 100, seed: int = 0,
                  n_probes: int = 32) -> HessianReport:
    obj = ModelObjective(model, x, y)
    with preserved(model) as theta:
        return hessian_probe(obj.grad, theta, k_iters, seed, n_probes)


# ---------------------------------------------------------------- exports

def export_features(model: EncoderClassifier, split, domain_names, out_dir) -> list[Path]:
    """``features_<domain>.csv`` with normalized features for external embedding tools."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = model.features(split.x, normalized=True)
    paths = []
    for k, name in enumerate(["cover", *domain_names]):
        mask = split.d == k
        p = out / f"features_{name}.csv"
        with open(p, "w", newline="") as fh:
            fh.write("# schema=1\n")
            w = csv.writer(fh)
            w.writerow(["id", "y", "group"] + [f"z{i}" for i in range(feats.shape[1])])
            for i in np.flatnonzero(mask):
                w.writerow([int(split.ids[i]), int(split.y[i]), int(split.group[i])]
                           + [repr(float(f)) for f in feats[i]])
        paths.append(p)
    return paths


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")

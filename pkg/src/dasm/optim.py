"""Adam/SGD base updates, SAM, the domain-aware two-pass step, and the training loop."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .losses import LabeledBatch, LossBreakdown, total_loss
from .model import EncoderClassifier
from .modulator import XI, DomainCenterBank, adaptive_weights

KINDS = ("adam", "erm", "sam", "dasm")
COMPONENTS = {"adam": ("ce",), "erm": ("ce",), "sam": ("ce",), "dasm": ("ce", "dscl", "adgm")}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, trace: "StepTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    optimizer: str = "dasm"
    lr: float = 1e-3
    rho: float = 0.03
    tau: float = 0.1
    mu: float = 0.9
    xi: float = XI
    batch_size: int = 128
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    base: str = "adam"
    stratified: bool = True
    components: tuple[str, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in KINDS:
            raise ValueError(f"optimizer must be one of {KINDS}, got {self.optimizer!r}")
        if self.base not in ("adam", "sgd"):
            raise ValueError(f"base update must be 'adam' or 'sgd', got {self.base!r}")
        if self.lr <= 0 or self.rho < 0 or self.tau <= 0 or not 0 <= self.mu <= 1:
            raise ValueError("need lr > 0, rho >= 0, tau > 0 and mu in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.components is None:
            self.components = COMPONENTS[self.optimizer]
        self.components = tuple(self.components)
        if "ce" not in self.components or not set(self.components) <= {"ce", "dscl", "adgm"}:
            raise ValueError(f"invalid loss components {self.components}")

    @property
    def two_pass(self) -> bool:
        return self.optimizer in ("sam", "dasm")

    @property
    def base_rule(self) -> str:
        return "adam" if self.optimizer == "adam" else self.base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["components"] = list(self.components)
        return d


class AdamState:
    def __init__(self, shapes, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def apply(self, params, grads, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class BaseUpdate:
    """Adam or plain SGD applied to per-tensor gradients."""

    def __init__(self, model: EncoderClassifier, cfg: TrainConfig):
        self.rule = cfg.base_rule
        self.lr = cfg.lr
        self.adam = AdamState([t.shape for t in model.params], cfg.beta1, cfg.beta2, cfg.adam_eps)

    def apply(self, params, grads) -> None:
        if self.rule == "adam":
            self.adam.apply(params, grads, self.lr)
        else:
            for p, g in zip(params, grads):
                p.data = p.data - self.lr * g

    @property
    def steps(self) -> int:
        return self.adam.t


@dataclass
class StepTrace:
    loss: dict
    grad_norm: float
    eps_norm: float = 0.0
    loss_adv: dict | None = None
    domains: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    weights_adv: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    ema_gaps: list = field(default_factory=list)
    zero_grad_flag: bool = False
    restored: bool = True
    forward: int = 0
    backward: int = 0


def perturbation(grad: np.ndarray, rho: float, xi: float = XI) -> np.ndarray:
    """``rho * g / ||g||``; the zero vector when ``||g|| <= xi``."""
    n = float(np.linalg.norm(grad))
    if n <= xi or rho == 0:
        return np.zeros_like(grad)
    return grad * (rho / n)


def perturbed_gradient(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                       rho: float, xi: float = XI) -> np.ndarray:
    """``grad_fn(theta + eps)`` with ``eps = perturbation(grad_fn(theta))``, on a flat vector."""
    return grad_fn(theta + perturbation(grad_fn(theta), rho, xi))


def _check(bd: LossBreakdown, trace: StepTrace) -> None:
    if not np.isfinite(bd.total.data).all():
        raise NonFiniteLossError(f"non-finite loss {bd.values()}", trace)


def _grads(model: EncoderClassifier) -> list[np.ndarray]:
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in model.params]


def erm_step(model: EncoderClassifier, batch: LabeledBatch, cfg: TrainConfig,
             opt: BaseUpdate, bank: DomainCenterBank | None = None) -> StepTrace:
    """Single forward/backward on the configured losses, then the base update."""
    f0, b0 = model.passes["forward"], model.passes["backward"]
    use_dscl, use_adgm = "dscl" in cfg.components, "adgm" in cfg.components
    model.params.zero_grad()
    bd = total_loss(model, batch, bank, cfg.tau, use_dscl=use_dscl, use_adgm=use_adgm,
                    update_bank=True)
    trace = StepTrace(loss=bd.values(), grad_norm=float("nan"))
    _check(bd, trace)
    bd.total.backward()
    model.passes["backward"] += 1
    grads = _grads(model)
    trace.grad_norm = float(np.sqrt(sum((g * g).sum() for g in grads)))
    opt.apply(model.params, grads)
    trace.forward = model.passes["forward"] - f0
    trace.backward = model.passes["backward"] - b0
    return trace


def _two_pass(model, bank, batch, cfg, opt, use_dscl, use_adgm) -> StepTrace:
    f0, b0 = model.passes["forward"], model.passes["backward"]
    params = model.params

    # pass 1 at theta_t: centers updated from this pass's detached features
    params.zero_grad()
    bd = total_loss(model, batch, bank, cfg.tau, use_dscl=use_dscl, use_adgm=use_adgm,
                    update_bank=True)
    st = bd.gap_state
    frozen = (st.domains, st.weights, st.tau_g) if st is not None and st.active else None
    trace = StepTrace(loss=bd.values(), grad_norm=float("nan"))
    if frozen is not None:
        trace.domains = [int(k) for k in st.domains]
        trace.weights = st.weights.tolist()
        trace.gaps = st.gaps.data.tolist()
        trace.ema_gaps = st.ema_gaps.tolist()
    _check(bd, trace)
    bd.total.backward()
    model.passes["backward"] += 1
    g = params.grad_flat()
    trace.grad_norm = float(np.linalg.norm(g))
    trace.zero_grad_flag = trace.grad_norm <= cfg.xi
    eps = perturbation(g, cfg.rho, cfg.xi)
    trace.eps_norm = float(np.linalg.norm(eps))

    # pass 2 at theta_t + eps with the same batch and frozen weights
    before = params.flatten()
    params.snapshot()
    params.add_(eps)
    params.zero_grad()
    bd_adv = total_loss(model, batch, bank, cfg.tau, use_dscl=use_dscl, use_adgm=use_adgm,
                        update_bank=False, frozen=frozen)
    trace.loss_adv = bd_adv.values()
    st_adv = bd_adv.gap_state
    if st_adv is not None and st_adv.active:
        trace.weights_adv = st_adv.weights.tolist()
    _check(bd_adv, trace)
    bd_adv.total.backward()
    model.passes["backward"] += 1
    g_adv = _grads(model)
    params.restore()
    trace.restored = bool(np.array_equal(before, params.flatten()))

    opt.apply(params, g_adv)
    trace.forward = model.passes["forward"] - f0
    trace.backward = model.passes["backward"] - b0
    return trace


def sam_step(model: EncoderClassifier, batch: LabeledBatch, cfg: TrainConfig,
             opt: BaseUpdate) -> StepTrace:
    return _two_pass(model, None, batch, cfg, opt, False, False)


def dasm_step(model: EncoderClassifier, bank: DomainCenterBank, batch: LabeledBatch,
              cfg: TrainConfig, opt: BaseUpdate) -> StepTrace:
    return _two_pass(model, bank, batch, cfg, opt,
                     "dscl" in cfg.components, "adgm" in cfg.components)


def step(model, bank, batch, cfg: TrainConfig, opt: BaseUpdate) -> StepTrace:
    if cfg.optimizer == "sam" and cfg.components == ("ce",):
        return sam_step(model, batch, cfg, opt)
    if cfg.two_pass:
        return dasm_step(model, bank, batch, cfg, opt)
    return erm_step(model, batch, cfg, opt, bank)


# ---------------------------------------------------------------- training loop

def batch_order(d: np.ndarray, batch_size: int, rng: np.random.Generator,
                stratified: bool = True) -> list[np.ndarray]:
    """Index batches for one epoch.

    Stratified mode spreads every domain evenly over the epoch, so each batch
    holds every domain in roughly its overall proportion.
    """
    n = len(d)
    if not stratified:
        perm = rng.permutation(n)
    else:
        key = np.empty(n)
        for k in np.unique(d):
            idx = np.flatnonzero(d == k)
            idx = idx[rng.permutation(idx.size)]
            key[idx] = (np.arange(idx.size) + rng.random(idx.size)) / idx.size
        perm = np.argsort(key, kind="stable")
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def softmax_ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return lse - logits[np.arange(len(y)), y]


def evaluate(model: EncoderClassifier, split, domain_names) -> dict:
    """Per-domain accuracy/CE; domain ``k`` is its cover half plus its stego half."""
    logits = model.predict(split.x)
    ce = softmax_ce(logits, split.y)
    correct = logits.argmax(axis=1) == split.y
    out = {"ce": float(ce.mean()), "acc": float(correct.mean()), "domains": {}}
    accs = []
    for k, name in enumerate(domain_names, start=1):
        m = split.group == k
        if not m.any():
            continue
        acc = float(correct[m].mean())
        accs.append(acc)
        out["domains"][name] = {"acc": acc, "ce": float(ce[m].mean())}
    out["avg_acc"] = float(np.mean(accs)) if accs else float("nan")
    return out


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    history: list = field(default_factory=list)
    test: dict = field(default_factory=dict)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    passes: dict = field(default_factory=dict)
    ms_per_batch: tuple = (float("nan"), float("nan"))
    n_steps: int = 0
    status: str = "ok"
    error: str = ""
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ms_per_batch"] = list(self.ms_per_batch)
        return d


def train(model: EncoderClassifier, data, cfg: TrainConfig,
          bank: DomainCenterBank | None = None,
          on_step: Callable[[StepTrace], None] | None = None) -> RunReport:
    """Epoch loop with seeded shuffling, per-epoch validation and early stopping.

    ``data`` is a benchmark slice with ``train``/``val``/``test`` splits and
    ``domain_names``. The returned model state is the best-validation epoch.
    """
    train_s, val_s, test_s = data.train, data.val, data.test
    if len(train_s) == 0 or len(val_s) == 0:
        raise ValueError("training and validation splits must be non-empty")
    names = list(data.domain_names)
    if bank is None:
        bank = DomainCenterBank(len(names), model.config.feature_dim, cfg.mu, cfg.xi)
    opt = BaseUpdate(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport(config={"train": cfg.to_dict(), "model": model.config.to_dict()})

    def record(epoch: int, traces: list[StepTrace]) -> float:
        val = evaluate(model, val_s, names)
        row = {"epoch": epoch, "val": val}
        if traces:
            row["train"] = {k: float(np.mean([t.loss[k] for t in traces]))
                            for k in ("ce", "dscl", "adgm", "total")}
            row["grad_norm"] = float(np.mean([t.grad_norm for t in traces]))
        else:
            row["train"] = {k: float("nan") for k in ("ce", "dscl", "adgm", "total")}
            row["grad_norm"] = float("nan")
        gaps = dict.fromkeys(names, float("nan"))
        weights = dict.fromkeys(names, float("nan"))
        if bank.active:
            ks = bank.active_domains
            w, _ = adaptive_weights(bank.ema_gaps(), bank.xi)
            for k, g, wk in zip(ks, bank.ema_gaps(), w):
                gaps[names[k - 1]] = float(g)
                weights[names[k - 1]] = float(wk)
        row["gaps"], row["weights"] = gaps, weights
        report.epochs.append(row)
        return val["ce"]

    best_loss = record(0, [])
    best_state = (model.params.flatten(), bank.copy())
    report.best_val_loss, report.best_epoch = best_loss, 0
    waited = 0
    times = []
    for epoch in range(1, cfg.epochs + 1):
        traces = []
        for idx in batch_order(train_s.d, cfg.batch_size, rng, cfg.stratified):
            batch = LabeledBatch(train_s.x[idx], train_s.y[idx], train_s.d[idx])
            t0 = time.perf_counter()
            tr = step(model, bank, batch, cfg, opt)
            times.append(time.perf_counter() - t0)
            traces.append(tr)
            if on_step is not None:
                on_step(tr)
        report.n_steps += len(traces)
        report.history.append(float(np.mean([t.loss["total"] for t in traces])))
        val_loss = record(epoch, traces)
        if val_loss < best_loss:
            best_loss, waited = val_loss, 0
            best_state = (model.params.flatten(), bank.copy())
            report.best_val_loss, report.best_epoch = val_loss, epoch
        else:
            waited += 1
            if waited >= cfg.patience:
                report.stopped_early = True
                break
    model.params.assign(best_state[0])
    bank.__dict__.update(best_state[1].__dict__)
    report.passes = dict(model.passes)
    if times:
        ms = np.asarray(times) * 1e3
        report.ms_per_batch = (float(ms.mean()), float(ms.std()))
    report.test = evaluate(model, test_s, names)
    return report

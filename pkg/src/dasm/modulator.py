"""EMA domain centers, gap-driven adaptive weights and the gap-modulation loss.

Index 0 of the center bank is the cover domain; ``1..S`` are the stego domains.
The EMA centers are plain buffers: they decide the weights (and the cover
reference point), while the differentiable gaps come from the current batch's
per-domain mean features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

XI = 1e-8


def adaptive_weights(gaps, xi: float = XI) -> tuple[np.ndarray, float]:
    """Softmax over ``-g / tau_g`` with ``tau_g = std(g) + xi`` (population std)."""
    g = np.asarray(gaps, dtype=np.float64)
    tau_g = float(g.std()) + xi
    a = -g / tau_g
    w = np.exp(a - a.max())
    return w / w.sum(), tau_g


class DomainCenterBank:
    def __init__(self, n_stego: int, dim: int, momentum: float = 0.9, xi: float = XI):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.n_stego = int(n_stego)
        self.dim = int(dim)
        self.momentum = float(momentum)
        self.xi = float(xi)
        self.centers = np.zeros((self.n_stego + 1, self.dim))
        self.initialized = np.zeros(self.n_stego + 1, dtype=bool)
        self.step = 0

    def update(self, z: np.ndarray, domains: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        domains = np.asarray(domains)
        if domains.size and (domains.max() > self.n_stego or domains.min() < 0):
            bad = int(domains[(domains > self.n_stego) | (domains < 0)][0])
            raise IndexError(f"domain index {bad} outside 0..{self.n_stego}")
        mu = self.momentum
        for k in np.unique(domains):
            mean = z[domains == k].mean(axis=0)
            if self.initialized[k]:
                self.centers[k] = mu * self.centers[k] + (1.0 - mu) * mean
            else:
                self.centers[k] = mean
                self.initialized[k] = True
        self.step += 1

    @property
    def active_domains(self) -> np.ndarray:
        return np.flatnonzero(self.initialized[1:]) + 1

    @property
    def active(self) -> bool:
        return bool(self.initialized[0]) and self.active_domains.size > 0

    def ema_gaps(self) -> np.ndarray:
        ks = self.active_domains
        return np.linalg.norm(self.centers[ks] - self.centers[0], axis=1)

    def copy(self) -> "DomainCenterBank":
        other = DomainCenterBank(self.n_stego, self.dim, self.momentum, self.xi)
        other.centers = self.centers.copy()
        other.initialized = self.initialized.copy()
        other.step = self.step
        return other

    def header(self) -> dict:
        return {"momentum": self.momentum, "xi": self.xi, "step": self.step,
                "shape": list(self.centers.shape),
                "initialized": [bool(v) for v in self.initialized]}


def update_centers(bank: DomainCenterBank, z, domains) -> None:
    bank.update(z.data if isinstance(z, Tensor) else z, domains)


@dataclass
class GapState:
    domains: np.ndarray          # stego domain ids covered by the state
    gaps: Tensor | None          # differentiable per-domain gaps (batch means vs cover center)
    ema_gaps: np.ndarray         # gaps between EMA centers (drive the weights)
    tau_g: float
    weights: np.ndarray
    xi: float = XI

    @property
    def active(self) -> bool:
        return self.gaps is not None and self.domains.size > 0


def inactive_state(xi: float = XI) -> GapState:
    empty = np.zeros(0)
    return GapState(np.zeros(0, dtype=int), None, empty, float("nan"), empty, xi)


def frozen_weights(bank: DomainCenterBank) -> tuple[np.ndarray, np.ndarray, float] | None:
    """(domains, weights, tau_g) from the EMA centers, or None while inactive."""
    if not bank.active:
        return None
    w, tau_g = adaptive_weights(bank.ema_gaps(), bank.xi)
    return bank.active_domains, w, tau_g


def compute_gaps(bank: DomainCenterBank, z: Tensor, domains: np.ndarray,
                 frozen: tuple[np.ndarray, np.ndarray, float] | None = None) -> GapState:
    """Gap state for one batch of normalized features.

    ``frozen`` pins the (domains, weights, tau_g) triple, so two loss evaluations in
    one optimizer step share identical weights. Domains tracked by the bank but
    absent from this batch contribute their EMA gap as a constant.
    """
    if frozen is None:
        frozen = frozen_weights(bank)
    if frozen is None:
        return inactive_state(bank.xi)
    ks, w, tau_g = frozen
    domains = np.asarray(domains)
    n = z.shape[0]
    avg = np.zeros((len(ks), n))
    const = np.zeros((len(ks), bank.dim))
    for row, k in enumerate(ks):
        members = domains == k
        cnt = int(members.sum())
        if cnt:
            avg[row, members] = 1.0 / cnt
        else:
            const[row] = bank.centers[k]
    const -= bank.centers[0]
    diff = ad.add(ad.matmul(avg, z), const)
    gaps = ad.l2norm(diff, axis=1)
    ema = np.linalg.norm(bank.centers[ks] - bank.centers[0], axis=1)
    return GapState(np.asarray(ks), gaps, ema, tau_g, np.asarray(w), bank.xi)


def adgm_loss(state: GapState) -> Tensor:
    """``1 - sum_k w_k g_k / (max_k g_k + xi)``; exactly 0 while the modulator is inactive."""
    if not state.active:
        return Tensor(0.0)
    g = state.gaps
    num = ad.reduce_sum(ad.mul(g, state.weights))
    den = ad.add(ad.reduce_max(g), state.xi)
    return ad.sub(1.0, ad.div(num, den))


def gap_state_from_values(gaps, xi: float = XI) -> GapState:
    """State whose differentiable gaps are the given values (weights recomputed from them)."""
    g = np.asarray(gaps, dtype=np.float64)
    w, tau_g = adaptive_weights(g, xi)
    return GapState(np.arange(1, g.size + 1), Tensor(g, requires_grad=True), g.copy(), tau_g, w, xi)

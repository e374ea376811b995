"""Adam with float64 moment buffers, and the two-phase rank schedule."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import NumericalFailure
from .model import FactoredWeight


class Adam:
    """Per-key Adam with bias correction. Moments are kept in float64
    regardless of parameter dtype; the returned parameter is cast back."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def update(self, key, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure(f"non-finite gradient for {key}")
        g = np.asarray(grad, dtype=np.float64)
        st = self.state.get(key)
        if st is None:
            st = {"m": np.zeros(g.shape), "v": np.zeros(g.shape), "t": 0}
            self.state[key] = st
        if st["m"].shape != g.shape:
            raise ValueError(f"gradient shape changed for {key}: "
                             f"{st['m'].shape} -> {g.shape}")
        st["t"] += 1
        st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
        st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
        mhat = st["m"] / (1.0 - self.beta1 ** st["t"])
        vhat = st["v"] / (1.0 - self.beta2 ** st["t"])
        new = param.astype(np.float64) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return new.astype(param.dtype)

    def truncate(self, key, r_new: int, axis: int) -> None:
        """Slice the moment buffers for key down to r_new along axis. Keys
        with no state yet are left alone."""
        st = self.state.get(key)
        if st is None:
            return
        if r_new > st["m"].shape[axis]:
            raise ValueError("cannot grow moment buffers")
        sl = [slice(None)] * st["m"].ndim
        sl[axis] = slice(0, r_new)
        st["m"] = st["m"][tuple(sl)].copy()
        st["v"] = st["v"][tuple(sl)].copy()

    def state_keys(self):
        return sorted(self.state.keys())


class RankSchedule(NamedTuple):
    """Per-layer schedule constants. Phase 1 spans the first
    ceil(phase1_fraction * total_epochs) epochs and shrinks linearly from r0
    to the target; after that the spectral-energy rule takes over."""
    r0: int
    cap: int
    total_epochs: int
    phase1_fraction: float = 0.3
    phase1_target_fraction: float = 0.7
    energy_threshold: float = 0.95
    hoyer_period: int = 10

    def phase1_epochs(self) -> int:
        return max(1, math.ceil(self.phase1_fraction * self.total_epochs))

    def target(self) -> int:
        return max(1, min(math.ceil(self.phase1_target_fraction * self.r0), self.cap))

    def in_phase1(self, epoch: int) -> bool:
        return epoch < self.phase1_epochs()

    def hoyer_active(self, epoch: int) -> bool:
        return self.in_phase1(epoch) and epoch % self.hoyer_period == 0


def scheduled_rank(epoch: int, sch: RankSchedule) -> int:
    """Phase-1 linear interpolation from r0 down to the target, rounding
    half up. Outside phase 1 the target is returned; the energy rule is
    applied separately on top."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    p1 = sch.phase1_epochs()
    target = sch.target()
    if epoch >= p1:
        return target
    t = epoch / (p1 - 1) if p1 > 1 else 1.0
    r = math.floor(sch.r0 - t * (sch.r0 - target) + 0.5)
    return max(target, min(sch.r0, r))


def spectral_energy_rank(s: np.ndarray, threshold: float) -> int:
    """Smallest k such that the top-k squared singular values hold at least
    the threshold fraction of total squared energy."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty spectrum")
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    energy = s * s
    total = energy.sum()
    if total == 0.0:
        return 1
    cum = np.cumsum(energy) / total
    return int(np.searchsorted(cum, threshold - 1e-12) + 1)


def truncate_factored(fw: FactoredWeight, r_new: int) -> FactoredWeight:
    """Keep the leading r_new components. Slices copy bit-exactly; no
    re-decomposition happens."""
    if r_new > fw.rank:
        raise ValueError(f"cannot grow rank {fw.rank} -> {r_new}")
    if r_new < 1:
        raise ValueError("rank must stay at least 1")
    return FactoredWeight(fw.u[:, :r_new].copy(), fw.s[:r_new].copy(),
                          fw.vt[:r_new, :].copy())


def truncate_rank(fw: FactoredWeight, fb, r_new: int):
    """Truncate a factored weight together with its feedback targets so both
    stay the same leading slice of the original components."""
    fw2 = truncate_factored(fw, r_new)
    fb2 = fb.truncated(r_new) if fb is not None else None
    return fw2, fb2

"""Drift detection on hidden states and incremental model updates.

Incoming segments whose normalized audience level sits below ``T`` are
buffered together with the final action-layer hidden state of their window.
When the buffer holds ``l_s`` entries, the mean pairwise cosine similarity
between the buffered states and the history decides whether the model still
fits: if it does not, a copy is fine-tuned on the buffered windows and merged
back into the current parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .clstm import ClstmParams, forward_batch, merge_models, train
from .errors import ConfigError, ValidationError
from .stream import SequenceWindow, stack_windows

__all__ = [
    "UpdateConfig",
    "DriftState",
    "UpdateLog",
    "cos_set_sim",
    "merge_models",
    "interaction_level",
    "init_state",
    "collect_normals",
    "dynamic_update",
    "DynamicUpdater",
]


@dataclass(frozen=True)
class UpdateConfig:
    l_s: int = 300
    tau_u: float = 0.4
    T: float | None = None  # None: mean normalized level of the previous slot
    lam: float = 0.5
    update_epochs: int = 100
    reservoir: int = 10_000
    comment_channels: int | None = None  # leading entries of ``a`` that count comments
    seed: int = 0

    def validate(self) -> None:
        if self.l_s < 1:
            raise ConfigError(f"l_s must be >= 1, got {self.l_s}")
        if not 0.0 < self.tau_u < 1.0:
            raise ConfigError(f"tau_u must lie in (0, 1), got {self.tau_u}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.update_epochs < 0 or self.reservoir < 1:
            raise ConfigError("update_epochs must be >= 0 and reservoir >= 1")


@dataclass
class DriftState:
    S_h: np.ndarray  # (m, h1) history of hidden states
    S_n: list = field(default_factory=list)
    n_tmp: list = field(default_factory=list)
    norm_max: float = 1.0  # running maximum of the raw audience level
    T: float = 0.5  # current normal-labeling threshold
    slot_levels: list = field(default_factory=list)  # raw levels seen this slot
    seen: int = 0  # hidden states offered to the reservoir so far
    cycle: int = 0


@dataclass(frozen=True)
class UpdateLog:
    cycle: int
    sim: float
    retrained: bool
    wall_time_s: float
    buffer_size: int

    HEADER = "cycle\tsim\tretrained\twall_time_s\tbuffer_size"

    def line(self) -> str:
        return f"{self.cycle}\t{self.sim:.6f}\t{int(self.retrained)}\t{self.wall_time_s:.6f}\t{self.buffer_size}"


def cos_set_sim(S_h, S_n) -> float:
    """Mean cosine similarity over all pairs drawn from the two sets."""
    A = np.atleast_2d(np.asarray(S_h, dtype=float))
    B = np.atleast_2d(np.asarray(S_n, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValidationError("similarity needs two non-empty sets")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValidationError("zero hidden vector has no direction")
    # mean_ij <a_i/|a_i|, b_j/|b_j|> = <mean_i a_i/|a_i|, mean_j b_j/|b_j|>
    return float((A / na[:, None]).mean(axis=0) @ (B / nb[:, None]).mean(axis=0))


def interaction_level(a, comment_channels: int | None = None) -> np.ndarray:
    """Mean of the comment-count channels of one or more interaction features."""
    a = np.asarray(a, dtype=float)
    k = a.shape[-1] if comment_channels is None else comment_channels
    return a[..., :k].mean(axis=-1)


def _hidden(params: ClstmParams, windows: Sequence[SequenceWindow]) -> np.ndarray:
    Xf, Xa, _, _ = stack_windows(windows)
    return forward_batch(params, Xf, Xa)[2]


def _reservoir_add(state: DriftState, H: np.ndarray, cap: int, rng: np.random.Generator) -> None:
    rows = [r for r in state.S_h]
    for h in H:
        state.seen += 1
        if len(rows) < cap:
            rows.append(h)
        else:
            j = int(rng.integers(0, state.seen))
            if j < cap:
                rows[j] = h
    state.S_h = np.array(rows)


def init_state(params: ClstmParams, history: Sequence[SequenceWindow], cfg: UpdateConfig) -> DriftState:
    """History hidden states, normalization and starting ``T`` from training windows."""
    cfg.validate()
    if not history:
        raise ValidationError("drift state needs at least one history window")
    levels = interaction_level(np.array([w.target.interaction for w in history]), cfg.comment_channels)
    norm_max = float(levels.max()) if levels.max() > 0 else 1.0
    state = DriftState(np.zeros((0, params.config.h1)), norm_max=norm_max)
    state.T = cfg.T if cfg.T is not None else float(levels.mean() / norm_max)
    _reservoir_add(state, _hidden(params, history), cfg.reservoir, np.random.default_rng([cfg.seed, 11]))
    return state


def collect_normals(windows: Sequence[SequenceWindow], H: np.ndarray, state: DriftState, cfg: UpdateConfig) -> int:
    """Buffer windows whose target's normalized level is below ``T``.

    ``H`` holds the matching final hidden states.  Returns how many windows
    were consumed: scanning stops as soon as the buffer reaches ``l_s``.
    """
    used = 0
    for w, h in zip(windows, H):
        if len(state.S_n) >= cfg.l_s:
            break
        used += 1
        level = float(interaction_level(w.target.interaction, cfg.comment_channels))
        state.slot_levels.append(level)
        if level / state.norm_max < state.T:
            state.S_n.append(np.asarray(h, dtype=float))
            state.n_tmp.append(w)
    return used


def _full_buffer_update(
    params: ClstmParams, state: DriftState, cfg: UpdateConfig, rng: np.random.Generator
) -> tuple[ClstmParams, UpdateLog]:
    t0 = time.perf_counter()
    S_n = np.array(state.S_n)
    sim = cos_set_sim(state.S_h, S_n)
    # refresh normalization and the next slot's threshold
    levels = np.asarray(state.slot_levels, dtype=float)
    state.norm_max = max(state.norm_max, float(levels.max()))
    if cfg.T is None:
        state.T = float(levels.mean() / state.norm_max)
    retrained = sim <= cfg.tau_u
    if retrained:
        tcfg = replace(params.config, max_epoch=cfg.update_epochs, seed=cfg.seed + state.cycle)
        new, _ = train(state.n_tmp, tcfg, init=params)
        params = merge_models(params, ClstmParams(params.config, new.arrays), cfg.lam)
    _reservoir_add(state, S_n, cfg.reservoir, rng)
    buffered = len(state.S_n)
    state.S_n, state.n_tmp, state.slot_levels = [], [], []
    state.cycle += 1
    return params, UpdateLog(state.cycle, sim, retrained, time.perf_counter() - t0, buffered)


def dynamic_update(
    params: ClstmParams, windows: Sequence[SequenceWindow], cfg: UpdateConfig, state: DriftState
) -> tuple[ClstmParams, DriftState, list[UpdateLog]]:
    """Feed ``windows`` through the buffer, updating whenever it fills.

    Hidden states are taken from the model current at the time each window
    arrives.  Windows left over after the last full buffer stay buffered in
    ``state`` for the next call.
    """
    updater = DynamicUpdater(params, state, cfg)
    updater.feed(windows)
    return updater.params, updater.state, updater.log


class DynamicUpdater:
    """Stateful driver used by the online ``stream`` path.

    Each window is reconstructed by the model current when it arrives, then
    offered to the buffer; a full buffer triggers the drift check (and any
    update) before the next window is scored.  Forward passes use the same
    index-aligned chunks as batch detection, so with updates disabled the
    outputs match ``pipeline.detect`` exactly.
    """

    def __init__(self, params: ClstmParams, state: DriftState, cfg: UpdateConfig, enabled: bool = True, chunk: int = 256):
        cfg.validate()
        self.params = params
        self.state = state
        self.cfg = cfg
        self.enabled = enabled
        self.chunk = chunk
        self.position = 0  # windows consumed so far
        self.log: list[UpdateLog] = []
        self._rng = np.random.default_rng([cfg.seed, 13])

    def feed(self, windows: Sequence[SequenceWindow]) -> tuple[np.ndarray, np.ndarray]:
        """Process windows in arrival order; returns stacked ``(f_hat, a_hat)``."""
        from .pipeline import reconstruct

        windows = list(windows)
        out_f, out_a = [], []
        i = 0
        while i < len(windows):
            pos = self.position
            stop = min(len(windows), i + self.chunk - pos % self.chunk)
            fh, ah, H = reconstruct(self.params, windows[i:stop], self.chunk, pos)
            used = stop - i
            if self.enabled:
                used = collect_normals(windows[i:stop], H, self.state, self.cfg)
            out_f.append(fh[:used])
            out_a.append(ah[:used])
            i += used
            self.position += used
            if self.enabled and len(self.state.S_n) >= self.cfg.l_s:
                self.params, entry = _full_buffer_update(self.params, self.state, self.cfg, self._rng)
                self.log.append(entry)
        if not out_f:
            return np.zeros((0, self.params.config.d1)), np.zeros((0, self.params.config.d2))
        return np.concatenate(out_f), np.concatenate(out_a)

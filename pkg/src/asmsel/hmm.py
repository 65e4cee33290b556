"""
Left-to-right GMM-HMM tokenizer refined by segmental (Viterbi) training.

Every acoustic unit owns an ``n_states`` left-to-right HMM whose states emit
through diagonal-covariance Gaussian mixtures.  Decoding runs all unit HMMs in
parallel: the last state of any unit may exit into the first state of any unit
with the uniform unit-loop probability ``1/D``.  A path's score is

    log(1/D) per unit entered + sum of emission log-likelihoods
    + sum of within-unit transition log-probabilities + one exit per token,

so the path ends with the exit of its last token.  Training alternates exact
Viterbi decoding with re-estimation on the resulting hard alignments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .asm_init import AsmSequence, kmeans_fit
from .errors import ContractError, FingerprintMismatch
from .features import FrameMatrix

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
SELF_LOOP_RANGE = (0.1, 0.9)


@dataclass
class GmmHmm:
    """Read-only view of one unit's HMM inside a :class:`GmmHmmSet`."""

    unit_id: int
    weights: np.ndarray      # (S, G)
    means: np.ndarray        # (S, G, F)
    variances: np.ndarray    # (S, G, F)
    transitions: np.ndarray  # (S, S + 1); column S is the exit

    @property
    def n_states(self) -> int:
        return self.weights.shape[0]


@dataclass
class GmmHmmSet:
    """Parameters of all ``D`` unit HMMs, stacked along the first axis.

    ``transitions[u, i, i]`` is the self-loop of state ``i`` and
    ``transitions[u, i, i + 1]`` the advance; for the last state the advance
    column is the exit out of the unit.
    """

    weights: np.ndarray       # (D, S, G)
    means: np.ndarray         # (D, S, G, F)
    variances: np.ndarray     # (D, S, G, F)
    transitions: np.ndarray   # (D, S, S + 1)
    var_floor: np.ndarray     # (F,)
    fingerprint: str = ""
    n_iter: int = 0
    objective: list[float] = field(default_factory=list)

    def __post_init__(self):
        D, S, G, F = self.means.shape
        if self.weights.shape != (D, S, G) or self.variances.shape != (D, S, G, F):
            raise ContractError("inconsistent GMM parameter shapes")
        if self.transitions.shape != (D, S, S + 1):
            raise ContractError(f"transition tensor must be {(D, S, S + 1)}, got {self.transitions.shape}")

    @property
    def n_units(self) -> int:
        return self.means.shape[0]

    @property
    def n_states(self) -> int:
        return self.means.shape[1]

    @property
    def n_gauss(self) -> int:
        return self.means.shape[2]

    @property
    def dim(self) -> int:
        return self.means.shape[3]

    @property
    def unit_loop_logprob(self) -> float:
        return -np.log(self.n_units)

    def __getitem__(self, u: int) -> GmmHmm:
        return GmmHmm(u, self.weights[u], self.means[u], self.variances[u], self.transitions[u])

    def __len__(self):
        return self.n_units

    def copy(self) -> "GmmHmmSet":
        return GmmHmmSet(self.weights.copy(), self.means.copy(), self.variances.copy(),
                         self.transitions.copy(), self.var_floor.copy(), self.fingerprint,
                         self.n_iter, list(self.objective))

    def log_self(self) -> np.ndarray:
        S = self.n_states
        with np.errstate(divide="ignore"):
            return np.log(self.transitions[:, np.arange(S), np.arange(S)])

    def log_advance(self) -> np.ndarray:
        S = self.n_states
        with np.errstate(divide="ignore"):
            return np.log(self.transitions[:, np.arange(S), np.arange(S) + 1])

    def log_likelihoods(self, frames: np.ndarray) -> np.ndarray:
        """Emission log-likelihoods of every state for every frame, ``(T, D, S)``."""
        X = np.asarray(frames, dtype=np.float64)
        D, S, G, F = self.means.shape
        prec = 1.0 / self.variances.reshape(-1, F)
        mu = self.means.reshape(-1, F)
        const = -0.5 * (F * LOG_2PI + np.log(self.variances.reshape(-1, F)).sum(axis=1)
                        + np.einsum("kf,kf,kf->k", mu, mu, prec))
        quad = -0.5 * (X * X) @ prec.T + X @ (mu * prec).T
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights.reshape(-1))
        comp = (quad + const + logw).reshape(X.shape[0], D, S, G)
        return logsumexp(comp, axis=3)

    def state_log_likelihood(self, unit: int, state: int, frame: np.ndarray) -> float:
        """Emission score of a single frame; the pluggable emission interface."""
        x = np.asarray(frame, dtype=np.float64)
        v = self.variances[unit, state]
        m = self.means[unit, state]
        comp = -0.5 * (self.dim * LOG_2PI + np.log(v).sum(axis=1) + ((x - m) ** 2 / v).sum(axis=1))
        with np.errstate(divide="ignore"):
            return float(logsumexp(comp + np.log(self.weights[unit, state])))


@dataclass
class DecodeResult:
    sequence: AsmSequence
    best_path_loglik: float
    states: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Viterbi over the parallel unit graph
# ---------------------------------------------------------------------------

def viterbi(log_emit: np.ndarray, log_self: np.ndarray, log_adv: np.ndarray,
            unit_loop: float):
    """Exact best path through ``D`` parallel left-to-right HMMs.

    Parameters
    ----------
    log_emit : (T, D, S) array
        Emission log-likelihoods.
    log_self, log_adv : (D, S) arrays
        Self-loop and advance log-probabilities; ``log_adv[:, -1]`` is the exit.
    unit_loop : float
        Log-probability of entering any unit (start of utterance or after an exit).

    Returns
    -------
    score : float
        Best path log-likelihood including the final exit.
    units, states : (T,) int arrays
        Unit and state occupied at each frame.
    starts : list of int
        Frames at which a new unit token was entered.

    Ties go to the lower unit id, then to staying in the current state.
    """
    T, D, S = log_emit.shape
    if T < S:
        raise ContractError(f"{T} frames cannot traverse a {S}-state unit")
    units = np.arange(D)
    bp_unit = np.empty((T, D, S), dtype=np.int32)
    bp_state = np.empty((T, D, S), dtype=np.int32)
    entered = np.zeros((T, D, S), dtype=bool)

    delta = np.full((D, S), -np.inf)
    delta[:, 0] = unit_loop + log_emit[0, :, 0]
    entered[0, :, 0] = True
    bp_unit[0] = units[:, None]
    bp_state[0] = 0
    state_idx = np.broadcast_to(np.arange(S), (D, S))

    for t in range(1, T):
        stay = delta + log_self
        adv = np.full((D, S), -np.inf)
        adv[:, 1:] = delta[:, :-1] + log_adv[:, :-1]
        take_adv = adv > stay
        best = np.where(take_adv, adv, stay)
        b_state = np.where(take_adv, state_idx - 1, state_idx)
        b_unit = np.broadcast_to(units[:, None], (D, S)).copy()
        ent = np.zeros((D, S), dtype=bool)

        exit_scores = delta[:, S - 1] + log_adv[:, S - 1] + unit_loop
        u_best = int(np.argmax(exit_scores))
        e_best = exit_scores[u_best]
        take_entry = (e_best > best[:, 0]) | ((e_best == best[:, 0]) & (u_best < units))
        take_entry &= np.isfinite(e_best)
        best[take_entry, 0] = e_best
        b_unit[take_entry, 0] = u_best
        b_state[take_entry, 0] = S - 1
        ent[take_entry, 0] = True

        delta = best + log_emit[t]
        bp_unit[t] = b_unit
        bp_state[t] = b_state
        entered[t] = ent

    final = delta[:, S - 1] + log_adv[:, S - 1]
    u = int(np.argmax(final))
    score = float(final[u])
    if not np.isfinite(score):
        raise ContractError("no finite path through the unit graph")
    s = S - 1
    path_u = np.empty(T, dtype=np.int64)
    path_s = np.empty(T, dtype=np.int64)
    starts = []
    for t in range(T - 1, -1, -1):
        path_u[t], path_s[t] = u, s
        if entered[t, u, s]:
            starts.append(t)
        u, s = bp_unit[t, u, s], bp_state[t, u, s]
    return score, path_u, path_s, starts[::-1]


def _check_fp(fm: FrameMatrix, models: GmmHmmSet):
    if models.fingerprint and fm.fingerprint and models.fingerprint != fm.fingerprint:
        raise FingerprintMismatch(
            f"{fm.utterance_id}: features {fm.fingerprint} vs models {models.fingerprint}")
    if fm.dim != models.dim:
        raise ContractError(f"{fm.utterance_id}: feature dim {fm.dim} != model dim {models.dim}")


def viterbi_decode(fm: FrameMatrix, models: GmmHmmSet) -> DecodeResult:
    _check_fp(fm, models)
    if fm.n_frames < models.n_states:
        raise ContractError(
            f"{fm.utterance_id}: {fm.n_frames} frames < {models.n_states} states")
    score, path_u, path_s, starts = viterbi(
        models.log_likelihoods(fm.frames), models.log_self(), models.log_advance(),
        models.unit_loop_logprob)
    ends = starts[1:] + [fm.n_frames]
    seq = AsmSequence(fm.utterance_id, [(int(path_u[s]), s, e) for s, e in zip(starts, ends)])
    return DecodeResult(seq, score, path_s)


def align_token(log_emit: np.ndarray, log_self: np.ndarray, log_adv: np.ndarray) -> np.ndarray:
    """Best state alignment of one token against one unit HMM.

    The alignment must start in state 0 and end in the last state.  Returns
    the state index of every frame; ties prefer staying.
    """
    L, S = log_emit.shape
    if L < S:
        raise ContractError(f"token of {L} frames shorter than {S} states")
    delta = np.full(S, -np.inf)
    delta[0] = log_emit[0, 0]
    moved = np.zeros((L, S), dtype=bool)
    for t in range(1, L):
        stay = delta + log_self
        adv = np.full(S, -np.inf)
        adv[1:] = delta[:-1] + log_adv[:-1]
        moved[t] = adv > stay
        delta = np.where(moved[t], adv, stay) + log_emit[t]
    states = np.empty(L, dtype=np.int64)
    s = S - 1
    for t in range(L - 1, -1, -1):
        states[t] = s
        if moved[t, s]:
            s -= 1
    return states


# ---------------------------------------------------------------------------
# GMM estimation
# ---------------------------------------------------------------------------

def _gmm_init(X: np.ndarray, G: int, var_floor: np.ndarray, seed: int):
    F = X.shape[1]
    w = np.full(G, 1.0 / G)
    mu = np.tile(X.mean(axis=0), (G, 1))
    var = np.tile(np.maximum(X.var(axis=0), var_floor), (G, 1))
    if G == 1 or len(np.unique(X, axis=0)) < G:
        return w, mu, var
    inv = kmeans_fit(X, G, seed=seed, max_iters=20, tol=1e-4)
    labels = ((X[:, None, :] - inv.centroids[None]) ** 2).sum(axis=2).argmin(axis=1)
    for k in range(G):
        members = X[labels == k]
        if len(members) == 0:
            continue
        w[k] = len(members) / len(X)
        mu[k] = members.mean(axis=0)
        var[k] = np.maximum(members.var(axis=0), var_floor) if len(members) > 1 else var[k]
    w /= w.sum()
    return w, mu.reshape(G, F), var


def gmm_em_step(X: np.ndarray, w: np.ndarray, mu: np.ndarray, var: np.ndarray,
                var_floor: np.ndarray):
    """One EM pass for a diagonal GMM with a per-dimension variance floor.

    Components that receive (numerically) no responsibility keep their
    mean and variance; their weight becomes their tiny share.
    """
    comp = -0.5 * (LOG_2PI * X.shape[1] + np.log(var).sum(axis=1)
                   + (((X[:, None, :] - mu[None]) ** 2) / var[None]).sum(axis=2))
    with np.errstate(divide="ignore"):
        comp = comp + np.log(w)
    resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
    nk = resp.sum(axis=0)
    new_w = nk / nk.sum()
    new_mu = mu.copy()
    new_var = var.copy()
    live = nk > 1e-10
    if np.any(live):
        r = resp[:, live]
        m = (r.T @ X) / nk[live, None]
        new_mu[live] = m
        sq = (r.T @ (X * X)) / nk[live, None] - m * m
        new_var[live] = np.maximum(sq, var_floor)
    return new_w, new_mu, new_var


def _clamp_self(p):
    return np.clip(p, *SELF_LOOP_RANGE)


def _transition_rows(self_p: np.ndarray) -> np.ndarray:
    S = len(self_p)
    trans = np.zeros((S, S + 1))
    trans[np.arange(S), np.arange(S)] = self_p
    trans[np.arange(S), np.arange(S) + 1] = 1.0 - self_p
    return trans


def _check_pairing(corpus: Sequence[FrameMatrix], seqs: Sequence[AsmSequence]):
    if len(corpus) != len(seqs):
        raise ContractError(f"{len(corpus)} utterances but {len(seqs)} sequences")
    for fm, seq in zip(corpus, seqs):
        if fm.utterance_id != seq.utterance_id:
            raise ContractError(f"utterance {fm.utterance_id} paired with sequence {seq.utterance_id}")
        if seq.n_frames > fm.n_frames:
            raise ContractError(f"{seq.utterance_id}: sequence covers {seq.n_frames} frames, "
                                f"utterance has {fm.n_frames}")


def global_var_floor(corpus: Sequence[FrameMatrix], scale: float = 1e-3,
                     minimum: float = 1e-10) -> np.ndarray:
    frames = np.vstack([fm.frames for fm in corpus])
    return np.maximum(scale * frames.var(axis=0), minimum)


def seed_hmms(corpus: Sequence[FrameMatrix], init_seqs: Sequence[AsmSequence], n_units: int,
              n_states: int = 6, n_gauss: int = 4, em_iters: int = 10, seed: int = 0) -> GmmHmmSet:
    """Initial per-unit GMM-HMMs from a (fixed-length) tokenization.

    Each token is cut uniformly into ``n_states`` sub-spans; state ``s`` of a
    unit is fitted on the pooled ``s``-th sub-spans of all its tokens.
    """
    _check_pairing(corpus, init_seqs)
    F = corpus[0].dim
    floor = global_var_floor(corpus)
    pooled = [[[] for _ in range(n_states)] for _ in range(n_units)]
    span_total = np.zeros(n_units)
    span_count = np.zeros(n_units)
    for fm, seq in zip(corpus, init_seqs):
        seq.check_units(n_units)
        for u, s, e in seq.tokens:
            if e - s < n_states:
                raise ContractError(
                    f"{seq.utterance_id}: token of unit {u} at [{s}, {e}) shorter than {n_states} states")
            for k, part in enumerate(np.array_split(np.arange(s, e), n_states)):
                pooled[u][k].append(fm.frames[part])
            span_total[u] += e - s
            span_count[u] += 1

    missing = np.flatnonzero(span_count == 0)
    if len(missing):
        raise ContractError(f"unit {int(missing[0])} has no occurrences in the initial tokenization"
                            + (f" ({len(missing)} units missing)" if len(missing) > 1 else ""))

    weights = np.empty((n_units, n_states, n_gauss))
    means = np.empty((n_units, n_states, n_gauss, F))
    variances = np.empty((n_units, n_states, n_gauss, F))
    trans = np.empty((n_units, n_states, n_states + 1))
    for u in range(n_units):
        for k in range(n_states):
            X = np.vstack(pooled[u][k])
            w, mu, var = _gmm_init(X, n_gauss, floor, seed + 1000 * u + k)
            for _ in range(em_iters):
                w, mu, var = gmm_em_step(X, w, mu, var, floor)
            weights[u, k], means[u, k], variances[u, k] = w, mu, var
        self_p = _clamp_self(1.0 - n_states / (span_total[u] / span_count[u]))
        trans[u] = _transition_rows(np.full(n_states, self_p))
    return GmmHmmSet(weights, means, variances, trans, floor, corpus[0].fingerprint)


def reestimate(corpus: Sequence[FrameMatrix], seqs: Sequence[AsmSequence],
               prev: GmmHmmSet) -> GmmHmmSet:
    """Segmental re-training on hard unit transcriptions.

    Within every token the frames are aligned to the unit's states with
    ``prev``; each state's GMM then gets one EM pass on its frames and the
    transition probabilities are re-counted.  Units without tokens keep their
    previous parameters untouched.
    """
    _check_pairing(corpus, seqs)
    D, S = prev.n_units, prev.n_states
    log_self, log_adv = prev.log_self(), prev.log_advance()
    frames_by_state = [[[] for _ in range(S)] for _ in range(D)]
    n_self = np.zeros((D, S))
    n_adv = np.zeros((D, S))
    for fm, seq in zip(corpus, seqs):
        seq.check_units(D)
        emit = prev.log_likelihoods(fm.frames[:seq.n_frames])
        for u, s, e in seq.tokens:
            states = align_token(emit[s:e, u], log_self[u], log_adv[u])
            for k in range(S):
                frames_by_state[u][k].append(fm.frames[s:e][states == k])
            moves = np.diff(states)
            np.add.at(n_self[u], states[:-1][moves == 0], 1)
            np.add.at(n_adv[u], states[:-1][moves == 1], 1)
            n_adv[u, S - 1] += 1  # exit

    new = prev.copy()
    for u in range(D):
        if n_adv[u, S - 1] == 0:
            continue
        for k in range(S):
            X = np.vstack(frames_by_state[u][k])
            new.weights[u, k], new.means[u, k], new.variances[u, k] = gmm_em_step(
                X, prev.weights[u, k], prev.means[u, k], prev.variances[u, k], prev.var_floor)
        self_p = _clamp_self(n_self[u] / (n_self[u] + n_adv[u]))
        new.transitions[u] = _transition_rows(self_p)
    return new


def frame_stability(old: Sequence[np.ndarray], new: Sequence[np.ndarray]) -> float:
    same = sum(int(np.sum(a == b)) for a, b in zip(old, new))
    total = sum(len(b) for b in new)
    return same / total


@dataclass
class TrainingTrace:
    objective: list[float] = field(default_factory=list)
    stability: list[float] = field(default_factory=list)
    converged: bool = False


def train_tokenizer(corpus: Sequence[FrameMatrix], init_seqs: Sequence[AsmSequence], n_units: int,
                    n_states: int = 6, n_gauss: int = 4, max_iters: int = 10,
                    stability_threshold: float = 0.995, em_iters: int = 10, seed: int = 0,
                    models: GmmHmmSet | None = None):
    """Seed, then alternate decoding and re-estimation until labels settle.

    Converged when the share of frames whose unit label did not change
    between successive decodes (the first decode is compared with
    ``init_seqs``) reaches ``stability_threshold``.

    Returns
    -------
    models : GmmHmmSet
        The models that produced the returned sequences; ``models.objective``
        holds the summed best-path log-likelihood of every decode.
    seqs : list of AsmSequence
    trace : TrainingTrace
    """
    if models is None:
        # a clamped final fixed-length span may be too short to seed from
        init_seqs = [seq.drop_short_tail(n_states) for seq in init_seqs]
        models = seed_hmms(corpus, init_seqs, n_units, n_states, n_gauss, em_iters, seed)
    prev_labels = [seq.frame_labels(fm.n_frames) for fm, seq in zip(corpus, init_seqs)]
    trace = TrainingTrace()
    seqs = list(init_seqs)
    for it in range(1, max_iters + 1):
        results = [viterbi_decode(fm, models) for fm in corpus]
        seqs = [r.sequence for r in results]
        trace.objective.append(float(sum(r.best_path_loglik for r in results)))
        labels = [seq.frame_labels(fm.n_frames) for fm, seq in zip(corpus, seqs)]
        trace.stability.append(frame_stability(prev_labels, labels))
        models.n_iter = it
        models.objective = list(trace.objective)
        logger.info("tokenizer iter %d: objective %.6g, label stability %.4f",
                    it, trace.objective[-1], trace.stability[-1])
        if trace.stability[-1] >= stability_threshold:
            trace.converged = True
            break
        if it == max_iters:
            break
        models = reestimate(corpus, seqs, models)
        prev_labels = labels
    return models, seqs, trace

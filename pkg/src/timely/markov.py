"""Inhomogeneous hidden Markov chain/tree over pseudotime-ordered labels.

The hidden state of each cell is its true type; the observation is the
noisy expert label.  Transitions between consecutive cells depend on the
pseudotime gap y through an exponential-rate parameterization:

    A_kl(y) = p_kl * lam_kl * exp(-lam_kl * y) / sum_i p_ki * lam_ki * exp(-lam_ki * y)

restricted to the allowed targets (self plus topology children).  The
rates {p, lam} are learned by generalized EM with pi and B held fixed;
the generalized Viterbi pass decodes the most probable hidden labels.

All recursions run in log space on the node tree (a chain is the
single-branch special case).  Structural zeros are -inf, never tiny
probabilities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .core import (
    Border,
    HmtParams,
    LineageTopology,
    OrderedDataset,
    TimelyError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6
_M_STEP_INNER = 25
_LOG_RATE_BOUND = 20.0  # keeps lam within [exp(-20), exp(20)] during ascent


class DegenerateModelError(TimelyError):
    """No hidden assignment has positive probability."""


@dataclass(frozen=True)
class HmtInstance:
    """A dataset bound to a topology and parameters, ready for inference.

    ``parent`` holds the node tree (-1 at the root, which is node 0, the
    minimum-pseudotime cell); ``x`` the 0-based observed labels; ``y`` the
    pseudotime gap to the parent (0 at the root, unused).
    """

    topology: LineageTopology
    ordered: OrderedDataset
    params: HmtParams
    x: np.ndarray = field(repr=False)
    parent: np.ndarray = field(repr=False)
    children: tuple[tuple[int, ...], ...] = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    @property
    def structure(self) -> np.ndarray:
        return self.parent


def build_instance(
    topology: LineageTopology, ordered: OrderedDataset, params: HmtParams
) -> HmtInstance:
    """Assemble an instance, validating labels against the topology."""
    K = topology.n_states
    labels = ordered.observed_labels()
    if ordered.n_cells == 0:
        raise ValidationError("cannot build an instance from an empty dataset")
    if np.any(labels < 1) or np.any(labels > K):
        bad = int(np.flatnonzero((labels < 1) | (labels > K))[0])
        raise ValidationError(f"cell {ordered.cells[bad].id!r} has label outside 1..{K}")
    parent = ordered.parent_index
    children: list[list[int]] = [[] for _ in range(ordered.n_cells)]
    for t in range(1, ordered.n_cells):
        children[parent[t]].append(t)
    y = np.where(np.isnan(ordered.y), 0.0, ordered.y)
    return HmtInstance(
        topology=topology,
        ordered=ordered,
        params=params,
        x=labels - 1,
        parent=parent,
        children=tuple(tuple(c) for c in children),
        y=y,
    )


def initial_transitions(
    topology: LineageTopology, ordered: OrderedDataset
) -> dict[tuple[int, int], tuple[float, float]]:
    """Uninformative starting point: uniform p per row, lam = 1/mean(y)."""
    gaps = ordered.y[1:]
    gaps = gaps[~np.isnan(gaps)]
    mean_gap = float(gaps.mean()) if gaps.size else 0.0
    lam = 1.0 / mean_gap if mean_gap > 0 else 1.0
    trans = {}
    for k in range(1, topology.n_states + 1):
        targets = topology.allowed_targets(k)
        for l in targets:
            trans[(k, l)] = (1.0 / len(targets), lam)
    return trans


def transition_matrix(params: HmtParams, topology: LineageTopology, y: float) -> np.ndarray:
    """Row-stochastic K x K transition matrix for one pseudotime gap.

    Disallowed entries are exactly 0; rows whose rates are all equal
    reduce to the base probabilities exactly (the exponentials cancel).
    """
    if not (math.isfinite(y) and y >= 0):
        raise ValidationError(f"pseudotime gap must be finite and >= 0, got {y!r}")
    K = topology.n_states
    A = np.zeros((K, K))
    for k in range(1, K + 1):
        targets = topology.allowed_targets(k)
        p = np.array([params.trans[(k, l)][0] for l in targets])
        lam = np.array([params.trans[(k, l)][1] for l in targets])
        cols = [l - 1 for l in targets]
        if np.all(lam == lam[0]):
            A[k - 1, cols] = p
            continue
        with np.errstate(divide="ignore"):
            logw = np.log(p) + np.log(lam) - lam * y
        shifted = logw - logw.max()
        w = np.exp(shifted)
        A[k - 1, cols] = w / w.sum()
    return A


def _log_transitions_per_node(instance: HmtInstance) -> np.ndarray:
    """log A^(t) for every node (index 0 unused)."""
    T, K = instance.n_nodes, instance.topology.n_states
    out = np.full((T, K, K), -np.inf)
    with np.errstate(divide="ignore"):
        for t in range(1, T):
            out[t] = np.log(transition_matrix(instance.params, instance.topology, instance.y[t]))
    return out


def _log_emissions(instance: HmtInstance) -> np.ndarray:
    """log B[k, x_t] per node: T x K."""
    with np.errstate(divide="ignore"):
        logB = np.log(instance.params.B)
    return logB[:, instance.x].T


def _upward(instance, log_A, log_ev):
    """Leaves-to-root pass.

    Returns (log_beta, log_M, log_likelihood) where
    log_beta[t, k] = log P(observations in subtree(t) | Z_t = k) and
    log_M[c, k] = log sum_l A^(c)_kl beta_c(l), the child c's message to
    its parent.
    """
    T, K = log_ev.shape
    log_beta = np.empty((T, K))
    log_M = np.full((T, K), -np.inf)
    for t in range(T - 1, -1, -1):
        log_beta[t] = log_ev[t]
        for c in instance.children[t]:
            log_beta[t] += log_M[c]
        if t > 0:
            log_M[t] = logsumexp(log_A[t] + log_beta[t][None, :], axis=1)
    with np.errstate(divide="ignore"):
        log_pi = np.log(instance.params.pi)
    ll = float(logsumexp(log_pi + log_beta[0]))
    return log_beta, log_M, ll


def _impossible_nodes(instance, log_ev) -> list[str]:
    bad = np.flatnonzero(np.all(np.isneginf(log_ev), axis=1))
    return [instance.ordered.cells[t].id for t in bad]


def log_likelihood(instance: HmtInstance) -> float:
    """log P(observed labels) via the upward sum-product pass.

    Returns -inf (with a diagnostic naming the offending node) when some
    observation has zero emission probability under every state or no
    allowed hidden assignment explains the data.
    """
    log_A = _log_transitions_per_node(instance)
    log_ev = _log_emissions(instance)
    _, _, ll = _upward(instance, log_A, log_ev)
    if math.isinf(ll):
        bad = _impossible_nodes(instance, log_ev)
        detail = f"zero emission probability at node(s) {bad}" if bad else "no consistent assignment"
        logger.warning("log-likelihood is -inf: %s", detail)
    return ll


@dataclass(frozen=True)
class PosteriorSet:
    """Smoothed marginals gamma[t, k] and pairwise xi[t, k, l].

    xi[t] couples node t with its parent (xi[0] is all zeros: the root
    has no parent).
    """

    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float


def posteriors(instance: HmtInstance) -> PosteriorSet:
    """Exact smoothed posteriors for the current parameters."""
    log_A = _log_transitions_per_node(instance)
    log_ev = _log_emissions(instance)
    log_beta, log_M, ll = _upward(instance, log_A, log_ev)
    if math.isinf(ll):
        bad = _impossible_nodes(instance, log_ev)
        raise DegenerateModelError(
            f"posteriors undefined: likelihood is zero"
            f"{' (zero emission at node(s) ' + repr(bad) + ')' if bad else ''}"
        )
    T, K = log_ev.shape
    with np.errstate(divide="ignore"):
        log_pi = np.log(instance.params.pi)
    log_gamma = np.full((T, K), -np.inf)
    log_xi = np.full((T, K, K), -np.inf)
    log_gamma[0] = log_pi + log_beta[0] - ll
    for t in range(1, T):
        p = instance.parent[t]
        # xi_t(k, l) = gamma_p(k) * A^(t)_kl * beta_t(l) / M_t(k); rows with
        # zero parent mass stay structurally -inf.
        active = ~np.isneginf(log_gamma[p])
        rows = log_gamma[p][active, None] - log_M[t][active, None]
        log_xi[t][active] = rows + log_A[t][active] + log_beta[t][None, :]
        log_gamma[t] = logsumexp(log_xi[t], axis=0)
    gamma = np.exp(log_gamma)
    xi = np.exp(log_xi)
    xi[0] = 0.0
    return PosteriorSet(gamma=gamma, xi=xi, log_likelihood=ll)


def viterbi(instance: HmtInstance) -> tuple[np.ndarray, float]:
    """Most probable hidden labels (1-based) and their joint log-probability.

    Max-product upward pass with downward backtracking; ties break toward
    the lower state index.
    """
    log_A = _log_transitions_per_node(instance)
    log_ev = _log_emissions(instance)
    T, K = log_ev.shape
    log_delta = np.empty((T, K))
    backptr = np.zeros((T, K), dtype=int)
    for t in range(T - 1, -1, -1):
        log_delta[t] = log_ev[t]
        for c in instance.children[t]:
            scores = log_A[c] + log_delta[c][None, :]  # score[k, l]
            log_delta[t] += scores.max(axis=1)
            backptr[c] = scores.argmax(axis=1)
    with np.errstate(divide="ignore"):
        log_pi = np.log(instance.params.pi)
    root_scores = log_pi + log_delta[0]
    best = float(root_scores.max())
    if math.isinf(best):
        bad = _impossible_nodes(instance, log_ev)
        raise DegenerateModelError(
            f"no hidden assignment has positive probability"
            f"{' (zero emission at node(s) ' + repr(bad) + ')' if bad else ''}"
        )
    states = np.zeros(T, dtype=int)
    states[0] = int(root_scores.argmax())
    for t in range(1, T):
        states[t] = backptr[t, states[instance.parent[t]]]
    return states + 1, best


def borders(instance: HmtInstance, inferred: np.ndarray) -> list[Border]:
    """Transition borders: midpoints where the inferred state changes.

    Labels must come from :func:`viterbi` (so every change follows a
    topology edge).  A change across a branch point is reported on the
    child branch.
    """
    inferred = np.asarray(inferred, dtype=int)
    pt = instance.ordered.pseudotime
    branch = instance.ordered.branch_id
    out = []
    for t in range(1, instance.n_nodes):
        p = instance.parent[t]
        if inferred[t] != inferred[p]:
            out.append(
                Border(
                    branch_id=int(branch[t]),
                    from_state=int(inferred[p]),
                    to_state=int(inferred[t]),
                    pseudotime=float((pt[p] + pt[t]) / 2.0),
                )
            )
    out.sort(key=lambda b: (b.branch_id, b.pseudotime))
    return out


# ---------------------------------------------------------------------------
# Generalized EM
# ---------------------------------------------------------------------------

def _row_objective(a, b, xi_row, n_mass, ys):
    """Q contribution of one transition row under unconstrained params.

    a: logits of the base probabilities; b: log rates.  xi_row[t, j] are
    the pairwise posteriors restricted to the row's targets, n_mass[t]
    their per-node totals, ys the pseudotime gaps.
    """
    log_p = a - logsumexp(a)
    lam = np.exp(b)
    log_w = log_p[None, :] + b[None, :] - ys[:, None] * lam[None, :]
    log_S = logsumexp(log_w, axis=1)
    q = float(np.sum(xi_row * log_w) - np.sum(n_mass * log_S))
    A = np.exp(log_w - log_S[:, None])
    resid = xi_row - n_mass[:, None] * A  # shared factor of both gradients
    grad_a = resid.sum(axis=0)
    grad_b = np.sum((1.0 - ys[:, None] * lam[None, :]) * resid, axis=0)
    return q, grad_a, grad_b


def _ascend_row(a, b, xi_row, n_mass, ys):
    """Backtracking gradient ascent on one row; only improving steps."""
    q, ga, gb = _row_objective(a, b, xi_row, n_mass, ys)
    step = 1.0
    for _ in range(_M_STEP_INNER):
        if not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gb))):
            break
        gnorm = math.sqrt(float(ga @ ga + gb @ gb))
        if gnorm < 1e-12:
            break
        improved = False
        while step >= 1e-12:
            a_new = a + step * ga
            b_new = np.clip(b + step * gb, -_LOG_RATE_BOUND, _LOG_RATE_BOUND)
            q_new, ga_new, gb_new = _row_objective(a_new, b_new, xi_row, n_mass, ys)
            if math.isfinite(q_new) and q_new > q:
                a, b, q, ga, gb = a_new, b_new, q_new, ga_new, gb_new
                step *= 2.0
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return a, b, q


def _m_step(instance: HmtInstance, post: PosteriorSet, estimate_emissions: bool) -> HmtParams:
    """Improve the transition parameters row by row (GEM: improve, not solve)."""
    topo = instance.topology
    trans = dict(instance.params.trans)
    ys = instance.y[1:]
    for k in range(1, topo.n_states + 1):
        targets = topo.allowed_targets(k)
        if len(targets) < 2:
            continue  # end stage: the single self-transition is pinned
        cols = [l - 1 for l in targets]
        xi_row = post.xi[1:, k - 1, :][:, cols]
        n_mass = xi_row.sum(axis=1)
        if n_mass.sum() <= 0:
            continue  # state never occupied: nothing to learn
        p = np.array([trans[(k, l)][0] for l in targets])
        lam = np.array([trans[(k, l)][1] for l in targets])
        with np.errstate(divide="ignore"):
            a = np.log(np.maximum(p, 1e-300))
        b = np.log(lam)
        a, b, _ = _ascend_row(a, b, xi_row, n_mass, ys)
        p_new = np.exp(a - logsumexp(a))
        p_new /= p_new.sum()  # exact renormalization for the invariant
        lam_new = np.exp(b)
        for j, l in enumerate(targets):
            trans[(k, l)] = (float(p_new[j]), float(lam_new[j]))
    B = instance.params.B
    if estimate_emissions:
        K = topo.n_states
        counts = np.zeros((K, K))
        for t in range(instance.n_nodes):
            counts[:, instance.x[t]] += post.gamma[t]
        row_sums = counts.sum(axis=1, keepdims=True)
        B = np.where(row_sums > 0, counts / np.maximum(row_sums, 1e-300), instance.params.B)
        B = B / B.sum(axis=1, keepdims=True)
    return HmtParams(pi=instance.params.pi, B=B, trans=trans, topology=topo)


def fit(
    instance: HmtInstance,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    estimate_emissions: bool = False,
) -> tuple[HmtParams, list[float]]:
    """Learn {p_kl, lam_kl} by generalized EM; pi and B stay fixed.

    Returns the fitted parameters and the log-likelihood recorded at each
    E-step (non-decreasing up to float noise).  Set ``estimate_emissions``
    to also re-estimate B (off by default: B encodes the expert error
    model).
    """
    cur = instance
    history: list[float] = []
    for _ in range(max_iter):
        post = posteriors(cur)
        history.append(post.log_likelihood)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        new_params = _m_step(cur, post, estimate_emissions)
        cur = replace(cur, params=new_params)
    return cur.params, history

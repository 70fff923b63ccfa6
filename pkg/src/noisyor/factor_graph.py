"""Max-product message passing over binary factor graphs.

Messages live in the log domain as pairs ``(score_at_0, score_at_1)`` and are
max-normalized after every update, so a finite message always has one entry
equal to 0. Negative infinity is a legal entry and encodes a hard constraint.

The engine runs a flooding schedule: every round first recomputes all
factor-to-variable messages from the previous variable-to-factor messages,
damps them, then recomputes all variable-to-factor messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


@dataclass(frozen=True)
class EnumerationFactor:
    """Factor given by an explicit list of valid configurations."""

    variables: tuple
    configs: np.ndarray
    log_potentials: np.ndarray

    def __post_init__(self):
        configs = np.asarray(self.configs, dtype=np.int8)
        log_potentials = np.asarray(self.log_potentials, dtype=np.float64)
        if configs.ndim != 2 or configs.shape[1] != len(self.variables):
            raise ValueError("configs must have one column per variable")
        if configs.shape[0] != log_potentials.shape[0]:
            raise ValueError("one log-potential per configuration is required")
        if not np.any(log_potentials > NEG_INF):
            raise ValueError("enumeration factor needs at least one valid configuration")
        object.__setattr__(self, "variables", tuple(int(v) for v in self.variables))
        object.__setattr__(self, "configs", configs)
        object.__setattr__(self, "log_potentials", log_potentials)


@dataclass(frozen=True)
class OrFactor:
    """Hard constraint ``child = OR(parents)``."""

    parents: tuple
    child: int

    def __post_init__(self):
        if len(self.parents) < 1:
            raise ValueError("an OR factor needs at least one parent")
        object.__setattr__(self, "parents", tuple(int(v) for v in self.parents))
        object.__setattr__(self, "child", int(self.child))

    @property
    def variables(self):
        return self.parents + (self.child,)


@dataclass(frozen=True)
class PairwiseFactor:
    """2x2 log-potential table indexed by ``(input_value, output_value)``."""

    input: int
    output: int
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.shape != (2, 2):
            raise ValueError("pairwise table must be 2x2")
        if not np.all(np.max(table, axis=1) > NEG_INF):
            raise ValueError("each input value needs a finite entry")
        object.__setattr__(self, "table", table)

    @property
    def variables(self):
        return (int(self.input), int(self.output))


class FactorGraph:
    """Binary variables, log-unaries and a list of factors."""

    def __init__(self, unaries, factors=()):
        unaries = np.array(unaries, dtype=np.float64).reshape(-1, 2)
        if np.any(np.isnan(unaries)) or np.any(unaries == np.inf):
            raise ValueError("unaries must be finite or -inf")
        self.unaries = unaries
        self.unaries.setflags(write=False)
        self.factors = tuple(factors)
        n = self.n_variables
        edge_factor, edge_var, offsets = [], [], [0]
        for a, factor in enumerate(self.factors):
            for v in factor.variables:
                if not 0 <= v < n:
                    raise ValueError(f"factor {a} references unknown variable {v}")
                edge_factor.append(a)
                edge_var.append(v)
            offsets.append(len(edge_var))
        self.edge_factor = np.array(edge_factor, dtype=np.int64)
        self.edge_var = np.array(edge_var, dtype=np.int64)
        self.offsets = np.array(offsets, dtype=np.int64)
        self.adjacency = [[] for _ in range(n)]
        for a, factor in enumerate(self.factors):
            for v in factor.variables:
                self.adjacency[v].append(a)

    @property
    def n_variables(self):
        return self.unaries.shape[0]

    @property
    def n_edges(self):
        return self.edge_var.shape[0]


@dataclass
class MessageState:
    """Messages indexed by flattened (factor, incident variable) edges."""

    f2v: np.ndarray
    v2f: np.ndarray
    damping: float
    iteration: int = 0
    offsets: np.ndarray = field(default=None, repr=False)

    def factor_messages(self, a):
        """Factor-to-variable messages of factor ``a``, one row per variable."""
        return self.f2v[self.offsets[a]:self.offsets[a + 1]]


def normalize(msgs):
    """Shift each pair so its max is 0; an all -inf pair becomes uniform."""
    msgs = np.asarray(msgs, dtype=np.float64)
    top = np.max(msgs, axis=-1, keepdims=True)
    dead = top == NEG_INF
    out = msgs - np.where(dead, 0.0, top)
    return np.where(dead, 0.0, out)


def diff_to_pair(d):
    """Normalized pair with log-ratio ``d = m(1) - m(0)``."""
    d = np.asarray(d, dtype=np.float64)
    return np.stack([np.minimum(0.0, -d), np.minimum(0.0, d)], axis=-1)


def pair_to_diff(msgs):
    msgs = normalize(msgs)
    return msgs[..., 1] - msgs[..., 0]


def damp(new, old, alpha):
    """Blend normalized messages as ``alpha*new + (1-alpha)*old``.

    A message holding -inf on either side (old or new) is replaced by the new
    message, so clamps switch on immediately and can also be released.
    """
    hard = np.any(np.isinf(new), axis=-1) | np.any(np.isinf(old), axis=-1)
    with np.errstate(invalid="ignore"):
        blended = alpha * new + (1.0 - alpha) * old
    return normalize(np.where(hard[..., None], new, blended))


def factor_to_var_enum(factor, incoming):
    """Max-product update of an enumeration factor, by brute force over its table."""
    incoming = normalize(incoming)
    configs = factor.configs
    n_vars = configs.shape[1]
    rows = np.arange(n_vars)
    gathered = incoming[rows[None, :], configs]  # (n_valid, n_vars)
    out = np.full((n_vars, 2), NEG_INF)
    for i in range(n_vars):
        others = np.delete(gathered, i, axis=1).sum(axis=1) + factor.log_potentials
        for c in (0, 1):
            mask = configs[:, i] == c
            if np.any(mask):
                out[i, c] = np.max(others[mask])
    return normalize(out)


def or_messages_from_diffs(parent_diffs, child_diff):
    """Linear-time OR update in log-ratio form.

    Returns ``(to_parents, to_child)`` as log-ratios. With normalized incoming
    messages the update only needs the sum of positive parts of the parent
    ratios and the two smallest parent "switch-on costs".
    """
    d = np.asarray(parent_diffs, dtype=np.float64)
    pos = np.maximum(0.0, d)
    cost = np.maximum(0.0, -d)
    n = d.shape[0]

    inf_pos = np.isinf(pos)
    n_inf = int(np.count_nonzero(inf_pos))
    finite_sum = float(np.sum(pos[~inf_pos]))
    total = np.inf if n_inf else finite_sum

    order = np.argsort(cost, kind="stable")
    min1 = cost[order[0]]
    min2 = cost[order[1]] if n > 1 else np.inf

    to_child = total - min1

    others_inf = (n_inf - inf_pos.astype(np.int64)) > 0
    pos_others = np.where(others_inf, np.inf, finite_sum - np.where(inf_pos, 0.0, pos))
    min_others = np.full(n, min1)
    min_others[order[0]] = min2

    q0 = min(0.0, -child_diff)
    q1 = min(0.0, child_diff)
    out0 = np.maximum(q0 - pos_others, q1 - min_others)
    out1 = np.full(n, q1)
    with np.errstate(invalid="ignore"):
        to_parents = out1 - out0
    to_parents = np.where((out0 == NEG_INF) & (out1 == NEG_INF), 0.0, to_parents)
    return to_parents, float(to_child)


def factor_to_var_or(factor, incoming):
    """Max-product update of a logical-OR factor in O(number of parents).

    ``incoming`` holds one message pair per factor variable in the order
    ``factor.variables`` (parents first, child last).
    """
    diffs = pair_to_diff(incoming)
    to_parents, to_child = or_messages_from_diffs(diffs[:-1], diffs[-1])
    return diff_to_pair(np.append(to_parents, to_child))


def factor_to_var_pairwise(factor, incoming):
    incoming = normalize(incoming)
    table = factor.table
    to_output = np.max(table + incoming[0][:, None], axis=0)
    to_input = np.max(table + incoming[1][None, :], axis=1)
    return normalize(np.stack([to_input, to_output]))


def _factor_update(factor, incoming):
    if isinstance(factor, OrFactor):
        return factor_to_var_or(factor, incoming)
    if isinstance(factor, PairwiseFactor):
        return factor_to_var_pairwise(factor, incoming)
    return factor_to_var_enum(factor, incoming)


def _check_clamps(graph):
    bad = np.flatnonzero(np.all(graph.unaries == NEG_INF, axis=1))
    if bad.size:
        raise ValueError(f"contradictory clamp on variables {bad.tolist()}")


def _var_to_factor(graph, f2v):
    """Exclusive sums ``unary + sum of other incoming messages``, -inf safe."""
    n = graph.n_variables
    un = graph.unaries
    f2v_inf = f2v == NEG_INF
    finite = np.where(f2v_inf, 0.0, f2v)
    fsum = np.where(un == NEG_INF, 0.0, un).copy()
    np.add.at(fsum, graph.edge_var, finite)
    ninf = (un == NEG_INF).astype(np.int64)
    np.add.at(ninf, graph.edge_var, f2v_inf.astype(np.int64))
    ev = graph.edge_var
    excl_inf = ninf[ev] - f2v_inf.astype(np.int64)
    out = np.where(excl_inf > 0, NEG_INF, fsum[ev] - finite)
    return normalize(out)


def init_messages(graph, damping=0.5):
    f2v = np.zeros((graph.n_edges, 2))
    v2f = normalize(graph.unaries[graph.edge_var]) if graph.n_edges else np.zeros((0, 2))
    return MessageState(f2v=f2v, v2f=v2f, damping=damping, offsets=graph.offsets)


def step(graph, state):
    """One damped flooding round; returns a new MessageState."""
    new_f2v = np.empty_like(state.f2v)
    for a, factor in enumerate(graph.factors):
        lo, hi = graph.offsets[a], graph.offsets[a + 1]
        new_f2v[lo:hi] = _factor_update(factor, state.v2f[lo:hi])
    f2v = damp(new_f2v, state.f2v, state.damping)
    v2f = _var_to_factor(graph, f2v)
    return MessageState(f2v=f2v, v2f=v2f, damping=state.damping,
                        iteration=state.iteration + 1, offsets=graph.offsets)


def run_max_product(graph, n_iters=100, damping=0.5, state=None):
    """Run ``n_iters`` damped flooding rounds of max-product.

    ``damping`` is the weight of the new message; 1.0 disables damping.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    _check_clamps(graph)
    if state is None:
        state = init_messages(graph, damping)
    else:
        state = MessageState(f2v=state.f2v, v2f=state.v2f, damping=damping,
                             iteration=state.iteration, offsets=graph.offsets)
    for _ in range(n_iters):
        state = step(graph, state)
    return state


def beliefs(graph, state=None):
    """Unary plus all incoming factor messages, per variable (-inf safe)."""
    out = graph.unaries.copy()
    if state is not None and graph.n_edges:
        np.add.at(out, graph.edge_var, state.f2v)
    return out


def decode(graph, state=None):
    """Per-variable argmax of the beliefs; ties go to state 0."""
    b = beliefs(graph, state)
    with np.errstate(invalid="ignore"):
        z = (b[:, 1] > b[:, 0]).astype(np.int8)
    z[graph.unaries[:, 0] == NEG_INF] = 1
    z[graph.unaries[:, 1] == NEG_INF] = 0
    return z


def score(graph, assignment):
    """Sum of unary and factor log-potentials at ``assignment`` (i.e. -energy)."""
    z = np.asarray(assignment, dtype=np.int64)
    if z.shape != (graph.n_variables,):
        raise ValueError("assignment length must equal the number of variables")
    total = float(np.sum(graph.unaries[np.arange(graph.n_variables), z]))
    for factor in graph.factors:
        if isinstance(factor, OrFactor):
            ok = z[factor.child] == int(np.any(z[list(factor.parents)]))
            total += 0.0 if ok else NEG_INF
        elif isinstance(factor, PairwiseFactor):
            total += factor.table[z[factor.input], z[factor.output]]
        else:
            local = z[list(factor.variables)]
            hits = np.flatnonzero(np.all(factor.configs == local, axis=1))
            total += factor.log_potentials[hits[0]] if hits.size else NEG_INF
    return total

"""Layer shrinking: similarity-driven neuron removal and SVD compression.

A layer's incoming weights are viewed as one stacked matrix U whose
column j collects everything feeding neuron j (gate inputs, recurrence
and bias rows included); the outgoing weights form the row-stacked
matrix V.  Removing neuron j deletes column j of U and row j of V; the
loss is compensated by adding ``lambda_k * V[j]`` to every remaining
outgoing row, with the mixing weights lambda solved by least squares
either from incoming weights (data-free) or from recorded activities
(data-bound).  Setting lambda to a unit vector recovers the
add-to-most-similar-neuron baseline.

Linear layers are shrunk differently: the product X = U V is replaced
by its best rank-r factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ols_min_norm, truncated_svd
from .network import ACT_LINEAR, KIND_DENSE, Connection, Network
from .unfold import LayerRole, layer_role, size_factor

METHOD_DATAFREE = "datafree"
METHOD_DATABOUND = "databound"
METHOD_SRINIVAS_BABU = "srinivasbabu"
METHOD_SVD = "svd"
METHODS = (METHOD_SVD, METHOD_DATAFREE, METHOD_DATABOUND, METHOD_SRINIVAS_BABU)

# above this many temporary elements, pair distances go through the Gram
# matrix instead of broadcasting the full difference tensor
_BROADCAST_LIMIT = 30_000_000


@dataclass
class RemovalRecord:
    method: str
    layer: int
    j: int
    i: int
    criterion: float
    residual: float


@dataclass
class ShrinkReport:
    """Replayable log of one shrink stage (one method applied to one layer)."""

    method: str
    layer: int
    removals: list[RemovalRecord]
    size_before: int
    size_after: int
    size_factor_before: float
    size_factor_after: float

    def to_json_obj(self) -> dict:
        return {
            "method": self.method,
            "layer": self.layer,
            "removals": [
                {"j": r.j, "i": r.i, "criterion": r.criterion, "residual": r.residual}
                for r in self.removals
            ],
            "size_before": self.size_before,
            "size_after": self.size_after,
            "size_factor_before": self.size_factor_before,
            "size_factor_after": self.size_factor_after,
        }


@dataclass
class ActivityMatrix:
    """samples x neurons record of a layer's activities."""

    a: np.ndarray
    layer: int
    collected_over: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.a.ndim != 2 or self.a.shape[0] < 1:
            raise ValueError("activity matrix needs at least one sample row")

    def drop_column(self, j: int) -> None:
        self.a = np.delete(self.a, j, axis=1)


# -- stacked weight bundles ----------------------------------------------


def incoming_matrix(net: Network, d: int) -> np.ndarray:
    """Stacked incoming weights of layer d; column j belongs to neuron j."""
    blocks = [c.weights for c in net.incoming(d)]
    if not blocks:
        raise ValueError(f"layer {d} has no incoming connections")
    return np.vstack(blocks)

def outgoing_matrix(net: Network, d: int) -> np.ndarray:
    """Stacked outgoing weights of layer d; row j belongs to neuron j."""
    blocks = [c.weights for c in net.outgoing(d)]
    if not blocks:
        raise ValueError(f"layer {d} has no outgoing connections")
    return np.hstack(blocks)


def _bundle_slices(conns: list[Connection], axis: int) -> list[tuple[Connection, slice]]:
    out = []
    pos = 0
    for c in conns:
        extent = c.weights.shape[axis]
        out.append((c, slice(pos, pos + extent)))
        pos += extent
    return out


# -- selection criteria ----------------------------------------------------


def _pair_sq_distances(X: np.ndarray) -> np.ndarray:
    """d2[i, j] = ||X[:, i] - X[:, j]||^2 for all column pairs."""
    n, m = X.shape
    if n * m * m <= _BROADCAST_LIMIT:
        diff = X[:, :, None] - X[:, None, :]
        return np.sum(diff * diff, axis=0)
    gram = X.T @ X
    sq = np.diag(gram)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)


def _select(d2: np.ndarray, out_sq: np.ndarray) -> tuple[int, int, float]:
    m = d2.shape[0]
    crit = d2 * out_sq[None, :]
    np.fill_diagonal(crit, np.inf)
    flat = int(np.argmin(crit))  # first occurrence: smallest i, then smallest j
    i, j = divmod(flat, m)
    return i, j, float(crit[i, j])


def datafree_select(U, V) -> tuple[int, int, float]:
    """Pair (i, j) minimizing ||U[:,i]-U[:,j]||^2 * ||V[j]||^2; j is removed.

    Ties resolve to the first pair in (i, j) scan order.  Also returns
    the criterion value.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    m = U.shape[1]
    if m < 2:
        raise ValueError("selection needs at least two neurons")
    if V.shape[0] != m:
        raise ValueError(f"U has {m} columns but V has {V.shape[0]} rows")
    return _select(_pair_sq_distances(U), np.sum(V * V, axis=1))


def databound_select(A) -> tuple[int, int, float]:
    """Pair (i, j) minimizing ||A[:,i]-A[:,j]||^2 * ||A[:,j]||^2 on activities."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("activity matrix needs at least one sample row")
    if A.shape[1] < 2:
        raise ValueError("selection needs at least two neurons")
    return _select(_pair_sq_distances(A), np.sum(A * A, axis=0))


# -- compensation ---------------------------------------------------------


def datafree_lambda(U, j: int) -> tuple[np.ndarray, float]:
    """Mixing weights reproducing incoming column j from the other columns."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[1] < 2:
        raise ValueError("need at least two neurons")
    return ols_min_norm(np.delete(U, j, axis=1), U[:, j])


def databound_lambda(A, j: int, sample_cap: int = 50_000, rng=None) -> tuple[np.ndarray, float]:
    """Mixing weights reproducing activity column j from the other columns.

    Rows beyond sample_cap are reduced to a uniform random sample to
    keep the least-squares solve tractable.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape[1] < 2:
        raise ValueError("need at least two neurons")
    if A.shape[0] > sample_cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        rows = np.sort(rng.choice(A.shape[0], size=sample_cap, replace=False))
        A = A[rows]
    return ols_min_norm(np.delete(A, j, axis=1), A[:, j])


def srinivasbabu_lambda(U, i: int, j: int) -> tuple[np.ndarray, float]:
    """Baseline: route the removed neuron's output entirely through neuron i."""
    U = np.asarray(U, dtype=np.float64)
    m = U.shape[1]
    if m < 2:
        raise ValueError("need at least two neurons")
    lam = np.zeros(m - 1)
    lam[i if i < j else i - 1] = 1.0
    return lam, float(np.linalg.norm(U[:, i] - U[:, j]))


def apply_removal(U, V, j: int, lam) -> tuple[np.ndarray, np.ndarray]:
    """Delete neuron j from stacked (U, V), folding lam * V[j] into V."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    m = U.shape[1]
    if V.shape[0] != m:
        raise ValueError(f"U has {m} columns but V has {V.shape[0]} rows")
    if lam.shape != (m - 1,):
        raise ValueError(f"lambda must have length {m - 1}, got {lam.shape}")
    full = np.insert(lam, j, 0.0)
    compensated = V + np.outer(full, V[j])
    return np.delete(U, j, axis=1), np.delete(compensated, j, axis=0)


def remove_neuron(net: Network, d: int, j: int, lam) -> None:
    """Remove neuron j of layer d in place, compensating outgoing weights.

    Every outgoing block (recurrence and attention energy included)
    receives the lambda-weighted copy of its j-th row before the row is
    deleted; every incoming block loses column j.  Recurrent matrices
    therefore lose both row and column j.
    """
    m = net.layer(d).size
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (m - 1,):
        raise ValueError(f"lambda must have length {m - 1}, got {lam.shape}")
    full = np.insert(lam, j, 0.0)
    for c in net.outgoing(d):
        c.weights = np.delete(c.weights + np.outer(full, c.weights[j]), j, axis=0)
    for c in net.incoming(d):
        c.weights = np.delete(c.weights, j, axis=1)
    net.layer(d).size = m - 1


# -- layer-level shrinking -------------------------------------------------


def _factor(net: Network, reference: Network | None) -> float:
    return size_factor(net, reference) if reference is not None else 1.0


def shrink_layer_datafree(
    net: Network,
    d: int,
    target: int,
    method: str = METHOD_DATAFREE,
    reference: Network | None = None,
) -> tuple[Network, ShrinkReport]:
    """Remove neurons from layer d until it has ``target`` left.

    method selects the compensation rule: least-squares mixing
    (datafree) or the unit-vector baseline (srinivasbabu).  The
    selection criterion is re-evaluated after every removal.
    """
    if method not in (METHOD_DATAFREE, METHOD_SRINIVAS_BABU):
        raise ValueError(f"unsupported method {method!r}")
    if layer_role(d, net.output_id) is not LayerRole.INNER:
        raise ValueError(f"layer {d} is not an inner layer")
    size_before = net.layer(d).size
    if not 1 <= target < size_before:
        raise ValueError(f"target {target} must be in [1, {size_before - 1}]")
    reference = reference if reference is not None else net
    factor_before = _factor(net, reference)
    net = net.copy()
    removals = []
    while net.layer(d).size > target:
        U = incoming_matrix(net, d)
        V = outgoing_matrix(net, d)
        i, j, crit = datafree_select(U, V)
        if method == METHOD_DATAFREE:
            lam, residual = datafree_lambda(U, j)
        else:
            lam, residual = srinivasbabu_lambda(U, i, j)
        remove_neuron(net, d, j, lam)
        removals.append(RemovalRecord(method, d, j, i, crit, residual))
    net.validate()
    report = ShrinkReport(
        method=method,
        layer=d,
        removals=removals,
        size_before=size_before,
        size_after=target,
        size_factor_before=factor_before,
        size_factor_after=_factor(net, reference),
    )
    return net, report


def svd_max_rank(net: Network, d: int) -> int:
    """Largest admissible SVD target for layer d: min(stacked in-rows, out-cols)."""
    rows = sum(c.weights.shape[0] for c in net.incoming(d))
    cols = sum(c.weights.shape[1] for c in net.outgoing(d))
    return min(rows, cols)


def shrink_layer_svd(
    net: Network, d: int, target: int, reference: Network | None = None
) -> tuple[Network, ShrinkReport]:
    """Resize a linear layer to ``target`` via truncated SVD of U V.

    Incoming bias rows take part in the factored product, so affine
    behavior is preserved; the replacement incoming blocks are the
    corresponding row slices of Y and the outgoing blocks the column
    slices of Z.
    """
    spec = net.layer(d)
    if spec.kind != KIND_DENSE or spec.activation != ACT_LINEAR:
        raise ValueError(f"layer {d} is not a Dense layer with Linear activation")
    reference = reference if reference is not None else net
    factor_before = _factor(net, reference)
    size_before = spec.size
    net = net.copy()
    in_conns = net.incoming(d)
    out_conns = net.outgoing(d)
    U = np.vstack([c.weights for c in in_conns])
    V = np.hstack([c.weights for c in out_conns])
    Y, Z = truncated_svd(U @ V, target)
    for c, rows in _bundle_slices(in_conns, axis=0):
        c.weights = Y[rows].copy()
    for c, cols in _bundle_slices(out_conns, axis=1):
        c.weights = Z[:, cols].copy()
    net.layer(d).size = target
    net.validate()
    report = ShrinkReport(
        method=METHOD_SVD,
        layer=d,
        removals=[],
        size_before=size_before,
        size_after=target,
        size_factor_before=factor_before,
        size_factor_after=_factor(net, reference),
    )
    return net, report


def replay_report(net: Network, report: ShrinkReport) -> Network:
    """Re-apply a removal report to a network (determinism check helper)."""
    net = net.copy()
    for r in report.removals:
        U = incoming_matrix(net, r.layer)
        if r.method == METHOD_DATAFREE:
            lam, _ = datafree_lambda(U, r.j)
        elif r.method == METHOD_SRINIVAS_BABU:
            lam, _ = srinivasbabu_lambda(U, r.i, r.j)
        else:
            raise ValueError(f"cannot replay method {r.method!r}")
        remove_neuron(net, r.layer, r.j, lam)
    return net


# -- output divergence ------------------------------------------------------


@dataclass
class DivergenceStats:
    max_abs_prob_diff: float
    mean_abs_prob_diff: float
    max_abs_logit_diff: float
    argmax_agreement: float
    steps: int = 0


def _mean_outputs(nets: list[Network], x, targets=None):
    from .network import forward

    probs, logits = zip(*(forward(net, x, targets=targets) for net in nets))
    return np.mean(probs, axis=0), np.mean(logits, axis=0)


def divergence(reference, candidate: Network, inputs, max_len: int = 64) -> DivergenceStats:
    """Output difference between a reference (network or ensemble) and a candidate.

    For sequence-to-sequence networks the comparison is run along the
    reference's decoded path: both sides are forced through the same
    token prefix so their per-step distributions are comparable.
    """
    from .network import ARCH_ENCDEC, EOS, ensemble_decode, forward, greedy_decode, topology_diff

    refs = list(reference) if isinstance(reference, (list, tuple)) else [reference]
    for net in refs:
        diff = topology_diff(net, refs[0])
        if diff is not None:
            raise ValueError(f"reference ensemble mismatch: {diff}")
    if refs[0].arch != candidate.arch or refs[0].vocab_size != candidate.vocab_size:
        raise ValueError("reference and candidate have incompatible input/output spaces")

    prob_diffs = []
    logit_diffs = []
    agree = 0
    steps = 0
    if refs[0].arch == ARCH_ENCDEC:
        for src in inputs:
            if len(refs) == 1:
                tokens, _ = greedy_decode(refs[0], src, max_len)
            else:
                tokens, _ = ensemble_decode(refs, src, max_len)
            path = np.array(tokens + [EOS], dtype=np.int64)
            ref_p, ref_z = _mean_outputs(refs, np.asarray(src), targets=path)
            cand_p, cand_z = forward(candidate, np.asarray(src), targets=path)
            prob_diffs.append(np.abs(ref_p - cand_p))
            logit_diffs.append(np.abs(ref_z - cand_z))
            agree += int(np.sum(np.argmax(ref_p, axis=-1) == np.argmax(cand_p, axis=-1)))
            steps += len(path)
    else:
        x = np.asarray(inputs)
        ref_p, ref_z = _mean_outputs(refs, x)
        cand_p, cand_z = forward(candidate, x)
        prob_diffs.append(np.abs(ref_p - cand_p))
        logit_diffs.append(np.abs(ref_z - cand_z))
        agree += int(np.sum(np.argmax(ref_p, axis=-1) == np.argmax(cand_p, axis=-1)))
        steps += x.shape[0]

    all_prob = np.concatenate([d.ravel() for d in prob_diffs])
    all_logit = np.concatenate([d.ravel() for d in logit_diffs])
    return DivergenceStats(
        max_abs_prob_diff=float(all_prob.max()),
        mean_abs_prob_diff=float(all_prob.mean()),
        max_abs_logit_diff=float(all_logit.max()),
        argmax_agreement=agree / steps if steps else 1.0,
        steps=steps,
    )

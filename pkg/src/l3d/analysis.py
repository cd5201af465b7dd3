"""Working with a learned basis: interventions, impacts, matching and
coefficient recovery."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .decomposition import project_batch
from .errors import ConfigError, ShapeError
from .models import batch_grad_divergence, jvp_in_direction, predict
from .numkit import ParamSet, uniform

DEFAULT_DELTAS = np.linspace(-1.0, 1.0, 21)


def _check_basis(spec, basis):
    shapes = spec.param_shapes()
    if basis.shapes != {n: tuple(s) for n, s in shapes.items()}:
        raise ShapeError(f"basis tensors {basis.shapes} do not match model tensors {shapes}")


def _check_k(basis, k):
    if not 0 <= int(k) < basis.n_v:
        raise ConfigError(f"subnetwork index {k} out of range for n_v={basis.n_v}")
    return int(k)


def _shifted(params, basis, steps):
    """``params + sum(delta * out_direction_k)`` for ``steps = [(k, delta), ...]``."""
    flat = params.flatten()
    dense = basis.dense("out")
    for k, delta in steps:
        flat = flat + float(delta) * dense[k]
    return ParamSet.unflatten(flat, basis.shapes)


# ---------------------------------------------------------------------------
# interventions


@dataclass
class InterventionResult:
    """Output changes ``f(X, W0 + sum delta_i v_i) - f(X, W0)``.

    For a single subnetwork ``changes`` is ``(n_delta, n_s, n_o)``; for a pair
    it is ``(n_delta, n_delta, n_s, n_o)`` with the first subnetwork's delta
    on axis 0.
    """

    deltas: np.ndarray
    changes: np.ndarray
    subnetworks: tuple

    def mean_abs_change(self):
        """Mean over samples of |change| per delta (grid) and output index."""
        return np.mean(np.abs(self.changes), axis=-2)


def intervene(spec, params, basis, k, delta, X):
    """Model outputs with the parameters moved by ``delta`` along subnetwork ``k``."""
    _check_basis(spec, basis)
    k = _check_k(basis, k)
    return predict(spec, _shifted(params, basis, [(k, delta)]), X)


def intervention_sweep(spec, params, basis, deltas, X, subnetworks=None, pairs=()):
    """Single-subnetwork sweeps for ``subnetworks`` (default all) and full
    delta-grid sweeps for each ``(k0, k1)`` in ``pairs``."""
    _check_basis(spec, basis)
    deltas = np.asarray(deltas, dtype=np.float64).ravel()
    if deltas.size == 0:
        raise ConfigError("delta grid is empty")
    if subnetworks is None:
        subnetworks = range(basis.n_v)
    base = predict(spec, params, X)
    results = []
    for k in subnetworks:
        k = _check_k(basis, k)
        ch = np.stack([predict(spec, _shifted(params, basis, [(k, d)]), X) - base for d in deltas])
        results.append(InterventionResult(deltas, ch, (k,)))
    for k0, k1 in pairs:
        k0, k1 = _check_k(basis, k0), _check_k(basis, k1)
        ch = np.stack([
            np.stack([predict(spec, _shifted(params, basis, [(k0, d0), (k1, d1)]), X) - base for d1 in deltas])
            for d0 in deltas
        ])
        results.append(InterventionResult(deltas, ch, (k0, k1)))
    return results


def most_affected_outputs(spec, params, basis, x, k, top_n=None):
    """Output indices ranked by |d f(x) / d delta| along subnetwork ``k``."""
    _check_basis(spec, basis)
    k = _check_k(basis, k)
    v = basis.dense("out")[k]
    if not np.any(v):
        raise ShapeError(f"subnetwork {k} has a zero out direction")
    d = np.abs(jvp_in_direction(spec, params, np.asarray(x, dtype=np.float64), v))
    if d.ndim == 2:
        d = d.mean(axis=0)
    order = np.argsort(-d, kind="stable")
    return order if top_n is None else order[:top_n]


def selectivity(result, matched_outputs, magnitude=0.3):
    """Ratio of mean |change| on ``matched_outputs`` to the mean over the rest,
    averaged over the deltas with |delta| == magnitude."""
    sel = np.isclose(np.abs(result.deltas), magnitude)
    if not sel.any():
        raise ConfigError(f"no delta of magnitude {magnitude} in the sweep")
    per_output = result.mean_abs_change()[sel].mean(axis=0)
    on = np.zeros(per_output.shape[0], dtype=bool)
    on[np.asarray(matched_outputs)] = True
    off = per_output[~on].mean()
    return float(per_output[on].mean() / off) if off > 0 else np.inf


# ---------------------------------------------------------------------------
# impact


@dataclass
class ImpactTable:
    values: np.ndarray  # (n_samples, n_v), all >= 0
    n_refs: int


def impact(spec, params, basis, x, y_ref, div="mse"):
    """|coefficients| of the divergence gradient at ``x`` against ``y_ref``."""
    x = np.asarray(x, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if x.shape != (spec.n_in,) or y_ref.shape != (spec.n_out,):
        raise ShapeError(f"impact expects x of length {spec.n_in} and y_ref of length {spec.n_out}")
    return mean_impact(spec, params, basis, x, y_ref[None], div)


def mean_impact(spec, params, basis, x, refs, div="mse"):
    """Impact of each subnetwork on ``x`` averaged over reference outputs."""
    _check_basis(spec, basis)
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if refs.shape[0] == 0:
        raise ConfigError("mean_impact needs at least one reference output")
    X = np.repeat(np.asarray(x, dtype=np.float64)[None], refs.shape[0], axis=0)
    G = batch_grad_divergence(spec, params, X, refs, div)
    return np.abs(project_batch(basis, G)).mean(axis=0)


def impact_table(spec, params, basis, X, n_refs, rng, div="mse", ref_pool=None):
    """Mean impacts for every row of ``X``; references are outputs of
    ``n_refs`` rows drawn (without replacement) from ``ref_pool`` (default ``X``)."""
    _check_basis(spec, basis)
    X = np.asarray(X, dtype=np.float64)
    pool = predict(spec, params, X if ref_pool is None else ref_pool)
    if n_refs < 1 or n_refs > pool.shape[0]:
        raise ConfigError(f"n_refs must lie in [1, {pool.shape[0]}]")
    din = basis.dense("in")
    vals = np.empty((X.shape[0], basis.n_v))
    for i in range(X.shape[0]):
        idx = rng.permutation(pool.shape[0])[:n_refs]
        Xi = np.repeat(X[i : i + 1], n_refs, axis=0)
        G = batch_grad_divergence(spec, params, Xi, pool[idx], div)
        vals[i] = np.abs(G @ din.T).mean(axis=0)
    return ImpactTable(vals, int(n_refs))


def top_samples(spec, params, basis, X, n_refs, top_n, rng, div="mse"):
    """``(n_v, top_n)`` sample indices ranked by mean impact (ties by index)."""
    table = impact_table(spec, params, basis, X, n_refs, rng, div)
    order = np.argsort(-table.values, axis=0, kind="stable")
    return order[:top_n].T, table


def group_scores(spec, params, basis, task, rng, n_per_group=100, n_refs=10, div="mse"):
    """``(n_v, n_groups)`` mean impact on inputs where exactly one feature group is active.

    References are outputs of ordinary samples from the task distribution.
    """
    scores = np.empty((basis.n_v, task.n_groups))
    ref_pool = task.sample_inputs(rng.child("refs"), max(1000, n_refs))
    for g, cols in enumerate(task.groups()):
        X = np.zeros((n_per_group, task.n_in))
        X[:, cols] = uniform(rng.child(f"group-{g}"), task.lo, task.hi, (n_per_group, cols.size))
        table = impact_table(spec, params, basis, X, n_refs, rng.child(f"pick-{g}"), div, ref_pool)
        scores[:, g] = table.values.mean(axis=0)
    return scores


# ---------------------------------------------------------------------------
# matching


@dataclass
class Assignment:
    """``mapping[k]`` is the feature index of subnetwork ``k`` or None (dead or unmatched)."""

    mapping: dict
    scores: np.ndarray
    dead: frozenset = field(default_factory=frozenset)

    @property
    def total(self):
        return float(sum(self.scores[k, j] for k, j in self.mapping.items() if j is not None))

    def pairs(self):
        return [(k, j) for k, j in sorted(self.mapping.items()) if j is not None]

    def feature_to_subnetwork(self):
        return {j: k for k, j in self.pairs()}


def match_subnetworks(scores, floor=0.0, dead=()):
    """Maximum-total-score injective matching of subnetworks (rows) to features.

    Rows listed in ``dead`` or whose scores are all ``<= floor`` never match.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("score matrix must be 2-D")
    dead = set(int(k) for k in dead) | {k for k in range(scores.shape[0]) if np.all(scores[k] <= floor)}
    live = [k for k in range(scores.shape[0]) if k not in dead]
    mapping = {k: None for k in range(scores.shape[0])}
    if live:
        rows, cols = linear_sum_assignment(scores[live], maximize=True)
        for r, c in zip(rows, cols):
            mapping[live[r]] = int(c)
    return Assignment(mapping, scores, frozenset(dead))


def brute_force_match(scores):
    """Best total score over all injective assignments, by enumeration."""
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    best = -np.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = max(best, scores[np.arange(n), cols].sum())
    else:
        for rows in itertools.permutations(range(n), m):
            best = max(best, scores[rows, np.arange(m)].sum())
    return float(best)


def mutual_best(scores, rows=None):
    """Pairs ``(k, j)`` where ``j`` is row ``k``'s best column and ``k`` is
    column ``j``'s best row (restricted to ``rows`` if given)."""
    scores = np.asarray(scores, dtype=np.float64)
    rows = np.arange(scores.shape[0]) if rows is None else np.asarray(sorted(rows))
    sub = scores[rows]
    out = []
    for j in range(scores.shape[1]):
        r = int(np.argmax(sub[:, j]))
        if int(np.argmax(sub[r])) == j:
            out.append((int(rows[r]), j))
    return out


# ---------------------------------------------------------------------------
# single-hidden-layer diagnostics


def _encoder_decoder(spec, basis, k):
    if spec.n_layers != 2:
        raise ShapeError("this analysis needs a single-hidden-layer model")
    d = basis.direction(k)
    enc = d["layer0.weight"]
    return enc, (enc.T if spec.tied else d["layer1.weight"])


def column_energy(spec, basis):
    """``(n_v, n_in)`` share of each subnetwork's encoder norm carried by each input column."""
    out = np.empty((basis.n_v, spec.n_in))
    for k in range(basis.n_v):
        enc, _ = _encoder_decoder(spec, basis, k)
        e = np.sum(enc * enc, axis=0)
        out[k] = e / e.sum() if e.sum() > 0 else 0.0
    return out


def cosine_alignment(spec, params, basis):
    """``(n_v, n_in)`` |cos| between subnetwork encoder column j and the model's embedding column j."""
    W = params["layer0.weight"]
    wn = np.linalg.norm(W, axis=0)
    if np.any(wn == 0):
        raise ShapeError(f"model embedding column {int(np.argmin(wn))} is zero")
    out = np.empty((basis.n_v, spec.n_in))
    for k in range(basis.n_v):
        enc, _ = _encoder_decoder(spec, basis, k)
        en = np.linalg.norm(enc, axis=0)
        if np.any(en == 0):
            raise ShapeError(f"subnetwork {k} has a zero encoder column {int(np.argmin(en))}")
        out[k] = np.abs(np.sum(enc * W, axis=0)) / (en * wn)
    return out


def extract_coefficients(spec, basis):
    """Per subnetwork ``k``: the dominant input ``j*`` and the traced path
    weights ``dec_k @ enc_k[:, j*]``, an estimate of ``A[:, j*]`` up to scale.

    Returns ``(a_hat (n_v, n_out), j_star (n_v,))``.
    """
    if spec.n_layers != 2 or spec.n_in != spec.n_out:
        raise ShapeError("coefficient extraction needs an n -> h -> n single-hidden-layer model")
    a_hat = np.empty((basis.n_v, spec.n_out))
    j_star = np.empty(basis.n_v, dtype=np.int64)
    for k in range(basis.n_v):
        enc, dec = _encoder_decoder(spec, basis, k)
        j = int(np.argmax(np.linalg.norm(enc, axis=0)))
        j_star[k] = j
        a_hat[k] = dec @ enc[:, j]
    return a_hat, j_star


def coefficient_r2(A, a_hat, j_star):
    """Pearson r^2 between scale-adjusted estimates and ``A[:, j*]``.

    Each subnetwork gets one least-squares scale before pooling.
    """
    A = np.asarray(A, dtype=np.float64)
    est, true = [], []
    for k, j in enumerate(j_star):
        a, t = a_hat[k], A[:, j]
        aa = a @ a
        s = (a @ t) / aa if aa > 0 else 0.0
        est.append(s * a)
        true.append(t)
    est, true = np.concatenate(est), np.concatenate(true)
    r = np.corrcoef(est, true)[0, 1]
    return float(r * r)

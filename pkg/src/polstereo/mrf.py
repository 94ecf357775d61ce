"""Joint normal disambiguation and diffuse/specular labelling.

Each foreground pixel is a variable with six states (two diffuse and four
specular candidate normals).  The energy combines a guide-normal unary, a
label-smoothness pairwise term over 4-neighbours and a ternary curl term
over (u, u + x, u + y) triplets.  It is minimised with synchronous damped
min-sum loopy belief propagation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import VectorMap
from .polarisation import CANDIDATE_KINDS, CandidateField

log = logging.getLogger(__name__)

N_STATES = 6
BIG = 1e6
EPS_Z = 1e-3
DEFAULT_SATURATION = 0.98


@dataclass
class MRFWeights:
    """Energy weights.

    ``unary_mode`` selects how the initial-mask disagreement factor ``k``
    enters the unary: ``"penalise"`` divides the cost by ``k`` (``k < 1``
    makes disagreeing candidates more expensive), ``"literal"`` multiplies
    by ``k``.
    """

    k: float = 0.1
    w_pair: float = 1.0
    w_tern: float = 1.0
    unary_mode: str = "penalise"

    def __post_init__(self) -> None:
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.w_pair < 0 or self.w_tern < 0:
            raise ValueError("weights must be non-negative")
        if self.unary_mode not in ("penalise", "literal"):
            raise ValueError(f"unknown unary mode {self.unary_mode!r}")


@dataclass
class BPConfig:
    iters: int = 50
    damping: float = 0.5
    tol: float = 1e-9

    def __post_init__(self) -> None:
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")


def initial_specular_mask(iun: np.ndarray, sat_threshold: float = DEFAULT_SATURATION, full_range: float = 1.0):
    """Pixels at or above ``sat_threshold`` of the intensity range."""
    return np.asarray(iun) >= sat_threshold * full_range


def unary_cost(n, guide, L0, kind, k: float = 0.1, mode: str = "penalise"):
    """``exp(-n . guide)``, scaled by ``k`` where ``kind`` disagrees with ``L0``."""
    f = np.exp(-np.sum(np.asarray(n) * np.asarray(guide), axis=-1))
    disagree = np.asarray(kind) != np.asarray(L0)
    scale = k if mode == "literal" else 1.0 / k
    return np.where(disagree, scale * f, f)


def pairwise_cost(La, Lb):
    return np.abs(np.asarray(La, dtype=np.int64) - np.asarray(Lb, dtype=np.int64)).astype(np.float64)


def gradients(n, eps: float = EPS_Z):
    """Surface gradients ``p = -n_x / n_z``, ``q = -n_y / n_z`` with ``n_z >= eps``."""
    n = np.asarray(n, dtype=np.float64)
    nz = np.maximum(n[..., 2], eps)
    return -n[..., 0] / nz, -n[..., 1] / nz


def ternary_cost(nu, nv, nw, eps: float = EPS_Z):
    """Discrete curl ``|(p(w) - p(u)) - (q(v) - q(u))|`` for ``v = u + x``, ``w = u + y``."""
    pu, qu = gradients(nu, eps)
    _, qv = gradients(nv, eps)
    pw, _ = gradients(nw, eps)
    return np.abs((pw - pu) - (qv - qu))


@dataclass
class FactorGraph:
    shape: tuple[int, int]
    index: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    normals: np.ndarray
    unary: np.ndarray
    pair_vars: np.ndarray
    pair_tables: np.ndarray
    tern_vars: np.ndarray
    tern_tables: np.ndarray
    kinds: np.ndarray = field(default_factory=lambda: CANDIDATE_KINDS.copy())

    @property
    def n_vars(self) -> int:
        return int(self.unary.shape[0])

    def energy(self, labels: np.ndarray) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        e = self.unary[np.arange(self.n_vars), labels].sum()
        if len(self.pair_vars):
            a, b = labels[self.pair_vars[:, 0]], labels[self.pair_vars[:, 1]]
            e += self.pair_tables[np.arange(len(a)), a, b].sum()
        if len(self.tern_vars):
            t = labels[self.tern_vars]
            e += self.tern_tables[np.arange(len(t)), t[:, 0], t[:, 1], t[:, 2]].sum()
        return float(e)

    def to_map(self, values: np.ndarray, fill=-1) -> np.ndarray:
        out = np.full(self.shape + np.shape(values)[1:], fill, dtype=np.asarray(values).dtype)
        out[self.ys, self.xs] = values
        return out


def build_graph(
    cands: CandidateField,
    guide: VectorMap,
    L0: np.ndarray,
    mask: np.ndarray,
    weights: MRFWeights | None = None,
) -> FactorGraph:
    """Assemble unary, pairwise and ternary tables over the foreground ``mask``.

    Pixels without valid candidates (low polarisation) receive two
    pseudo-candidates equal to the guide normal, of the kind given by
    ``L0``, with unary ``exp(-1)``; all other slots cost ``BIG``.
    """
    w = weights or MRFWeights()
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no foreground pixels")
    H, W = mask.shape
    index = np.full((H, W), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    V = ys.size
    index[ys, xs] = np.arange(V)

    kinds = CANDIDATE_KINDS.astype(np.int64)
    normals = cands.normals[ys, xs].copy()
    valid = cands.valid[ys, xs]
    g = guide.data[ys, xs]
    g_ok = guide.mask[ys, xs]
    L0v = np.asarray(L0, dtype=bool)[ys, xs].astype(np.int64)

    unary = unary_cost(normals, g[:, None, :], L0v[:, None], kinds[None, :], w.k, w.unary_mode)
    unary[~g_ok] = 1.0

    pseudo = ~valid.any(axis=1)
    fallback = np.where(g_ok[:, None], g, np.array([0.0, 0.0, 1.0]))
    missing = ~valid
    normals[missing] = np.broadcast_to(fallback[:, None, :], normals.shape)[missing]
    unary[missing] = BIG
    if pseudo.any():
        p = np.nonzero(pseudo)[0]
        first = np.where(L0v[p] == 1, 2, 0)
        for off in (0, 1):
            unary[p, first + off] = np.exp(-1.0)

    # pairwise over right and down neighbours
    pair_list = []
    for dy, dx in ((0, 1), (1, 0)):
        a = index[: H - dy, : W - dx]
        b = index[dy:, dx:]
        ok = (a >= 0) & (b >= 0)
        pair_list.append(np.stack([a[ok], b[ok]], axis=1))
    pair_vars = np.concatenate(pair_list, axis=0)
    pair_vars = pair_vars[np.lexsort((pair_vars[:, 1], pair_vars[:, 0]))]
    ptab = w.w_pair * pairwise_cost(kinds[:, None], kinds[None, :])
    pair_tables = np.broadcast_to(ptab, (len(pair_vars), N_STATES, N_STATES)).copy()

    # ternary over (u, u + x, u + y)
    u = index[: H - 1, : W - 1]
    v = index[: H - 1, 1:]
    wv = index[1:, : W - 1]
    ok = (u >= 0) & (v >= 0) & (wv >= 0)
    tern_vars = np.stack([u[ok], v[ok], wv[ok]], axis=1)
    tern_vars = tern_vars[np.argsort(tern_vars[:, 0], kind="stable")]
    nu = normals[tern_vars[:, 0]][:, :, None, None, :]
    nv = normals[tern_vars[:, 1]][:, None, :, None, :]
    nw = normals[tern_vars[:, 2]][:, None, None, :, :]
    tern_tables = w.w_tern * ternary_cost(nu, nv, nw)

    return FactorGraph(
        shape=(H, W),
        index=index,
        ys=ys,
        xs=xs,
        normals=normals,
        unary=unary,
        pair_vars=pair_vars.astype(np.int64),
        pair_tables=pair_tables,
        tern_vars=tern_vars.astype(np.int64),
        tern_tables=tern_tables,
        kinds=CANDIDATE_KINDS.copy(),
    )


@dataclass
class BPResult:
    labels: np.ndarray
    label_map: np.ndarray
    L: np.ndarray
    normals: VectorMap
    energy: float
    baseline_energy: float
    converged: bool
    iterations: int
    trace: list[float]


def _fold_pairs(g: FactorGraph):
    """Move each pairwise table into the ternary factor containing its edge.

    The energy is unchanged; only edges not covered by a triplet remain
    pairwise factors.
    """
    tables = g.tern_tables.copy()
    tern_of = np.full(g.n_vars, -1, dtype=np.int64)
    tern_of[g.tern_vars[:, 0]] = np.arange(len(g.tern_vars))
    keep = np.ones(len(g.pair_vars), dtype=bool)
    for e, (a, b) in enumerate(g.pair_vars):
        t = tern_of[a]
        if t < 0:
            continue
        if b == g.tern_vars[t, 1]:
            tables[t] += g.pair_tables[e][:, :, None]
        elif b == g.tern_vars[t, 2]:
            tables[t] += g.pair_tables[e][:, None, :]
        else:
            continue
        keep[e] = False
    return tables, g.pair_vars[keep], g.pair_tables[keep]


def _beliefs(unary, tern_vars, r_t, pair_vars, r_p):
    b = unary.copy()
    for k in range(3):
        np.add.at(b, tern_vars[:, k], r_t[:, k])
    for k in range(2):
        np.add.at(b, pair_vars[:, k], r_p[:, k])
    return b


def _normalised(m):
    return m - m.min(axis=-1, keepdims=True)


def solve_bp(graph: FactorGraph, cfg: BPConfig | None = None) -> BPResult:
    """Synchronous damped min-sum BP; returns the lowest-energy decode seen.

    Messages are min-normalised; decoding takes the per-variable belief
    argmin with ties going to the lowest label.  Iteration 0 decodes the
    unary argmin, so the result never has higher energy than it.
    """
    cfg = cfg or BPConfig()
    g = graph
    S = g.unary.shape[1]
    tern_tables, pair_vars, pair_tables = _fold_pairs(g)
    tv = g.tern_vars
    r_t = np.zeros((len(tv), 3, S))
    r_p = np.zeros((len(pair_vars), 2, S))

    labels = np.argmin(g.unary, axis=1)
    baseline = g.energy(labels)
    best, best_e = labels, baseline
    trace = [baseline]
    converged = False
    it = 0
    for it in range(1, cfg.iters + 1):
        b = _beliefs(g.unary, tv, r_t, pair_vars, r_p)
        new_t = r_t
        if len(tv):
            q = [_normalised(b[tv[:, k]] - r_t[:, k]) for k in range(3)]
            new_t = _kernels.ternary_messages(tern_tables, q[0], q[1], q[2])
        new_p = r_p
        if len(pair_vars):
            qa = _normalised(b[pair_vars[:, 0]] - r_p[:, 0])
            qb = _normalised(b[pair_vars[:, 1]] - r_p[:, 1])
            new_p = np.empty_like(r_p)
            new_p[:, 0] = (pair_tables + qb[:, None, :]).min(axis=2)
            new_p[:, 1] = (pair_tables + qa[:, :, None]).min(axis=1)
            new_p = _normalised(new_p)
        new_t = cfg.damping * r_t + (1.0 - cfg.damping) * new_t
        new_p = cfg.damping * r_p + (1.0 - cfg.damping) * new_p
        delta = max(
            float(np.abs(new_t - r_t).max()) if r_t.size else 0.0,
            float(np.abs(new_p - r_p).max()) if r_p.size else 0.0,
        )
        r_t, r_p = new_t, new_p
        labels = np.argmin(_beliefs(g.unary, tv, r_t, pair_vars, r_p), axis=1)
        e = g.energy(labels)
        trace.append(e)
        if e < best_e:
            best, best_e = labels, e
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        log.info("BP stopped after %d iterations without convergence", it)
    assert best_e <= baseline
    chosen = g.normals[np.arange(g.n_vars), best]
    L = update_mask(g.to_map(best), g.kinds)
    nmap = np.zeros(g.shape + (3,))
    nmap[g.ys, g.xs] = chosen
    return BPResult(
        labels=best,
        label_map=g.to_map(best),
        L=L,
        normals=VectorMap(nmap, g.index >= 0),
        energy=best_e,
        baseline_energy=baseline,
        converged=converged,
        iterations=it,
        trace=trace,
    )


def update_mask(label_map: np.ndarray, kinds: np.ndarray = CANDIDATE_KINDS) -> np.ndarray:
    """Specular mask implied by chosen labels (``-1`` marks background)."""
    label_map = np.asarray(label_map)
    return np.where(label_map >= 0, np.asarray(kinds)[np.clip(label_map, 0, None)] == 1, False)


def brute_force(graph: FactorGraph) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all labellings (small graphs only)."""
    V, S = graph.unary.shape
    if S**V > 5_000_000:
        raise ValueError("graph too large for exhaustive search")
    grids = np.stack(np.meshgrid(*([np.arange(S)] * V), indexing="ij"), axis=-1).reshape(-1, V)
    e = graph.unary[np.arange(V)[None, :], grids].sum(axis=1)
    for (a, b), tab in zip(graph.pair_vars, graph.pair_tables):
        e = e + tab[grids[:, a], grids[:, b]]
    for (a, b, c), tab in zip(graph.tern_vars, graph.tern_tables):
        e = e + tab[grids[:, a], grids[:, b], grids[:, c]]
    i = int(np.argmin(e))
    return grids[i], float(graph.energy(grids[i]))

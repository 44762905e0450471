"""Spatial adjacency graphs and the structured (Besag / BYM2) spatial prior.

The spatial prior pipeline is: ``besag_structure`` builds the intrinsic CAR
structure matrix, ``scale_structure`` rescales each connected component so
the geometric mean of its constrained marginal variances is one, and
``adjust_disconnected`` applies the disconnected-graph conventions (identity
blocks for singletons, one sum-to-zero constraint per non-singleton
component).  ``bym2_precision`` combines the result with an iid component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for invalid adjacency structures."""


@dataclass(frozen=True)
class SpatialGraph:
    """Symmetric area adjacency with its connected components."""

    n_areas: int
    neighbors: tuple          # tuple of tuples of neighbor indices
    components: tuple         # tuple of tuples of area indices
    n_edges: int

    @classmethod
    def from_neighbor_lists(cls, neighbors):
        neighbors = [tuple(sorted(set(nb))) for nb in neighbors]
        n = len(neighbors)
        for i, nbrs in enumerate(neighbors):
            for j in nbrs:
                if j == i:
                    raise GraphError(f"self-neighbor at area {i}")
                if not (0 <= j < n):
                    raise GraphError(f"neighbor index {j} out of range")
                if i not in neighbors[j]:
                    raise GraphError(f"asymmetric adjacency between {i} and {j}")
        components = _connected_components(neighbors)
        n_edges = sum(len(nb) for nb in neighbors) // 2
        return cls(n, tuple(neighbors), components, n_edges)

    @property
    def nonsingleton_components(self):
        return tuple(c for c in self.components if len(c) > 1)

    @property
    def singletons(self):
        return tuple(c[0] for c in self.components if len(c) == 1)


def _connected_components(neighbors):
    n = len(neighbors)
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in neighbors[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(tuple(sorted(comp)))
    return tuple(comps)


def ring_graph(n):
    """Cycle graph on ``n`` areas (every node has degree 2)."""
    if n < 3:
        raise GraphError("ring graph needs at least 3 areas")
    return SpatialGraph.from_neighbor_lists(
        [((i - 1) % n, (i + 1) % n) for i in range(n)]
    )


def grid_graph(rows, cols):
    """4-neighbor lattice on a rows x cols grid."""
    if rows < 1 or cols < 1:
        raise GraphError("grid dimensions must be at least 1")
    def at(r, c):
        return r * cols + c
    neighbors = [[] for _ in range(rows * cols)]
    for r in range(rows):
        for c in range(cols):
            if r + 1 < rows:
                neighbors[at(r, c)].append(at(r + 1, c))
                neighbors[at(r + 1, c)].append(at(r, c))
            if c + 1 < cols:
                neighbors[at(r, c)].append(at(r, c + 1))
                neighbors[at(r, c + 1)].append(at(r, c))
    return SpatialGraph.from_neighbor_lists(neighbors)


@dataclass(frozen=True)
class StructureMatrix:
    """Sparse symmetric PSD structure matrix with per-component scaling state."""

    matrix: sp.csc_matrix
    rank_deficiency: int
    scaling_factors: tuple    # one per graph component, 1.0 where unscaled
    adjusted: bool = False    # disconnected-graph adjustment applied

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def dense(self):
        return self.matrix.toarray()


def besag_structure(graph):
    """Intrinsic CAR structure: degree on the diagonal, -1 between neighbors."""
    n = graph.n_areas
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(graph.neighbors):
        if nbrs:
            rows.append(i)
            cols.append(i)
            vals.append(float(len(nbrs)))
        for j in nbrs:
            rows.append(i)
            cols.append(j)
            vals.append(-1.0)
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return StructureMatrix(
        matrix=mat,
        rank_deficiency=len(graph.components),
        scaling_factors=tuple(1.0 for _ in graph.components),
    )


def component_marginal_variances(block):
    """Marginal variances of an intrinsic field under its sum-to-zero constraint.

    Equals the diagonal of the generalized inverse of the (dense) component
    block, since the null space of an intrinsic CAR block is the constant
    vector removed by the constraint.
    """
    return np.diag(np.linalg.pinv(np.asarray(block), hermitian=True))


def scale_structure(structure, graph):
    """Rescale each non-singleton component so its constrained marginal
    variances have geometric mean one."""
    mat = structure.matrix.tolil(copy=True)
    factors = list(structure.scaling_factors)
    for ci, comp in enumerate(graph.components):
        if len(comp) < 2:
            continue
        idx = np.array(comp)
        block = structure.matrix[np.ix_(idx, idx)].toarray()
        margs = component_marginal_variances(block)
        if np.any(margs <= 0):
            raise GraphError("generalized inverse failed: non-positive marginal "
                             "variance (ill-formed graph component)")
        factor = float(np.exp(np.mean(np.log(margs))))
        mat[np.ix_(idx, idx)] = block * factor
        factors[ci] = factor
    return StructureMatrix(
        matrix=mat.tocsc(),
        rank_deficiency=structure.rank_deficiency,
        scaling_factors=tuple(factors),
        adjusted=structure.adjusted,
    )


def adjust_disconnected(structure, graph):
    """Disconnected-graph adjustment.

    Singleton components get an identity block (independent standard-normal
    effect, no constraint); each non-singleton component keeps its scaled
    intrinsic block and receives its own sum-to-zero constraint.  Returns the
    adjusted structure and the constraint plan (area-index tuples, one per
    non-singleton component).
    """
    mat = structure.matrix.tolil(copy=True)
    for s in graph.singletons:
        mat[s, s] = 1.0
    plan = graph.nonsingleton_components
    return (
        StructureMatrix(
            matrix=mat.tocsc(),
            rank_deficiency=len(plan),
            scaling_factors=structure.scaling_factors,
            adjusted=True,
        ),
        plan,
    )


def scaled_besag(graph):
    """Convenience: besag_structure -> scale_structure -> adjust_disconnected."""
    return adjust_disconnected(scale_structure(besag_structure(graph), graph), graph)


def bym2_precision(structure, phi, sigma_omega):
    """Precision of the BYM2 spatial effect w = sigma*(sqrt(1-phi) v + sqrt(phi) u).

    For interior ``phi`` returns the sparse joint precision of the augmented
    vector (w, u), which keeps sparsity; u carries the scaled intrinsic
    structure.  At the exact endpoints the augmentation degenerates and the
    marginal precision of w itself is returned: iid ``I/sigma^2`` at phi=0 and
    pure Besag ``R/sigma^2`` at phi=1.
    """
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    if sigma_omega <= 0:
        raise ValueError(f"sigma_omega must be positive, got {sigma_omega}")
    n = structure.dimension
    r = structure.matrix
    if phi == 0.0:
        return sp.identity(n, format="csc") * (1.0 / sigma_omega**2)
    if phi == 1.0:
        return (r * (1.0 / sigma_omega**2)).tocsc()
    tau = 1.0 / (sigma_omega**2 * (1.0 - phi))
    cross = -tau * sigma_omega * np.sqrt(phi)
    top = sp.hstack([tau * sp.identity(n), cross * sp.identity(n)])
    bottom = sp.hstack([cross * sp.identity(n), r + tau * sigma_omega**2 * phi * sp.identity(n)])
    return sp.vstack([top, bottom]).tocsc()


def mixing_reference_eigenvalues(structure, graph):
    """Eigenvalues of the scaled generalized-inverse covariance on the
    constrained subspace, used by the PC prior for the mixing parameter.

    Singleton components contribute eigenvalue 1 (their standardized effect
    is already iid standard normal).
    """
    eigs = []
    for comp in graph.components:
        if len(comp) == 1:
            eigs.append(1.0)
            continue
        idx = np.array(comp)
        block = structure.matrix[np.ix_(idx, idx)].toarray()
        vals = np.linalg.eigvalsh(block)
        tol = max(vals) * len(vals) * np.finfo(float).eps
        eigs.extend(1.0 / v for v in vals if v > tol)
    return np.array(sorted(eigs))


def dump_structure(structure, path):
    """Write the structure matrix in coordinate text format ``i j value``."""
    coo = structure.matrix.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")

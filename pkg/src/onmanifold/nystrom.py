"""Nystrom extension, projection, and gradients for a fitted CIDM model.

Out-of-sample evaluation of an eigenfunction with kernel eigenvalue
``lambda`` uses the row-normalized kernel,

    phi(x) = (1/lambda) * sum_j w_j(x) phi_j,
    w_j(x) = h(delta(x, x_j)^2 / eps^2) / sum_m h(delta(x, x_m)^2 / eps^2),

where the query's kNN scale is the mean distance to its k nearest
training points at strictly positive distance.  Excluding exact-zero
distances makes the out-of-sample kernel row at a training point equal
to the fitted row, so the extension interpolates training values.

Gradients differentiate the full kernel row, including the variation of
the query's kNN scale (smooth while the neighbor set is fixed); the
neighbor-set switching boundaries are rejected via
:class:`KnnBoundaryError`.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .cidm import CidmModel, inner
from .errors import GeometryError, KnnBoundaryError, SmallEigenvalueError

__all__ = [
    'NystromProjector',
    'extend_eigenfunction',
    'eigenfunction_values',
    'diffusion_map',
    'fourier_coefficients',
    'extend_function',
    'build_projector',
    'project',
    'project_many',
    'grad_eigenfunction',
    'diffusion_map_jacobian',
    'restricted_loss_gradient',
]

#: Modes with |lambda| below this cutoff cannot be Nystrom-extended.
SMALL_LAMBDA = 1e-10

#: Relative gap (vs data diameter) below which the k-th and (k+1)-th
#: neighbor distances count as tied for gradient purposes.
KNN_GAP_FRAC = 1e-9


def _as_queries(x) -> tuple[np.ndarray, bool]:
    q = np.asarray(x, dtype=np.float64)
    if q.ndim == 1:
        return q[None, :], True
    if q.ndim == 2:
        return q, False
    raise ValueError('query must be an n-vector or an (m, n) array')


def _query_scales(dists: np.ndarray, k_nn: int, average: bool) -> np.ndarray:
    """kNN scale per query row, skipping exact-zero distances."""
    m, N = dists.shape
    scales = np.empty(m)
    for a in range(m):
        row = dists[a]
        pos = row[row > 0.0]
        if pos.shape[0] < k_nn:
            raise ValueError('fewer than k_nn distinct training points for a query')
        nearest = np.partition(pos, k_nn - 1)[:k_nn]
        scales[a] = nearest.mean() if average else nearest.max()
    return scales


def _kernel_rows(model: CidmModel, queries: np.ndarray):
    """Row-normalized out-of-sample kernel weights.

    Returns ``(weights, dists, scales)`` with shapes (m, N), (m, N), (m,).
    The exponential shape is evaluated with the minimum dissimilarity
    shifted out, which leaves the normalized weights unchanged but keeps
    them finite arbitrarily far from the training data.
    """
    cfg = model.config
    pts = model.training.points
    dists = cdist(queries, pts)
    scales = _query_scales(dists, cfg.k_nn, cfg.average_scales)
    delta2 = dists ** 2 / (scales[:, None] * model.knn_scale[None, :])
    z = delta2 / cfg.epsilon ** 2
    if cfg.shape == 'exponential':
        u = np.exp(-(z - z.min(axis=1, keepdims=True)))
    else:
        u = (z <= 1.0).astype(np.float64)
    if cfg.kernel_variant == 'cidm_dm_normalized':
        u = u / model.raw_degree[None, :]
    norm = u.sum(axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise GeometryError('query outside the support of the indicator kernel')
    return u / norm, dists, scales


def eigenfunction_values(model: CidmModel, x, n_modes: int) -> np.ndarray:
    """Nystrom values of modes 0..n_modes-1 at one or many queries."""
    if not 1 <= n_modes <= model.n_eigs:
        raise ValueError(f'n_modes must be in [1, {model.n_eigs}]')
    lam = model.eig_lambda[:n_modes]
    small = np.abs(lam) < SMALL_LAMBDA
    if np.any(small):
        bad = int(np.flatnonzero(small)[0])
        raise SmallEigenvalueError(
            f'mode {bad} has |lambda| = {abs(lam[bad]):.2e} < {SMALL_LAMBDA:g}; '
            'its Nystrom extension is numerically meaningless')
    queries, single = _as_queries(x)
    weights, _, _ = _kernel_rows(model, queries)
    vals = (weights @ model.eig_phi[:, :n_modes]) / lam[None, :]
    return vals[0] if single else vals


def extend_eigenfunction(model: CidmModel, ell: int, x) -> float:
    """Nystrom extension of eigenfunction ``ell`` at a single point."""
    if not 0 <= ell < model.n_eigs:
        raise ValueError(f'ell must be in [0, {model.n_eigs})')
    return float(eigenfunction_values(model, x, ell + 1)[..., ell])


def diffusion_map(model: CidmModel, l_trunc: int, x) -> np.ndarray:
    """Diffusion map Phi(x) = (phi_1(x), ..., phi_L(x)), constant mode skipped.

    Requires ``l_trunc <= n_eigs - 1`` since mode 0 is excluded.
    """
    if not 1 <= l_trunc <= model.n_eigs - 1:
        raise ValueError(f'l_trunc must be in [1, {model.n_eigs - 1}] '
                         '(the constant mode is skipped)')
    return eigenfunction_values(model, x, l_trunc + 1)[..., 1:]


def fourier_coefficients(model: CidmModel, values: np.ndarray, l_trunc: int) -> np.ndarray:
    """Generalized Fourier coefficients <values[:, s], phi_ell> for ell < l_trunc."""
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    if vals.shape[0] != model.n_points:
        raise ValueError('values must have one row per training point')
    if not 1 <= l_trunc <= model.n_eigs:
        raise ValueError(f'l_trunc must be in [1, {model.n_eigs}]')
    coeffs = inner(model, model.eig_phi[:, :l_trunc], vals)
    return coeffs[:, 0] if squeeze else coeffs


def extend_function(model: CidmModel, coeffs: np.ndarray, x) -> np.ndarray:
    """Evaluate sum_ell coeffs[ell] phi_ell(x); a regression when truncated."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    squeeze = coeffs.ndim == 1
    if squeeze:
        coeffs = coeffs[:, None]
    phi_x = eigenfunction_values(model, x, coeffs.shape[0])
    out = phi_x @ coeffs
    return out[..., 0] if squeeze else out


@dataclass(frozen=True)
class NystromProjector:
    """Generalized Fourier coefficients of the coordinate functions.

    ``xhat[ell, s] = <coordinate s, phi_ell>``; the projection is
    ``x -> xhat.T @ (phi_0(x), ..., phi_{L-1}(x))``, the constant mode
    included so the data mean is representable.
    """

    model: CidmModel
    l_trunc: int
    xhat: np.ndarray

    def __post_init__(self):
        if not 1 <= self.l_trunc <= self.model.n_eigs:
            raise ValueError('l_trunc must be in [1, n_eigs]')


def build_projector(model: CidmModel, l_trunc: int) -> NystromProjector:
    """Projector onto the manifold resolved by the first ``l_trunc`` modes."""
    xhat = fourier_coefficients(model, model.training.points, l_trunc)
    return NystromProjector(model=model, l_trunc=l_trunc, xhat=xhat)


def project_many(projector: NystromProjector, x: np.ndarray, iterations: int = 2) -> np.ndarray:
    """Apply the Nystrom projection ``iterations`` times to each row of x."""
    if iterations < 1:
        raise ValueError('iterations must be >= 1')
    queries, single = _as_queries(x)
    out = queries
    for _ in range(iterations):
        phi_x = eigenfunction_values(projector.model, out, projector.l_trunc)
        out = phi_x @ projector.xhat
    return out[0] if single else out


def project(projector: NystromProjector, x, iterations: int = 2) -> np.ndarray:
    """Nystrom projection of a single point; see :func:`project_many`."""
    return project_many(projector, np.asarray(x, dtype=np.float64), iterations)


def _grad_pieces(model: CidmModel, query: np.ndarray):
    """Kernel row plus the ingredients of its spatial derivative at one query."""
    cfg = model.config
    if cfg.shape != 'exponential':
        raise ValueError('gradients require the exponential shape')
    pts = model.training.points
    row = cdist(query[None, :], pts)[0]
    order = np.argsort(row, kind='stable')          # ties resolved by index
    pos = order[row[order] > 0.0]
    k = cfg.k_nn
    if pos.shape[0] < k + 1:
        raise ValueError('need at least k_nn + 1 distinct training points')
    gap = row[pos[k]] - row[pos[k - 1]]
    if gap < KNN_GAP_FRAC * model.data_diameter:
        raise KnnBoundaryError(
            f'query is equidistant from its {k}-th and {k + 1}-th neighbors '
            f'(gap {gap:.3e}); the kNN scale is not differentiable here')
    nbr = pos[:k]
    if cfg.average_scales:
        scale = row[nbr].mean()
        grad_scale = ((query[None, :] - pts[nbr]) / row[nbr][:, None]).mean(axis=0)
    else:
        scale = row[pos[k - 1]]
        edge = pos[k - 1]
        grad_scale = (query - pts[edge]) / row[edge]
    delta2 = row ** 2 / (scale * model.knn_scale)
    z = delta2 / cfg.epsilon ** 2
    u = np.exp(-(z - z.min()))
    if cfg.kernel_variant == 'cidm_dm_normalized':
        u = u / model.raw_degree
    weights = u / u.sum()
    return weights, row, delta2, scale, grad_scale


def diffusion_map_jacobian(model: CidmModel, n_modes: int, x) -> np.ndarray:
    """Rows ``ell < n_modes`` of the Jacobian d(phi_ell)/dx at x.

    Differentiates the implemented kernel row exactly within the query's
    fixed neighbor set: both the Euclidean-distance term and the kNN-scale
    variation contribute.  Mode 0 yields an exactly zero row.
    """
    if not 1 <= n_modes <= model.n_eigs:
        raise ValueError(f'n_modes must be in [1, {model.n_eigs}]')
    lam = model.eig_lambda[:n_modes]
    if np.any(np.abs(lam) < SMALL_LAMBDA):
        bad = int(np.flatnonzero(np.abs(lam) < SMALL_LAMBDA)[0])
        raise SmallEigenvalueError(f'mode {bad} has |lambda| < {SMALL_LAMBDA:g}')
    query = np.asarray(x, dtype=np.float64)
    weights, row, delta2, scale, grad_scale = _grad_pieces(model, query)

    pts = model.training.points
    eps2 = model.config.epsilon ** 2
    phi = model.eig_phi[:, :n_modes]
    phi_hat = weights @ phi                          # = lambda * phi(x), (L,)
    centered = phi - phi_hat[None, :]                # (N, L)

    a = weights / model.knn_scale                    # (N,)
    U = centered * a[:, None]
    drift = np.outer(U.sum(axis=0), query) - U.T @ pts      # (L, n)
    s_coef = (weights * delta2) @ centered                  # (L,)
    jac = -(2.0 * drift - np.outer(s_coef, grad_scale)) / (lam[:, None] * eps2 * scale)
    return jac


def grad_eigenfunction(model: CidmModel, ell: int, x) -> np.ndarray:
    """Analytic gradient of the Nystrom extension of eigenfunction ``ell``."""
    if not 0 <= ell < model.n_eigs:
        raise ValueError(f'ell must be in [0, {model.n_eigs})')
    return diffusion_map_jacobian(model, ell + 1, x)[ell]


def restricted_loss_gradient(projector: NystromProjector,
                             loss_grad_at: Callable[[np.ndarray], np.ndarray],
                             x) -> np.ndarray:
    """Gradient of loss(projection(x)): DPhi(x)^T xhat gradL(projection(x)).

    ``loss_grad_at`` maps an input-space point to the loss gradient there;
    it is evaluated at the single-iteration projection of x.
    """
    query = np.asarray(x, dtype=np.float64)
    jac = diffusion_map_jacobian(projector.model, projector.l_trunc, query)
    target = project_many(projector, query, iterations=1)
    g = np.asarray(loss_grad_at(target), dtype=np.float64)
    return jac.T @ (projector.xhat @ g)

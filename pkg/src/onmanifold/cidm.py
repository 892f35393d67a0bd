"""Conformally invariant diffusion map (CIDM) fitting.

Builds the self-tuning kernel

    K_ij = h( delta(x_i, x_j)^2 / epsilon^2 ),
    delta(x, y)^2 = d(x, y)^2 / (scale(x) * scale(y)),

where ``scale`` is the (averaged) distance to the k nearest neighbors,
and extracts the spectrum of the normalized graph Laplacian
``L = I - D^{-1} K`` through the symmetric conjugate
``K_sym = D^{-1/2} K D^{-1/2}``.  Eigenvectors are returned in the
``phi = D^{-1/2} v`` gauge, normalized so that ``phi_0 == 1`` exactly and
the columns are orthonormal under the degree-weighted empirical inner
product implemented by :func:`inner` (see note below).

Normalization note
------------------
Eigenvectors of ``D^{-1} K`` are orthogonal under the degree-weighted
inner product ``<f, g> = sum_i D_ii f_i g_i / sum_i D_ii``, not under the
plain ``(1/N) sum_i f_i g_i``.  Because the kNN rescaling makes the CIDM
degrees asymptotically constant, the two agree in the large-data limit;
we use the degree-weighted form throughout so that orthonormality, the
constant mode ``phi_0 == 1`` and full-spectrum interpolation identities
hold to machine precision on finite data.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh, ArpackNoConvergence
from scipy.spatial.distance import pdist, squareform

from .errors import DisconnectedGraphError, DuplicatePointError, EigensolverFailure

__all__ = [
    'PointCloud',
    'CidmConfig',
    'CidmModel',
    'knn_scales',
    'cidm_dissimilarity_sq',
    'fit',
    'inner',
    'shape_function',
]

ShapeName = Literal['exponential', 'indicator']
KernelVariant = Literal['cidm', 'cidm_dm_normalized']

#: An eigenvalue of L within this distance of 0 counts as a harmonic
#: (constant) mode; more than one of them means a disconnected graph.
ZERO_EIGENVALUE_TOL = 1e-8

#: knn scales at or below this fraction of the data diameter signal
#: coincident points.
DUPLICATE_SCALE_FRAC = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """N points in n-dimensional input space, one point per row."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError('points must be a 2D array (N, n)')
        if pts.shape[0] < 2 or pts.shape[1] < 1:
            raise ValueError('need at least 2 points of dimension >= 1')
        if not np.all(np.isfinite(pts)):
            raise ValueError('points must be finite')
        object.__setattr__(self, 'points', pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_csv(cls, path) -> 'PointCloud':
        """Read a headerless CSV, one point per row, '.' decimal floats."""
        pts = np.loadtxt(path, delimiter=',', dtype=np.float64, ndmin=2)
        return cls(pts)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.points, delimiter=',', fmt='%.17g')


@dataclass(frozen=True)
class CidmConfig:
    """Kernel and eigensolver settings for a CIDM fit.

    ``average_scales`` selects the kNN rescaling variant: the mean of the
    distances to the k nearest neighbors (default, less sensitive) versus
    the distance to the k-th neighbor alone.
    """

    k_nn: int
    n_eigs: int
    epsilon: float = 1.0
    shape: ShapeName = 'exponential'
    kernel_variant: KernelVariant = 'cidm'
    average_scales: bool = True

    def __post_init__(self):
        if self.k_nn < 1:
            raise ValueError('k_nn must be >= 1')
        if self.n_eigs < 1:
            raise ValueError('n_eigs must be >= 1')
        if not self.epsilon > 0:
            raise ValueError('epsilon must be positive')
        if self.shape not in ('exponential', 'indicator'):
            raise ValueError(f'unknown shape {self.shape!r}')
        if self.kernel_variant not in ('cidm', 'cidm_dm_normalized'):
            raise ValueError(f'unknown kernel_variant {self.kernel_variant!r}')


def shape_function(z: np.ndarray, shape: ShapeName) -> np.ndarray:
    """Kernel shape h(z): exp(-z) or the indicator of [0, 1]."""
    z = np.asarray(z)
    if shape == 'exponential':
        return np.exp(-z)
    return (z <= 1.0).astype(np.float64)


@dataclass(frozen=True)
class CidmModel:
    """Fitted CIDM kernel state.

    ``eig_xi`` holds the Laplacian eigenvalues ``xi = 1 - lambda`` in
    nondecreasing order; ``eig_phi`` the matching eigenvectors of
    ``D^{-1} K`` (columns), with ``phi_0 == 1``.  ``degree`` is the degree
    vector of the kernel the spectrum was computed from; for the
    diffusion-maps-normalized variant ``raw_degree`` additionally keeps
    the pre-normalization CIDM degrees needed by out-of-sample kernel
    rows.
    """

    training: PointCloud
    config: CidmConfig
    knn_scale: np.ndarray
    degree: np.ndarray
    eig_xi: np.ndarray
    eig_phi: np.ndarray
    data_diameter: float
    raw_degree: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.training.n_points

    @property
    def n_eigs(self) -> int:
        return self.eig_xi.shape[0]

    @property
    def eig_lambda(self) -> np.ndarray:
        """Kernel eigenvalues lambda = 1 - xi of D^{-1} K."""
        return 1.0 - self.eig_xi

    @property
    def inner_weights(self) -> np.ndarray:
        """Weights w_i of the empirical inner product sum_i w_i f_i g_i (sum to 1)."""
        return self.degree / self.degree.sum()


def inner(model: CidmModel, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Empirical inner product under which ``eig_phi`` is orthonormal.

    Accepts vectors or (N, m) column stacks; contracts over the sample axis.
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    w = model.inner_weights
    wf = f * (w[:, None] if f.ndim == 2 else w)
    return np.tensordot(wf, g, axes=(0, 0))


def knn_scales(points: PointCloud, k_nn: int, average: bool = True) -> np.ndarray:
    """Per-point kNN distance scale.

    Entry i is the mean of the Euclidean distances from ``x_i`` to its
    ``k_nn`` nearest distinct-index neighbors (or the k-th distance alone
    when ``average=False``).  Ties are broken by ascending index, which
    never changes the returned values but makes neighbor sets
    deterministic.

    Raises
    ------
    DuplicatePointError
        If any scale is <= 1e-12 times the maximum pairwise distance.
    """
    pts = points.points
    N = points.n_points
    if not 1 <= k_nn <= N - 1:
        raise ValueError(f'k_nn must be in [1, {N - 1}], got {k_nn}')
    dist = squareform(pdist(pts))
    return _scales_from_sorted(np.sort(dist, axis=1), k_nn, average, dist.max())


def _scales_from_sorted(dist_sorted: np.ndarray, k_nn: int, average: bool,
                        diameter: float) -> np.ndarray:
    # column 0 is the self-distance 0; neighbors start at column 1
    neigh = dist_sorted[:, 1:k_nn + 1]
    scales = neigh.mean(axis=1) if average else neigh[:, -1]
    if np.any(scales <= DUPLICATE_SCALE_FRAC * max(diameter, np.finfo(float).tiny)):
        bad = int(np.argmin(scales))
        raise DuplicatePointError(
            f'point {bad} has kNN scale {scales[bad]:.3e}; '
            'coincident training points make the rescaled distance undefined')
    return scales


def cidm_dissimilarity_sq(x: np.ndarray, y: np.ndarray,
                          scale_x: float, scale_y: float) -> float:
    """Squared rescaled dissimilarity d(x, y)^2 / (scale_x * scale_y)."""
    if not (scale_x > 0 and scale_y > 0):
        raise ValueError('scales must be strictly positive')
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(diff @ diff) / (scale_x * scale_y)


def _kernel_matrix(pts: np.ndarray, scales: np.ndarray, config: CidmConfig):
    """Symmetric kernel matrix, its degree vector, and the raw CIDM degrees."""
    d2 = squareform(pdist(pts, 'sqeuclidean'))
    delta2 = d2 / np.outer(scales, scales)
    K = shape_function(delta2 / config.epsilon ** 2, config.shape)
    raw_degree = K.sum(axis=1)
    if config.kernel_variant == 'cidm_dm_normalized':
        K = K / np.outer(raw_degree, raw_degree)
        return K, K.sum(axis=1), raw_degree
    return K, raw_degree, None


def _top_eigenpairs(K_sym: np.ndarray, n_eigs: int):
    """Largest ``n_eigs`` eigenpairs of a symmetric matrix, descending."""
    N = K_sym.shape[0]
    if n_eigs > N:
        raise ValueError(f'n_eigs={n_eigs} exceeds the number of points {N}')
    try:
        if n_eigs > N // 4 or N <= 800:
            lam, V = eigh(K_sym, subset_by_index=[N - n_eigs, N - 1])
        else:
            # deterministic Lanczos start so repeated fits are bit-identical
            v0 = np.full(N, 1.0 / np.sqrt(N))
            lam, V = eigsh(K_sym, k=n_eigs, which='LA', v0=v0)
    except (np.linalg.LinAlgError, ArpackNoConvergence) as exc:
        raise EigensolverFailure(f'eigensolver failed for {n_eigs} pairs: {exc}') from exc
    if lam.shape[0] < n_eigs:
        raise EigensolverFailure(f'only {lam.shape[0]} of {n_eigs} eigenpairs converged')
    order = np.argsort(lam)[::-1]
    return lam[order], V[:, order]


def fit(points: PointCloud, config: CidmConfig) -> CidmModel:
    """Fit the CIDM kernel and Laplace-Beltrami eigenbasis.

    Parameters
    ----------
    points:
        Training cloud, one point per row.
    config:
        Kernel settings; ``config.n_eigs`` eigenpairs are extracted.

    Returns
    -------
    CidmModel
        Immutable fitted state, safe to share across threads.

    Raises
    ------
    DuplicatePointError
        Propagated from the kNN scales of coincident points.
    EigensolverFailure
        If the requested eigenpairs did not converge.
    DisconnectedGraphError
        If more than one eigenvalue of L is numerically zero.
    """
    if isinstance(points, np.ndarray):
        points = PointCloud(points)
    pts = points.points
    N = points.n_points
    if not 1 <= config.k_nn <= N - 1:
        raise ValueError(f'k_nn must be in [1, {N - 1}], got {config.k_nn}')

    dist = squareform(pdist(pts))
    diameter = float(dist.max())
    scales = _scales_from_sorted(np.sort(dist, axis=1), config.k_nn,
                                 config.average_scales, diameter)
    K, degree, raw_degree = _kernel_matrix(pts, scales, config)
    if np.any(degree <= 0):
        raise DisconnectedGraphError('kernel row sums vanish: isolated points '
                                     '(indicator shape with too small epsilon?)')

    K_sym = K / np.sqrt(np.outer(degree, degree))
    lam, V = _top_eigenpairs(K_sym, config.n_eigs)

    xi = 1.0 - lam
    n_zero = int(np.sum(np.abs(xi) <= ZERO_EIGENVALUE_TOL))
    if n_zero > 1:
        raise DisconnectedGraphError(
            f'{n_zero} eigenvalues within {ZERO_EIGENVALUE_TOL:g} of zero: '
            'the kernel graph has numerically disconnected components')

    # phi = D^{-1/2} v, rescaled to unit norm under the degree-weighted
    # inner product; the orthonormal V makes the factor sqrt(sum(D)) global.
    phi = np.sqrt(degree.sum()) * (V / np.sqrt(degree)[:, None])
    # sign gauge: largest-magnitude entry positive (first index on ties)
    anchor = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[anchor, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    phi = phi * signs
    # the Markov property D^{-1} K 1 = 1 is exact; pin the harmonic pair
    # and keep roundoff inside the Perron bounds
    xi = np.clip(xi, 0.0, 2.0)
    xi[0] = 0.0
    phi[:, 0] = 1.0

    return CidmModel(
        training=points,
        config=config,
        knn_scale=scales,
        degree=degree,
        eig_xi=xi,
        eig_phi=phi,
        data_diameter=diameter,
        raw_degree=raw_degree,
    )

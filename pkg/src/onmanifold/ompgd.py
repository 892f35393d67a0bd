"""On-manifold projected gradient descent.

Each step takes the oracle's loss gradient at the current on-manifold
point, projects it onto the SEC tangent frame there, steps by a fixed
amount, and Nystrom-projects the result back onto the manifold; the loop
stops at the first misclassified projected iterate.  Intrinsic
(semantic) coordinates of every iterate are recovered by extending the
known training labels.
"""

from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

import numpy as np

from .cidm import CidmModel
from .errors import StalledError
from .nystrom import (NystromProjector, build_projector, extend_function,
                      fourier_coefficients, project_many)
from .sec import SecFrame, tangent_frame_at

__all__ = [
    'ClassifierOracle',
    'SectorClassifier',
    'sector_classifier',
    'SemanticMap',
    'semantic_map',
    'semantic_labels',
    'PgdConfig',
    'PgdStep',
    'PgdTrace',
    'om_pgd_step',
    'om_pgd',
]

#: Tangent gradients this small relative to the raw gradient mean the
#: projection annihilated it.
STALL_GRAD_RTOL = 1e-9

#: Iterate displacement this small relative to the data diameter counts
#: as no motion.
STALL_MOVE_RTOL = 1e-9


class ClassifierOracle(Protocol):
    """Pluggable classifier: deterministic labels and input-space loss gradients."""

    def predict(self, x: np.ndarray) -> int: ...

    def loss_grad(self, x: np.ndarray, target_label: int) -> np.ndarray: ...


@dataclass(frozen=True)
class SectorClassifier:
    """Angular-sector classifier on the plane with a smooth softmax loss.

    Sector ``c`` covers ``[offset + c*w, offset + (c+1)*w)`` degrees,
    ``w = 360 / n_classes``; logits are ``kappa * cos(theta - center_c)``
    so ``predict`` returns the sector whose center is nearest.  Boundary
    positions are exact, which makes PGD termination assertions easy.
    """

    n_classes: int
    boundary_offset_deg: float = 0.0
    kappa: float = 8.0

    @property
    def sector_width_deg(self) -> float:
        return 360.0 / self.n_classes

    @property
    def center_angles_deg(self) -> np.ndarray:
        w = self.sector_width_deg
        return (self.boundary_offset_deg + (np.arange(self.n_classes) + 0.5) * w) % 360.0

    @property
    def boundary_angles_deg(self) -> np.ndarray:
        w = self.sector_width_deg
        return (self.boundary_offset_deg + np.arange(self.n_classes) * w) % 360.0

    def sector_of(self, angle_deg: float) -> int:
        rel = (angle_deg - self.boundary_offset_deg) % 360.0
        return int(rel // self.sector_width_deg) % self.n_classes

    def _logits(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        theta = np.arctan2(x[1], x[0])
        centers = np.radians(self.center_angles_deg)
        return self.kappa * np.cos(theta - centers), theta

    def predict(self, x: np.ndarray) -> int:
        z, _ = self._logits(np.asarray(x, dtype=np.float64))
        return int(np.argmax(z))

    def loss(self, x: np.ndarray, target_label: int) -> float:
        z, _ = self._logits(np.asarray(x, dtype=np.float64))
        z = z - z.max()
        return float(np.log(np.exp(z).sum()) - z[target_label])

    def loss_grad(self, x: np.ndarray, target_label: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z, theta = self._logits(x)
        p = np.exp(z - z.max())
        p /= p.sum()
        p[target_label] -= 1.0
        centers = np.radians(self.center_angles_deg)
        dloss_dtheta = float(p @ (-self.kappa * np.sin(theta - centers)))
        r2 = x[0] ** 2 + x[1] ** 2
        grad_theta = np.array([-x[1], x[0]]) / r2
        return dloss_dtheta * grad_theta


def sector_classifier(n_classes: int, boundary_offset: float = 0.0) -> SectorClassifier:
    """Desk-scale stand-in for an image classifier, with known boundaries."""
    if n_classes < 2:
        raise ValueError('n_classes must be >= 2')
    return SectorClassifier(n_classes=n_classes, boundary_offset_deg=boundary_offset)


@dataclass(frozen=True)
class SemanticMap:
    """Fourier coefficients of the training set's intrinsic parameters.

    Periodic parameters are stored as (cos, sin) column pairs so the
    0/360 seam never appears in the extended functions; they decode back
    to degrees via atan2.
    """

    coeffs: np.ndarray
    periodic: tuple[bool, ...]

    @property
    def n_params(self) -> int:
        return len(self.periodic)


def semantic_map(model: CidmModel, params_deg: np.ndarray,
                 periodic: Sequence[bool], l_trunc: int) -> SemanticMap:
    """Encode intrinsic parameters (degrees for periodic ones) for extension."""
    params = np.asarray(params_deg, dtype=np.float64)
    if params.ndim == 1:
        params = params[:, None]
    if params.shape[1] != len(periodic):
        raise ValueError('one periodic flag per parameter column required')
    cols = []
    for j, per in enumerate(periodic):
        if per:
            rad = np.radians(params[:, j])
            cols.extend([np.cos(rad), np.sin(rad)])
        else:
            cols.append(params[:, j])
    encoded = np.column_stack(cols)
    return SemanticMap(coeffs=fourier_coefficients(model, encoded, l_trunc),
                       periodic=tuple(bool(p) for p in periodic))


def semantic_labels(model: CidmModel, label_map: SemanticMap, x) -> np.ndarray:
    """Intrinsic parameters of x; periodic ones in degrees in [0, 360)."""
    ext = np.atleast_1d(extend_function(model, label_map.coeffs, x))
    out = np.empty(label_map.n_params)
    col = 0
    for j, per in enumerate(label_map.periodic):
        if per:
            out[j] = np.degrees(np.arctan2(ext[col + 1], ext[col])) % 360.0
            col += 2
        else:
            out[j] = ext[col]
            col += 1
    return out


@dataclass(frozen=True)
class PgdConfig:
    """Step size, iteration budget, and projection settings for the PGD loop.

    ``l_trunc`` optionally overrides the projector truncation for the run
    (None keeps the truncation the projector was built with).
    """

    alpha: float
    max_steps: int
    tangent_dim: int = 1
    normalize_gradient: bool = True
    l_trunc: int | None = None
    project_iters: int = 2

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError('alpha must be >= 0')
        if self.max_steps < 1:
            raise ValueError('max_steps must be >= 1')
        if self.tangent_dim < 1:
            raise ValueError('tangent_dim must be >= 1')
        if self.l_trunc is not None and self.l_trunc < 1:
            raise ValueError('l_trunc must be >= 1')
        if self.project_iters < 1:
            raise ValueError('project_iters must be >= 1')


@dataclass(frozen=True)
class PgdStep:
    """One on-manifold PGD step, in execution order."""

    index: int
    x_on: np.ndarray
    g_raw: np.ndarray
    g_tan: np.ndarray
    x_stepped: np.ndarray
    x_next: np.ndarray
    label_pred: int
    semantics: np.ndarray | None


Status = Literal['misclassified', 'max_steps', 'stalled']


@dataclass(frozen=True)
class PgdTrace:
    start: np.ndarray
    x0: np.ndarray
    true_label: int
    steps: list[PgdStep] = field(default_factory=list)
    status: Status = 'max_steps'

    def to_records(self) -> list[dict]:
        """JSON-friendly per-step records plus a trailing summary."""
        recs = []
        for s in self.steps:
            recs.append({
                'step': s.index,
                'x_on': s.x_on.tolist(),
                'g_raw': s.g_raw.tolist(),
                'g_tan': s.g_tan.tolist(),
                'x_stepped': s.x_stepped.tolist(),
                'x_next': s.x_next.tolist(),
                'label_pred': s.label_pred,
                'semantics': None if s.semantics is None else s.semantics.tolist(),
            })
        return recs


def _resolve_projector(projector: NystromProjector, config: PgdConfig) -> NystromProjector:
    if config.l_trunc is None or config.l_trunc == projector.l_trunc:
        return projector
    if config.l_trunc <= projector.l_trunc:
        # coefficients of a shorter truncation are a prefix of the longer one
        return NystromProjector(model=projector.model, l_trunc=config.l_trunc,
                                xhat=projector.xhat[:config.l_trunc])
    return build_projector(projector.model, config.l_trunc)


def om_pgd_step(x_on: np.ndarray, true_label: int, oracle: ClassifierOracle,
                projector: NystromProjector, frame: SecFrame, fhat: np.ndarray,
                config: PgdConfig, index: int = 0,
                label_map: SemanticMap | None = None) -> PgdStep:
    """One gradient / tangent-project / step / Nystrom-project cycle.

    Raises
    ------
    TangentRankError
        Propagated from the tangent frame when the fields do not span.
    StalledError
        If the tangent projection annihilates the gradient or the
        projected step does not move the iterate.
    """
    projector = _resolve_projector(projector, config)
    model = projector.model
    x_on = np.asarray(x_on, dtype=np.float64)
    g_raw = np.asarray(oracle.loss_grad(x_on, true_label), dtype=np.float64)
    raw_norm = float(np.linalg.norm(g_raw))
    if raw_norm == 0.0:
        raise StalledError('loss gradient vanished at the current iterate')
    g = g_raw / raw_norm if config.normalize_gradient else g_raw
    T = tangent_frame_at(model, frame, fhat, x_on, config.tangent_dim)
    g_tan = T @ (T.T @ g)
    if np.linalg.norm(g_tan) <= STALL_GRAD_RTOL * np.linalg.norm(g):
        raise StalledError('gradient is orthogonal to the tangent frame')
    x_stepped = x_on + config.alpha * g_tan
    x_next = project_many(projector, x_stepped, config.project_iters)
    if np.linalg.norm(x_next - x_on) < STALL_MOVE_RTOL * model.data_diameter:
        raise StalledError('projected step did not move the iterate')
    return PgdStep(
        index=index,
        x_on=x_on,
        g_raw=g_raw,
        g_tan=g_tan,
        x_stepped=x_stepped,
        x_next=x_next,
        label_pred=int(oracle.predict(x_next)),
        semantics=None if label_map is None else semantic_labels(model, label_map, x_next),
    )


def om_pgd(start: np.ndarray, true_label: int, oracle: ClassifierOracle,
           projector: NystromProjector, frame: SecFrame, fhat: np.ndarray,
           config: PgdConfig, label_map: SemanticMap | None = None) -> PgdTrace:
    """Iterate :func:`om_pgd_step` until misclassification, stall, or max_steps.

    The start point may be off-manifold; it is projected before step 1.
    Stalls terminate the trace with status ``'stalled'`` rather than
    propagating.
    """
    projector = _resolve_projector(projector, config)
    start = np.asarray(start, dtype=np.float64)
    x0 = project_many(projector, start, config.project_iters)
    x_on = x0
    steps: list[PgdStep] = []
    status: Status = 'max_steps'
    for i in range(config.max_steps):
        try:
            step = om_pgd_step(x_on, true_label, oracle, projector, frame, fhat,
                               config, index=i, label_map=label_map)
        except StalledError:
            status = 'stalled'
            break
        steps.append(step)
        x_on = step.x_next
        if step.label_pred != true_label:
            status = 'misclassified'
            break
    return PgdTrace(start=start, x0=x0, true_label=true_label, steps=steps, status=status)

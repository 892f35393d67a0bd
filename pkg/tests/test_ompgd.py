import numpy as np
import numpy.testing as npt
import pytest

import onmanifold as om
from onmanifold.ompgd import om_pgd, om_pgd_step

from conftest import angle_diff_deg


class TestSectorClassifier:
    def test_sector_center_predicts_own_label(self):
        oracle = om.sector_classifier(5, boundary_offset=10.0)
        for c, center in enumerate(oracle.center_angles_deg):
            rad = np.radians(center)
            assert oracle.predict(np.array([np.cos(rad), np.sin(rad)])) == c

    def test_sector_of_matches_predict(self):
        oracle = om.sector_classifier(4, boundary_offset=33.0)
        rng = np.random.default_rng(0)
        for theta in rng.uniform(0, 360, 50):
            x = np.array([np.cos(np.radians(theta)), np.sin(np.radians(theta))])
            assert oracle.predict(x) == oracle.sector_of(theta)

    def test_loss_grad_matches_finite_differences(self):
        oracle = om.sector_classifier(4, boundary_offset=40.0)
        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(20):
            theta, r = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.5)
            x = np.array([r * np.cos(theta), r * np.sin(theta)])
            label = rng.integers(0, 4)
            got = oracle.loss_grad(x, int(label))
            fd = np.array([
                (oracle.loss(x + h * e, int(label)) - oracle.loss(x - h * e, int(label))) / (2 * h)
                for e in np.eye(2)])
            npt.assert_allclose(got, fd, atol=1e-6, rtol=1e-5)

    def test_gradient_points_toward_nearest_boundary(self):
        # evaluated slightly off the sector center, where the nearest
        # boundary is unambiguous (the exact center is a symmetric
        # stationary point of the loss)
        oracle = om.sector_classifier(4, boundary_offset=0.0)
        center = oracle.center_angles_deg[0]          # 45 deg
        for offset, want_sign in ((12.0, +1.0), (-12.0, -1.0)):
            theta = np.radians(center + offset)
            x = np.array([np.cos(theta), np.sin(theta)])
            g = oracle.loss_grad(x, 0)
            tangent = np.array([-np.sin(theta), np.cos(theta)])
            assert np.sign(g @ tangent) == want_sign

    def test_few_classes_rejected(self):
        with pytest.raises(ValueError):
            om.sector_classifier(1)


class TestSemanticLabels:
    def test_training_points_recovered(self, circle_clean_full):
        cloud, params, model = circle_clean_full
        smap = om.semantic_map(model, params, [True], model.n_eigs)
        for i in (0, 50, 125):
            got = om.semantic_labels(model, smap, cloud.points[i])
            assert abs(angle_diff_deg(got[0], params[i, 0])) <= 1.0

    def test_off_sample_angle(self, circle_clean_full):
        _, params, model = circle_clean_full
        smap = om.semantic_map(model, params, [True], model.n_eigs)
        x = np.array([np.cos(np.radians(90.0)), np.sin(np.radians(90.0))])
        got = om.semantic_labels(model, smap, x)
        assert abs(angle_diff_deg(got[0], 90.0)) <= 2.0

    def test_radial_perturbation_keeps_angle(self, semantic_model):
        # off-manifold queries use a truncated map: the full-spectrum map
        # interpolates on-sample but divides by near-null kernel
        # eigenvalues, which amplifies noise away from the manifold
        _, params, model = semantic_model
        smap = om.semantic_map(model, params, [True], 20)
        for theta in np.arange(0.0, 360.0, 24.0):
            rad = np.radians(theta)
            x = 1.5 * np.array([np.cos(rad), np.sin(rad)])
            got = om.semantic_labels(model, smap, x)
            assert abs(angle_diff_deg(got[0], theta)) <= 5.0

    def test_non_periodic_parameters_pass_through(self, circle_clean_full):
        cloud, params, model = circle_clean_full
        values = np.column_stack([params[:, 0], 3.0 * params[:, 0] + 1.0])
        smap = om.semantic_map(model, values, [True, False], model.n_eigs)
        got = om.semantic_labels(model, smap, cloud.points[33])
        assert abs(angle_diff_deg(got[0], params[33, 0])) <= 1.0
        assert got[1] == pytest.approx(3.0 * params[33, 0] + 1.0, rel=1e-2)

    def test_periodic_flags_must_match_columns(self, circle_clean_full):
        _, params, model = circle_clean_full
        with pytest.raises(ValueError):
            om.semantic_map(model, params, [True, False], 10)


class TestOmPgdStep:
    def test_exactly_normal_gradient_stalls(self, pgd_run):
        # the projection annihilates a gradient orthogonal to the computed
        # tangent frame; build the orthogonal complement of the actual
        # frame so the orthogonality is exact
        projector, model = pgd_run['projector'], pgd_run['model']
        cloud = pgd_run['cloud']
        frame, fhat = pgd_circle_frame(pgd_run)
        x_on = om.project(projector, cloud.points[0], 2)
        T = om.tangent_frame_at(model, frame, fhat, x_on, 1)
        normal = np.array([-T[1, 0], T[0, 0]])

        class NormalOracle:
            def predict(self, x):
                return 0

            def loss_grad(self, x, label):
                return normal

        with pytest.raises(om.StalledError):
            om_pgd_step(x_on, 0, NormalOracle(), projector, frame, fhat,
                        om.PgdConfig(alpha=0.05, max_steps=3))

    def test_zero_alpha_is_a_regular_step(self, pgd_run):
        projector = pgd_run['projector']
        frame, fhat = pgd_circle_frame(pgd_run)
        cloud, oracle = pgd_run['cloud'], pgd_run['oracle']
        x_on = om.project(projector, cloud.points[10], 2)
        step = om_pgd_step(x_on, oracle.predict(x_on), oracle, projector, frame,
                           fhat, om.PgdConfig(alpha=0.0, max_steps=3))
        npt.assert_allclose(step.x_next, x_on, atol=1e-3)

    def test_tangential_step_advances_angle_with_gradient_sign(self, pgd_run):
        projector, oracle = pgd_run['projector'], pgd_run['oracle']
        frame, fhat = pgd_circle_frame(pgd_run)
        theta0 = 30.0
        x_on = om.project(projector,
                          np.array([np.cos(np.radians(theta0)), np.sin(np.radians(theta0))]), 2)
        label = oracle.sector_of(theta0)
        g = oracle.loss_grad(x_on, label)
        tangent = np.array([-x_on[1], x_on[0]])
        expected_sign = np.sign(g @ tangent)
        step = om_pgd_step(x_on, label, oracle, projector, frame, fhat,
                           om.PgdConfig(alpha=np.radians(2.0), max_steps=3))
        moved = angle_diff_deg(np.degrees(np.arctan2(step.x_next[1], step.x_next[0])) % 360,
                               theta0)
        assert np.sign(moved) == expected_sign
        assert 1.0 <= abs(moved) <= 3.0

    def test_projection_contracts_gradient(self, pgd_run):
        projector, oracle = pgd_run['projector'], pgd_run['oracle']
        frame, fhat = pgd_circle_frame(pgd_run)
        x_on = om.project(projector, np.array([0.3, 0.95]), 2)
        step = om_pgd_step(x_on, 0, oracle, projector, frame, fhat,
                           om.PgdConfig(alpha=0.01, max_steps=3, normalize_gradient=False))
        assert np.linalg.norm(step.g_tan) <= np.linalg.norm(step.g_raw) + 1e-15

    def test_tangent_projection_is_exact_linear_algebra(self, pgd_run):
        projector, oracle = pgd_run['projector'], pgd_run['oracle']
        model = pgd_run['model']
        frame, fhat = pgd_circle_frame(pgd_run)
        x_on = om.project(projector, np.array([0.7, 0.7]), 2)
        step = om_pgd_step(x_on, 1, oracle, projector, frame, fhat,
                           om.PgdConfig(alpha=0.02, max_steps=3))
        T = om.tangent_frame_at(model, frame, fhat, x_on, 1)
        normal = np.array([-T[1, 0], T[0, 0]])
        assert abs(step.g_tan @ normal) <= 1e-10


def pgd_circle_frame(pgd_run):
    model = pgd_run['model']
    frame = om.build_sec_frame(model, om.SecBasisConfig(m_basis=8, m_inner=40),
                               n_fields=2)
    fhat = om.fourier_coefficients(model, pgd_run['cloud'].points, 8)
    return frame, fhat


class TestOmPgd:
    def test_reaches_boundary_and_misclassifies(self, pgd_run):
        trace = pgd_run['trace']
        assert trace.status == 'misclassified'
        assert 4 <= len(trace.steps) <= 10
        terminal = trace.steps[-1]
        assert abs(angle_diff_deg(terminal.semantics[0], 40.0)) <= 3.0

    def test_iterates_stay_on_manifold(self, pgd_run):
        trace, projector = pgd_run['trace'], pgd_run['projector']
        model = pgd_run['model']
        for step in trace.steps:
            residual = np.linalg.norm(om.project(projector, step.x_next, 1) - step.x_next)
            assert residual <= 0.02 * model.data_diameter

    def test_never_misclassifying_oracle_hits_max_steps(self, pgd_run):
        projector, model = pgd_run['projector'], pgd_run['model']
        frame, fhat = pgd_circle_frame(pgd_run)
        base = pgd_run['oracle']

        class Stubborn:
            def predict(self, x):
                return 7            # never equals any sector's true label

            def loss_grad(self, x, label):
                return base.loss_grad(x, 0)

        config = om.PgdConfig(alpha=np.radians(1.0), max_steps=5)
        start = np.array([1.0, 0.05])
        trace = om_pgd(start, 3, Stubborn(), projector, frame, fhat, config)
        # predict() never returns 3, so the first step already "misclassifies"
        assert trace.status == 'misclassified'

        class Agreeable:
            def predict(self, x):
                return 3

            def loss_grad(self, x, label):
                return base.loss_grad(x, 0)

        trace = om_pgd(start, 3, Agreeable(), projector, frame, fhat, config)
        assert trace.status == 'max_steps'
        assert len(trace.steps) == 5

    def test_stall_is_a_terminal_status(self, pgd_run):
        projector = pgd_run['projector']
        frame, fhat = pgd_circle_frame(pgd_run)

        class ZeroGradient:
            def predict(self, x):
                return 0

            def loss_grad(self, x, label):
                return np.zeros(2)

        trace = om_pgd(np.array([1.0, 0.0]), 0, ZeroGradient(), projector, frame,
                       fhat, om.PgdConfig(alpha=0.1, max_steps=4))
        assert trace.status == 'stalled'
        assert len(trace.steps) == 0

    def test_deterministic_rerun(self, pgd_run):
        from onmanifold.cli import pgd_circle_pipeline
        a = pgd_run['trace']
        b = pgd_circle_pipeline()['trace']
        assert a.status == b.status and len(a.steps) == len(b.steps)
        for sa, sb in zip(a.steps, b.steps):
            npt.assert_array_equal(sa.x_next, sb.x_next)
            npt.assert_array_equal(sa.g_raw, sb.g_raw)
            assert sa.label_pred == sb.label_pred

    def test_gradient_scale_invariance_with_normalization(self, pgd_run):
        projector = pgd_run['projector']
        frame, fhat = pgd_circle_frame(pgd_run)
        base = pgd_run['oracle']

        class Scaled:
            def __init__(self, factor):
                self.factor = factor

            def predict(self, x):
                return base.predict(x)

            def loss_grad(self, x, label):
                return self.factor * base.loss_grad(x, label)

        config = om.PgdConfig(alpha=np.radians(2.0), max_steps=8)
        start = np.array([np.cos(np.radians(30.0)), np.sin(np.radians(30.0))])
        label = base.sector_of(30.0)
        t1 = om_pgd(start, label, Scaled(1.0), projector, frame, fhat, config)
        t2 = om_pgd(start, label, Scaled(1e4), projector, frame, fhat, config)
        assert [s.label_pred for s in t1.steps] == [s.label_pred for s in t2.steps]
        for sa, sb in zip(t1.steps, t2.steps):
            npt.assert_allclose(sa.x_next, sb.x_next, atol=1e-12)

    def test_records_are_json_serializable(self, pgd_run):
        import json
        payload = json.dumps(pgd_run['trace'].to_records())
        assert json.loads(payload)[0]['step'] == 0

    def test_config_l_trunc_overrides_projector(self, pgd_run):
        from onmanifold.ompgd import _resolve_projector
        projector = pgd_run['projector']
        same = _resolve_projector(projector, om.PgdConfig(alpha=0.1, max_steps=1))
        assert same is projector
        shorter = _resolve_projector(projector,
                                     om.PgdConfig(alpha=0.1, max_steps=1, l_trunc=10))
        assert shorter.l_trunc == 10
        npt.assert_array_equal(shorter.xhat, projector.xhat[:10])
        longer = _resolve_projector(projector,
                                    om.PgdConfig(alpha=0.1, max_steps=1, l_trunc=30))
        assert longer.l_trunc == 30
        npt.assert_allclose(longer.xhat[:projector.l_trunc], projector.xhat,
                            atol=1e-12)

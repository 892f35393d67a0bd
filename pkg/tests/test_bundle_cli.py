import json

import numpy as np
import numpy.testing as npt
import pytest

import onmanifold as om
from onmanifold.bundle import ModelBundle, dataset_digest, load_bundle, save_bundle
from onmanifold.cli import main


@pytest.fixture(scope='module')
def small_bundle(tmp_path_factory, noisy_circle):
    cloud, params, model = noisy_circle
    frame = om.build_sec_frame(model, om.SecBasisConfig(m_basis=6, m_inner=30),
                               n_fields=2)
    bundle = ModelBundle(
        model=model,
        xhat=om.build_projector(model, 15).xhat,
        sec_frame=frame,
        sec_fhat=om.fourier_coefficients(model, cloud.points, 6),
        label_map=om.semantic_map(model, params, [True], 20),
    )
    path = tmp_path_factory.mktemp('bundle') / 'model.bundle'
    save_bundle(path, bundle)
    return path, bundle


class TestBundle:
    def test_round_trip_preserves_model(self, small_bundle):
        path, bundle = small_bundle
        loaded = load_bundle(path)
        npt.assert_array_equal(loaded.model.training.points,
                               bundle.model.training.points)
        npt.assert_array_equal(loaded.model.eig_phi, bundle.model.eig_phi)
        npt.assert_array_equal(loaded.model.eig_xi, bundle.model.eig_xi)
        assert loaded.model.config == bundle.model.config
        assert loaded.model.data_diameter == bundle.model.data_diameter
        npt.assert_array_equal(loaded.xhat, bundle.xhat)
        npt.assert_array_equal(loaded.sec_frame.G, bundle.sec_frame.G)
        npt.assert_array_equal(loaded.sec_frame.u_tilde, bundle.sec_frame.u_tilde)
        assert loaded.label_map.periodic == bundle.label_map.periodic
        for a, b in zip(loaded.sec_frame.fields, bundle.sec_frame.fields):
            assert a.eta == b.eta
            npt.assert_array_equal(a.coeffs, b.coeffs)

    def test_load_save_is_byte_identical(self, small_bundle, tmp_path):
        path, _ = small_bundle
        loaded = load_bundle(path)
        copy = tmp_path / 'copy.bundle'
        save_bundle(copy, loaded)
        assert copy.read_bytes() == path.read_bytes()

    def test_loaded_bundle_is_usable(self, small_bundle):
        path, _ = small_bundle
        loaded = load_bundle(path)
        projector = loaded.projector()
        p = om.project(projector, np.array([1.5, 0.2]), 2)
        assert 0.5 <= np.linalg.norm(p) <= 1.5
        T = om.tangent_frame_at(loaded.model, loaded.sec_frame, loaded.sec_fhat,
                                np.array([0.0, 1.0]), 1)
        assert T.shape == (2, 1)
        labels = om.semantic_labels(loaded.model, loaded.label_map, np.array([0.0, 1.1]))
        assert 0.0 <= labels[0] < 360.0

    def test_digest_guards_against_tampering(self, small_bundle, tmp_path):
        path, _ = small_bundle
        raw = bytearray(path.read_bytes())
        manifest_len = int(np.frombuffer(raw[8:16], dtype='<u8')[0])
        raw[16 + manifest_len + 8] ^= 0xFF       # a byte inside the points block
        bad = tmp_path / 'tampered.bundle'
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_bundle(bad)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / 'junk.bundle'
        path.write_bytes(b'NOTABNDL' + b'\x00' * 32)
        with pytest.raises(ValueError):
            load_bundle(path)

    def test_digest_is_stable(self):
        pts = np.arange(12, dtype=np.float64).reshape(4, 3)
        assert dataset_digest(pts) == dataset_digest(pts.copy())
        assert dataset_digest(pts) != dataset_digest(pts + 1)

    def test_dm_variant_round_trip(self, tmp_path, circle300):
        cloud, _, _ = circle300
        model = om.fit(cloud, om.CidmConfig(k_nn=8, n_eigs=10,
                                            kernel_variant='cidm_dm_normalized'))
        path = tmp_path / 'dm.bundle'
        save_bundle(path, ModelBundle(model=model))
        loaded = load_bundle(path)
        npt.assert_array_equal(loaded.model.raw_degree, model.raw_degree)
        got = om.extend_eigenfunction(loaded.model, 1, cloud.points[7])
        assert got == pytest.approx(model.eig_phi[7, 1], rel=1e-8)


def run_cli(*argv):
    return main(list(argv))


class TestCli:
    def test_synth_fit_project_round_trip(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        bundle = tmp_path / 'model.bundle'
        out = tmp_path / 'proj.csv'
        assert run_cli('synth', '--kind', 'circle', '--n', '200', '--seed', '7',
                       '--out', str(pts)) == 0
        assert run_cli('fit', str(pts), '--k-nn', '8', '--n-eigs', '30',
                       '--l-trunc', '15', '--out', str(bundle)) == 0
        loaded = load_bundle(bundle)
        assert loaded.model.n_eigs == 30
        assert run_cli('project', str(bundle), str(pts), '--iters', '2',
                       '--out', str(out)) == 0
        proj = np.loadtxt(out, delimiter=',')
        assert proj.shape == (200, 2)

    def test_fit_round_trips_manifest(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        bundle = tmp_path / 'model.bundle'
        run_cli('synth', '--kind', 'circle', '--n', '120', '--seed', '3',
                '--out', str(pts))
        run_cli('fit', str(pts), '--k-nn', '6', '--n-eigs', '20', '--out', str(bundle))
        first = bundle.read_bytes()
        save_bundle(bundle, load_bundle(bundle))
        assert bundle.read_bytes() == first

    def test_extend_verb(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        vals = tmp_path / 'vals.csv'
        bundle = tmp_path / 'model.bundle'
        out = tmp_path / 'ext.csv'
        run_cli('synth', '--kind', 'circle', '--n', '150', '--seed', '1',
                '--out', str(pts), '--params-out', str(tmp_path / 'params.csv'))
        params = np.loadtxt(tmp_path / 'params.csv', delimiter=',')
        from onmanifold.synth import fig1_target_function
        np.savetxt(vals, fig1_target_function(params), delimiter=',')
        run_cli('fit', str(pts), '--k-nn', '8', '--n-eigs', '30', '--out', str(bundle))
        assert run_cli('extend', str(bundle), str(pts), '--values', str(vals),
                       '--l-trunc', '15', '--out', str(out)) == 0
        got = np.loadtxt(out, delimiter=',')
        assert np.corrcoef(got, fig1_target_function(params))[0, 1] > 0.99

    def test_sec_fields_and_tangent_verbs(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        bundle = tmp_path / 'model.bundle'
        run_cli('synth', '--kind', 'circle', '--n', '200', '--seed', '5',
                '--out', str(pts))
        run_cli('fit', str(pts), '--k-nn', '8', '--n-eigs', '40',
                '--l-trunc', '20', '--out', str(bundle))
        assert run_cli('sec-fields', str(bundle), '--m-basis', '6',
                       '--n-fields', '2', '--force') == 0
        tans = tmp_path / 'tans.csv'
        assert run_cli('tangent', str(bundle), str(pts), '--dim', '1',
                       '--out', str(tans)) == 0
        rows = np.loadtxt(tans, delimiter=',')
        assert rows.shape == (200, 4)
        basis = rows[:, 2:]
        npt.assert_allclose(np.linalg.norm(basis, axis=1), 1.0, atol=1e-10)

    def test_usage_error_exit_code(self, tmp_path, capsys):
        assert run_cli('project', str(tmp_path / 'nope.bundle'),
                       str(tmp_path / 'nope.csv'), '--out',
                       str(tmp_path / 'o.csv')) == 1

    def test_overwrite_needs_force(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        assert run_cli('synth', '--kind', 'circle', '--n', '100', '--seed', '0',
                       '--out', str(pts)) == 0
        assert run_cli('synth', '--kind', 'circle', '--n', '100', '--seed', '0',
                       '--out', str(pts)) == 1
        assert run_cli('synth', '--kind', 'circle', '--n', '100', '--seed', '0',
                       '--out', str(pts), '--force') == 0

    def test_pgd_verb_misclassifies(self, tmp_path):
        pts = tmp_path / 'pts.csv'
        bundle = tmp_path / 'model.bundle'
        trace = tmp_path / 'trace.jsonl'
        run_cli('synth', '--kind', 'circle', '--n', '300', '--seed', '11',
                '--out', str(pts))
        run_cli('fit', str(pts), '--k-nn', '8', '--n-eigs', '40',
                '--l-trunc', '20', '--out', str(bundle))
        run_cli('sec-fields', str(bundle), '--m-basis', '8', '--n-fields', '2',
                '--force')
        # a step size well above the sampled circle's projection wobble
        code = run_cli('pgd', str(bundle), '--start', '0.87,0.5',
                       '--boundary-offset', '40', '--alpha', '0.15',
                       '--max-steps', '25', '--out', str(trace))
        assert code == 0
        lines = [json.loads(line) for line in trace.read_text().splitlines()]
        assert lines[-1]['summary']['status'] == 'misclassified'
        assert all('x_next' in rec for rec in lines[:-1])

    def test_pgd_stall_exits_2(self, tmp_path):
        # on a randomly sampled circle the projection has angular wobble
        # with attracting fixed points; an iterate caught by one converges
        # geometrically until the displacement stall fires
        pts = tmp_path / 'pts.csv'
        bundle = tmp_path / 'model.bundle'
        run_cli('synth', '--kind', 'circle', '--n', '400', '--seed', '11',
                '--out', str(pts))
        run_cli('fit', str(pts), '--k-nn', '8', '--n-eigs', '40',
                '--l-trunc', '20', '--out', str(bundle))
        run_cli('sec-fields', str(bundle), '--m-basis', '8', '--n-fields', '2',
                '--force')
        theta = np.radians(30.0)
        code = run_cli('pgd', str(bundle),
                       '--start', f'{np.cos(theta)},{np.sin(theta)}',
                       '--boundary-offset', '40', '--alpha', str(np.radians(2.0)),
                       '--max-steps', '60',
                       '--out', str(tmp_path / 't.jsonl'))
        assert code == 2
        lines = [json.loads(line) for line in (tmp_path / 't.jsonl').read_text().splitlines()]
        assert lines[-1]['summary']['status'] == 'stalled'

    def test_repro_outputs_are_deterministic(self, tmp_path):
        d1, d2 = tmp_path / 'a', tmp_path / 'b'
        for d in (d1, d2):
            assert run_cli('--threads', '1', 'repro', 'pgd-circle',
                           '--out-dir', str(d)) == 0
        f1 = d1 / 'pgd_trace.jsonl'
        f2 = d2 / 'pgd_trace.jsonl'
        assert f1.read_bytes() == f2.read_bytes()

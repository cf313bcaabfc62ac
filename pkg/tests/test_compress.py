import numpy as np
import pytest

from ronkit.compress import (
    CompressionPlan,
    LayerCompression,
    PlanEntry,
    RankWarning,
    build_student,
    collect_basis,
    compress_residual,
    eligible_layers,
    error_bound,
    expand_pooled_selection,
    layer_seed,
    load_plan,
    make_uniform_plan,
    save_plan,
    select_rows,
)
from ronkit.errors import NumericalError, PlanError, ShapeError
from ronkit.linalg import maxvol_bound, truncated_svd
from ronkit.network import (
    Activation,
    ActivationKind,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool,
    Residual,
    TeacherNetwork,
    forward_student,
    forward_teacher,
)

from oracles import principal_angles, spectral_norm


def make_relu_mlp(dims, rng, bias_scale=0.1):
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        layers.append(
            Dense(rng.normal(size=(dout, din)) / np.sqrt(din),
                  bias_scale * rng.normal(size=dout))
        )
        if i < len(dims) - 2:
            layers.append(Activation(ActivationKind.relu()))
    return TeacherNetwork(dims[0], layers)


def make_conv_teacher(rng):
    """conv -> BN -> ReLU -> pool -> dense on a 3x8x8 input."""
    kernel = rng.normal(size=(4, 3, 3, 3)) / 3.0
    bn = BatchNorm(
        gamma=0.5 + np.abs(rng.normal(size=4)),
        beta=0.2 * rng.normal(size=4),
        mean=0.1 * rng.normal(size=4),
        var=0.5 + np.abs(rng.normal(size=4)),
        eps=1e-5,
    )
    dense = Dense(rng.normal(size=(10, 4 * 4 * 4)) / 8.0, 0.1 * rng.normal(size=10))
    return TeacherNetwork(
        (3, 8, 8),
        [
            Conv2d(kernel, 0.1 * rng.normal(size=4), stride=1, padding=1),
            bn,
            Activation(ActivationKind.relu()),
            MaxPool(),
            dense,
        ],
    )


def full_rank_plan(net, seed=0):
    return make_uniform_plan(net, "fraction", 1.0, seed=seed)


def rel_err(got, want):
    scale = max(np.abs(want).max(), 1e-30)
    return np.abs(got - want).max() / scale


class TestCollectBasis:
    def test_exact_low_rank_outputs(self, rng):
        basis = np.linalg.qr(rng.normal(size=(24, 3)))[0]
        mix = rng.normal(size=(3, 10))
        net = TeacherNetwork(10, [Dense(basis @ mix)])
        lc = collect_basis(net, rng.normal(size=(50, 10)), 0, 3)
        assert lc.residual_rms <= 1e-8
        z = forward_teacher(net, rng.normal(size=(5, 10)))
        recon = (z @ lc.basis) @ lc.basis.T
        assert np.allclose(recon, z, atol=1e-8)

    def test_full_rank_square_basis(self, rng):
        net = TeacherNetwork(6, [Dense(rng.normal(size=(5, 6)))])
        lc = collect_basis(net, rng.normal(size=(40, 6)), 0, 5)
        assert lc.basis.shape == (5, 5)
        assert lc.residual_rms <= 1e-10
        assert np.allclose(lc.basis.T @ lc.basis, np.eye(5), atol=1e-10)

    def test_collects_post_activation(self, rng):
        w = rng.normal(size=(5, 4))
        net = TeacherNetwork(4, [Dense(w), Activation(ActivationKind.relu())])
        data = rng.normal(size=(30, 4))
        lc = collect_basis(net, data, 0, 5)
        z = np.maximum(data @ w.T, 0.0)
        # Basis must reproduce post-activation outputs, not pre-activation.
        assert np.allclose((z @ lc.basis) @ lc.basis.T, z, atol=1e-8)

    def test_sketched_close_to_exact(self, rng):
        # Near-rank-10 first layer (the low-rank regime the sketch targets):
        # the sketched basis agrees with the exact-SVD basis.
        w1 = rng.normal(size=(20, 10)) @ rng.normal(size=(10, 12))
        w1 += 1e-3 * rng.normal(size=(20, 12))
        net = TeacherNetwork(
            12,
            [Dense(w1), Dense(rng.normal(size=(10, 20))),
             Activation(ActivationKind.relu())],
        )
        data = rng.normal(size=(400, 12))
        exact = collect_basis(net, data, 0, 10, sketch=False)
        sketched = collect_basis(net, data, 0, 10, seed=3, sketch=True)
        assert sketched.sketched and not exact.sketched
        assert principal_angles(sketched.basis, exact.basis).max() < 0.2

    def test_sketch_chunking_matches_single_shot(self, rng):
        net = make_relu_mlp([8, 12, 6], rng)
        data = rng.normal(size=(64, 8))
        small_cap = collect_basis(net, data, 0, 4, seed=9, sketch=True, memory_cap=100)
        one_shot = collect_basis(net, data, 0, 4, seed=9, sketch=True)
        assert np.allclose(small_cap.basis, one_shot.basis, atol=1e-12)

    def test_insufficient_samples(self, rng):
        net = TeacherNetwork(6, [Dense(rng.normal(size=(6, 6)))])
        with pytest.raises(NumericalError):
            collect_basis(net, rng.normal(size=(3, 6)), 0, 5)

    def test_degenerate_rank_lowered_with_warning(self, rng):
        low = rng.normal(size=(8, 2)) @ rng.normal(size=(2, 6))
        net = TeacherNetwork(6, [Dense(low)])
        with pytest.warns(RankWarning):
            lc = collect_basis(net, rng.normal(size=(30, 6)), 0, 5)
        assert lc.rank == 2
        assert lc.requested_rank == 5

    def test_non_affine_layer_rejected(self, rng):
        net = TeacherNetwork(
            4, [Dense(rng.normal(size=(4, 4))), Activation(ActivationKind.relu())]
        )
        with pytest.raises(PlanError):
            collect_basis(net, rng.normal(size=(10, 4)), 1, 2)


class TestSelectRows:
    def _basis_lc(self, basis, label="dense[0]"):
        return LayerCompression(
            layer=0,
            label=label,
            basis=basis,
            spectrum=np.ones(basis.shape[1]),
            residual_rms=0.0,
            samples=10,
            sketched=False,
            requested_rank=basis.shape[1],
        )

    def test_all_rows_gives_unit_norm(self, rng):
        basis = np.linalg.qr(rng.normal(size=(12, 3)))[0]
        lc = select_rows(self._basis_lc(basis), 12)
        assert sorted(lc.selection.indices.tolist()) == list(range(12))
        assert spectral_norm(basis @ lc.pinv) == pytest.approx(1.0, abs=1e-10)

    def test_identity_block_selbecause_dominant(self):
        basis = np.zeros((10, 3))
        basis[:3] = np.eye(3)
        lc = select_rows(self._basis_lc(basis), 3)
        assert sorted(lc.selection.indices.tolist()) == [0, 1, 2]

    def test_random_basis_bound_holds(self, rng):
        basis = np.linalg.qr(rng.normal(size=(30, 4)))[0]
        lc = select_rows(self._basis_lc(basis), 6)
        norm = spectral_norm(basis @ lc.pinv)
        assert norm <= maxvol_bound(30, 4, 6) + 1e-9
        assert np.allclose(lc.pinv @ basis[lc.selection.indices], np.eye(4), atol=1e-8)

    def test_rows_out_of_range(self, rng):
        basis = np.linalg.qr(rng.normal(size=(8, 3)))[0]
        with pytest.raises(PlanError):
            select_rows(self._basis_lc(basis), 2)
        with pytest.raises(PlanError):
            select_rows(self._basis_lc(basis), 9)


class TestErrorBound:
    def test_all_rows_returns_residual(self):
        assert error_bound(20, 4, 20, 0.37) == pytest.approx(0.37)

    def test_zero_residual(self):
        assert error_bound(100, 10, 15, 0.0) == 0.0

    def test_paper_oversampling_point(self):
        # D=100, R=10, P=1.5R: coefficient sqrt(1 + 850/6) ~ 11.944
        coeff = error_bound(100, 10, 15, 1.0)
        assert coeff == pytest.approx(np.sqrt(1 + 850.0 / 6.0), rel=1e-12)
        assert coeff == pytest.approx(11.944, abs=5e-4)

    def test_monotone_in_rows(self):
        vals = [error_bound(60, 6, p, 1.0) for p in range(6, 61)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_domain_error(self):
        with pytest.raises(PlanError):
            error_bound(10, 5, 4, 1.0)


class TestExpandPooledSelection:
    def test_single_channel_windows(self):
        got = expand_pooled_selection(np.array([0, 3]), (1, 4, 4))
        assert got.tolist() == [0, 1, 4, 5, 10, 11, 14, 15]

    def test_channel_offset(self):
        got = expand_pooled_selection(np.array([4]), (2, 4, 4))
        # pooled index 4 = channel 1, window (0, 0) -> pre-pool base 16.
        assert got.tolist() == [16, 17, 20, 21]

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            expand_pooled_selection(np.array([0]), (1, 5, 4))

    def test_gather_then_max_equals_pooled_teacher(self, rng):
        # Random conv stage, partial selection: max over gathered pre-pool
        # values reproduces the pooled outputs at the selected coordinates.
        c, h, w = 3, 6, 6
        pre = rng.normal(size=(20, c * h * w))
        pooled = pre.reshape(-1, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
        pooled = pooled.reshape(20, -1)
        sel = np.array([0, 7, 11, 26])
        gather = expand_pooled_selection(sel, (c, h, w))
        got = pre[:, gather].reshape(20, sel.size, 4).max(axis=2)
        assert np.array_equal(got, pooled[:, sel])

    def test_constant_map_keeps_constant(self):
        pre = np.full((4, 1 * 4 * 4), 2.5)
        gather = expand_pooled_selection(np.array([1, 2]), (1, 4, 4))
        got = pre[:, gather].reshape(4, 2, 4).max(axis=2)
        assert np.all(got == 2.5)


class TestCompressResidual:
    def _lc_from_outputs(self, z, rank, rows=None):
        svd = truncated_svd(z.T, rank, compute_vt=False)
        lc = LayerCompression(
            layer=0,
            label="residual",
            basis=svd.u,
            spectrum=svd.sigma,
            residual_rms=0.0,
            samples=z.shape[0],
            sketched=False,
            requested_rank=rank,
        )
        return select_rows(lc, rows) if rows is not None else lc

    def test_single_branch_reduces_to_plain_formula(self, rng):
        d, r, p = 12, 4, 6
        branch_out = rng.normal(size=(40, d))
        out = np.maximum(branch_out, 0.0)
        b_lc = self._lc_from_outputs(branch_out, r)
        o_lc = self._lc_from_outputs(out, r, rows=p)
        stage = compress_residual([b_lc], o_lc, ActivationKind.relu())
        c1 = rng.normal(size=(7, r))
        got = stage.apply([c1])
        # Plain-layer estimate: (SV)^+ psi(S V_1 c_1).
        sampled = np.maximum(c1 @ b_lc.basis[o_lc.selection.indices].T, 0.0)
        want = sampled @ o_lc.pinv.T
        assert np.allclose(got, want, atol=1e-12)

    def test_two_identical_branches_double_the_lift(self, rng):
        d, r, p = 10, 3, 5
        branch_out = rng.normal(size=(30, d))
        b_lc = self._lc_from_outputs(branch_out, r)
        o_lc = self._lc_from_outputs(branch_out, r, rows=p)
        stage = compress_residual([b_lc, b_lc], o_lc)  # identity activation
        single = compress_residual([b_lc], o_lc)
        c = rng.normal(size=(6, r))
        assert np.allclose(stage.apply([c, c]), 2.0 * single.apply([c]), atol=1e-12)

    def test_full_rank_two_branch_matches_teacher_block(self, rng):
        d = 8
        a = rng.normal(size=(d, d))
        b = rng.normal(size=(d, d))
        block = Residual(branches=((Dense(a),), (Dense(b),)))
        net = TeacherNetwork(d, [block, Activation(ActivationKind.relu())])
        z0 = rng.normal(size=(60, d))
        f1, f2 = z0 @ a.T, z0 @ b.T
        y = forward_teacher(net, z0)
        lc1 = self._lc_from_outputs(f1, d)
        lc2 = self._lc_from_outputs(f2, d)
        out_lc = self._lc_from_outputs(y, d, rows=d)
        stage = compress_residual([lc1, lc2], out_lc, ActivationKind.relu())
        c1, c2 = f1 @ lc1.basis, f2 @ lc2.basis
        lifted = stage.apply([c1, c2]) @ out_lc.basis.T
        assert rel_err(lifted, y) <= 1e-8

    def test_requires_selection(self, rng):
        z = rng.normal(size=(20, 6))
        lc = self._lc_from_outputs(z, 3)
        with pytest.raises(PlanError):
            compress_residual([lc], lc)

    def test_branch_dim_mismatch(self, rng):
        z = rng.normal(size=(20, 6))
        out = self._lc_from_outputs(z, 3, rows=4)
        bad = self._lc_from_outputs(rng.normal(size=(20, 5)), 3)
        with pytest.raises(ShapeError):
            compress_residual([bad], out)


class TestPlans:
    def test_entries_must_form_suffix(self, rng):
        net = make_relu_mlp([10, 8, 6, 4], rng)
        # Affine layers sit at indices 0, 2, 4; skipping the middle one fails.
        plan = CompressionPlan(
            [
                PlanEntry(layer=0, strategy="fixed", value=2),
                PlanEntry(layer=4, strategy="fixed", value=2),
            ]
        )
        with pytest.raises(PlanError):
            plan.validate(net)

    def test_suffix_plan_accepted(self, rng):
        net = make_relu_mlp([10, 8, 6, 4], rng)
        plan = CompressionPlan(
            [
                PlanEntry(layer=2, strategy="fixed", value=2),
                PlanEntry(layer=4, strategy="fixed", value=2),
            ]
        )
        plan.validate(net)
        assert plan.first_compressed_layer == 2

    def test_non_affine_entry_rejected(self, rng):
        net = make_relu_mlp([10, 8, 6], rng)
        plan = CompressionPlan([PlanEntry(layer=1, strategy="fixed", value=2)])
        with pytest.raises(PlanError):
            plan.validate(net)

    def test_bad_entry_values(self):
        with pytest.raises(PlanError):
            PlanEntry(layer=0, strategy="mystery", value=1)
        with pytest.raises(PlanError):
            PlanEntry(layer=0, strategy="fraction", value=0.0)
        with pytest.raises(PlanError):
            PlanEntry(layer=0, strategy="energy", value=1.0)
        with pytest.raises(PlanError):
            PlanEntry(layer=0, strategy="fixed", value=2, oversample=2.5)

    def test_plan_roundtrip(self, tmp_path, rng):
        plan = CompressionPlan(
            [
                PlanEntry(layer=0, strategy="fraction", value=0.5),
                PlanEntry(layer=2, strategy="fixed", value=3, rows=5),
            ],
            seed=7,
        )
        path = tmp_path / "plan.json"
        save_plan(path, plan)
        loaded = load_plan(path)
        assert loaded.seed == 7
        assert [e.layer for e in loaded.entries] == [0, 2]
        assert loaded.entries[1].rows == 5

    def test_eligible_layers(self, rng):
        net = make_conv_teacher(rng)
        assert eligible_layers(net) == [0, 4]

    def test_layer_seed_distinct(self):
        seeds = {layer_seed(0, k) for k in range(16)}
        assert len(seeds) == 16


class TestBuildStudent:
    def test_full_rank_mlp_matches_teacher(self, rng):
        net = make_relu_mlp([32, 24, 16, 10], rng)
        data = rng.normal(size=(256, 32))
        student, report = build_student(net, data, full_rank_plan(net))
        fresh = rng.normal(size=(64, 32))
        got = forward_student(student, fresh)
        want = forward_teacher(net, fresh)
        assert rel_err(got, want) <= 1e-8
        assert report.holdout_samples == 25
        assert all(s.residual_rms <= 1e-8 for s in report.layers)

    def test_full_rank_conv_teacher_matches(self, rng):
        net = make_conv_teacher(rng)
        data = rng.normal(size=(256, 3 * 8 * 8))
        student, _ = build_student(net, data, full_rank_plan(net))
        fresh = rng.normal(size=(32, 3 * 8 * 8))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-8
        assert student.stages[0].pool_group == 4

    def test_linear_low_rank_exactness(self, rng):
        # Identity-activation teacher on inputs of exact rank 6.
        net = TeacherNetwork(
            40,
            [
                Dense(rng.normal(size=(20, 40)) / 6.0),
                Dense(rng.normal(size=(15, 20)) / 4.0),
                Dense(rng.normal(size=(10, 15)) / 4.0),
            ],
        )
        subspace = rng.normal(size=(6, 40))
        data = rng.normal(size=(200, 6)) @ subspace
        plan = CompressionPlan(
            [PlanEntry(layer=i, strategy="fixed", value=6, rows=9) for i in range(3)]
        )
        student, _ = build_student(net, data, plan)
        held_out = rng.normal(size=(50, 6)) @ subspace
        got = forward_student(student, held_out)
        want = forward_teacher(net, held_out)
        assert rel_err(got, want) <= 1e-6

    def test_prefix_layers_run_verbatim(self, rng):
        net = make_relu_mlp([16, 14, 12, 10], rng)
        data = rng.normal(size=(200, 16))
        plan = make_uniform_plan(net, "fraction", 1.0, layers_from=2)
        student, _ = build_student(net, data, plan)
        assert len(student.prefix) == 2
        fresh = rng.normal(size=(40, 16))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-8

    def test_half_fraction_bound_holds_per_sample(self, rng):
        net = make_relu_mlp([20, 18, 14, 8], rng)
        data = rng.normal(size=(300, 20))
        plan = make_uniform_plan(net, "fraction", 0.5, seed=1)
        student, report = build_student(net, data, plan)
        for stats in report.layers:
            assert stats.bound_coefficient >= 1.0
            # Per-sample inequality aggregates into max/rms comparisons.
            assert stats.error_emp_max <= stats.bound_max + 1e-9
            assert stats.error_emp_rms <= stats.bound_rms + 1e-9
        assert forward_student(student, data[:5]).shape == (5, 8)

    def test_deterministic_rebuild(self, rng):
        net = make_relu_mlp([16, 12, 8], rng)
        data = rng.normal(size=(150, 16))
        plan = make_uniform_plan(net, "fraction", 0.5, seed=3)
        s1, _ = build_student(net, data, plan)
        plan2 = make_uniform_plan(net, "fraction", 0.5, seed=3)
        s2, _ = build_student(net, data, plan2)
        for a, b in zip(s1.stages, s2.stages):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
        assert np.array_equal(s1.lift, s2.lift)

    def test_residual_rms_monotone_in_rank(self, rng):
        net = make_relu_mlp([14, 12, 6], rng)
        data = rng.normal(size=(120, 14))
        values = [
            collect_basis(net, data, 0, r).residual_rms for r in range(1, 13)
        ]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

    def test_explicit_rows_below_rank_rejected(self, rng):
        net = make_relu_mlp([10, 8, 6], rng)
        data = rng.normal(size=(80, 10))
        plan = CompressionPlan(
            [
                PlanEntry(layer=0, strategy="fixed", value=4, rows=3),
                PlanEntry(layer=2, strategy="fixed", value=3),
            ]
        )
        with pytest.raises(PlanError):
            build_student(net, data, plan)

    def test_residual_block_in_suffix_rejected(self, rng):
        net = TeacherNetwork(
            6,
            [
                Dense(rng.normal(size=(6, 6))),
                Residual(branches=((), (Dense(rng.normal(size=(6, 6))),))),
                Dense(rng.normal(size=(4, 6))),
            ],
        )
        data = rng.normal(size=(50, 6))
        plan = CompressionPlan(
            [
                PlanEntry(layer=0, strategy="fixed", value=3),
                PlanEntry(layer=2, strategy="fixed", value=3),
            ]
        )
        with pytest.raises(PlanError):
            build_student(net, data, plan)

    def test_degenerate_rank_lowering_still_builds(self, rng):
        # Linear first stage of true rank 2 (an activation would raise it).
        low_rank = rng.normal(size=(12, 2)) @ rng.normal(size=(2, 10))
        net = TeacherNetwork(
            10,
            [Dense(low_rank), Dense(rng.normal(size=(5, 12)))],
        )
        data = rng.normal(size=(100, 10))
        plan = CompressionPlan(
            [
                PlanEntry(layer=0, strategy="fixed", value=6),
                PlanEntry(layer=1, strategy="fraction", value=1.0),
            ]
        )
        with pytest.warns(RankWarning):
            student, report = build_student(net, data, plan)
        assert report.layers[0].rank == 2
        assert report.layers[0].requested_rank == 6
        # Student still evaluates.
        assert forward_student(student, data[:4]).shape == (4, 5)

    def test_energy_threshold_strategy(self, rng):
        basis = np.linalg.qr(rng.normal(size=(16, 3)))[0]
        net = TeacherNetwork(8, [Dense(basis @ rng.normal(size=(3, 8)))])
        data = rng.normal(size=(90, 8))
        plan = CompressionPlan([PlanEntry(layer=0, strategy="energy", value=1e-9)])
        student, report = build_student(net, data, plan)
        assert report.layers[0].rank == 3
        fresh = rng.normal(size=(20, 8))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-6

    def test_pool_after_activation_and_before_are_equivalent(self, rng):
        kernel = rng.normal(size=(2, 1, 3, 3))
        base = [Conv2d(kernel, padding=1)]
        net_ap = TeacherNetwork(
            (1, 6, 6), base + [Activation(ActivationKind.relu()), MaxPool()]
        )
        net_pa = TeacherNetwork(
            (1, 6, 6), base + [MaxPool(), Activation(ActivationKind.relu())]
        )
        data = rng.normal(size=(120, 36))
        s_ap, _ = build_student(net_ap, data, full_rank_plan(net_ap))
        s_pa, _ = build_student(net_pa, data, full_rank_plan(net_pa))
        fresh = rng.normal(size=(10, 36))
        assert np.allclose(
            forward_student(s_ap, fresh), forward_student(s_pa, fresh), atol=1e-10
        )
        assert rel_err(forward_student(s_pa, fresh), forward_teacher(net_pa, fresh)) <= 1e-8

    def test_calibration_subset_is_seeded(self, rng):
        net = make_relu_mlp([10, 8, 6], rng)
        data = rng.normal(size=(500, 10))
        plan = make_uniform_plan(net, "fraction", 0.5, seed=11)
        s1, r1 = build_student(net, data, plan, calibration_limit=64)
        s2, r2 = build_student(net, data, plan, calibration_limit=64)
        assert r1.fit_samples == r2.fit_samples == 58
        assert np.array_equal(s1.stages[0].weight, s2.stages[0].weight)

    def test_two_conv_stages_full_rank(self, rng):
        # conv -> relu -> pool -> conv -> relu -> pool -> dense: the chain
        # must thread pooled selections through two gathered stages.
        net = TeacherNetwork(
            (2, 8, 8),
            [
                Conv2d(rng.normal(size=(3, 2, 3, 3)) / 3.0, rng.normal(size=3) * 0.1,
                       stride=1, padding=1),
                Activation(ActivationKind.relu()),
                MaxPool(),
                Conv2d(rng.normal(size=(4, 3, 3, 3)) / 3.0, rng.normal(size=4) * 0.1,
                       stride=1, padding=1),
                Activation(ActivationKind.relu()),
                MaxPool(),
                Dense(rng.normal(size=(6, 4 * 2 * 2)) / 4.0),
            ],
        )
        data = rng.normal(size=(300, 2 * 8 * 8))
        student, report = build_student(net, data, full_rank_plan(net))
        assert [s.pool_group for s in student.stages] == [4, 4, 1]
        fresh = rng.normal(size=(20, 2 * 8 * 8))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-8

    def test_two_conv_stages_partial_rank_bounded(self, rng):
        net = TeacherNetwork(
            (2, 8, 8),
            [
                Conv2d(rng.normal(size=(3, 2, 3, 3)) / 3.0, stride=1, padding=1),
                Activation(ActivationKind.relu()),
                MaxPool(),
                Conv2d(rng.normal(size=(4, 3, 3, 3)) / 3.0, stride=1, padding=1),
                Activation(ActivationKind.relu()),
                Dense(rng.normal(size=(6, 4 * 4 * 4)) / 8.0),
            ],
        )
        data = rng.normal(size=(300, 2 * 8 * 8))
        plan = make_uniform_plan(net, "fraction", 0.5, seed=2)
        student, report = build_student(net, data, plan)
        for stats in report.layers:
            assert stats.error_emp_max <= stats.bound_max + 1e-9
        assert forward_student(student, data[:3]).shape == (3, 6)

    def test_mixed_activations_full_rank(self, rng):
        net = TeacherNetwork(
            12,
            [
                Dense(rng.normal(size=(10, 12)) / 3.0, rng.normal(size=10) * 0.1),
                Activation(ActivationKind.leaky_relu(0.2)),
                Dense(rng.normal(size=(8, 10)) / 3.0, rng.normal(size=8) * 0.1),
                Activation(ActivationKind.elu(0.8)),
                Dense(rng.normal(size=(5, 8)) / 3.0),
            ],
        )
        data = rng.normal(size=(200, 12))
        student, _ = build_student(net, data, full_rank_plan(net))
        fresh = rng.normal(size=(30, 12))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-8
        assert [s.activation.name for s in student.stages] == [
            "leaky_relu", "elu", "identity",
        ]

    def test_collect_basis_rejects_bad_data(self, rng):
        net = make_relu_mlp([6, 5, 4], rng)
        with pytest.raises(ShapeError):
            collect_basis(net, np.zeros(6), 0, 2)

    def test_strided_conv_full_rank(self, rng):
        net = TeacherNetwork(
            (2, 8, 8),
            [
                Conv2d(rng.normal(size=(3, 2, 3, 3)) / 3.0, rng.normal(size=3) * 0.1,
                       stride=2, padding=1),
                Activation(ActivationKind.relu()),
                Dense(rng.normal(size=(5, 3 * 4 * 4)) / 6.0),
            ],
        )
        data = rng.normal(size=(250, 2 * 8 * 8))
        student, _ = build_student(net, data, full_rank_plan(net))
        fresh = rng.normal(size=(16, 2 * 8 * 8))
        assert rel_err(forward_student(student, fresh), forward_teacher(net, fresh)) <= 1e-8

    def test_memory_cap_switches_to_sketch(self, rng):
        net = make_relu_mlp([10, 16, 6], rng)
        data = rng.normal(size=(100, 10))
        # 100 samples x 16 features = 1600 entries; cap below that sketches.
        auto = collect_basis(net, data, 0, 4, memory_cap=1000)
        assert auto.sketched
        forced = collect_basis(net, data, 0, 4, seed=0, sketch=True)
        assert np.allclose(auto.basis, forced.basis, atol=1e-12)
        exact = collect_basis(net, data, 0, 4, memory_cap=10**9)
        assert not exact.sketched

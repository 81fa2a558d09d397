import numpy as np
import pytest

from madet import optimizer as op
from madet.errors import ShapeMismatchError
from madet.tensor import seeded_rng


class TestSchedule:
    def test_start_of_corrected_ramp(self):
        cfg = op.OptimizerConfig()
        eps, m = op.schedule(cfg, 0)
        assert eps == cfg.epsilon0
        assert m == cfg.m_i

    def test_ramp_end(self):
        cfg = op.OptimizerConfig()
        eps, m = op.schedule(cfg, cfg.ramp_steps)
        assert eps == pytest.approx(cfg.epsilon0 * cfg.decay_f ** cfg.ramp_steps)
        assert m == cfg.m_f
        assert op.schedule(cfg, cfg.ramp_steps + 123)[1] == cfg.m_f

    def test_no_decay_when_f_is_one(self):
        cfg = op.OptimizerConfig(decay_f=1.0)
        for t in (0, 17, 5000):
            assert op.schedule(cfg, t)[0] == cfg.epsilon0

    def test_printed_ramp_variant_starts_at_final_momentum(self):
        cfg = op.OptimizerConfig(momentum_ramp="paper")
        assert op.schedule(cfg, 0)[1] == cfg.m_f
        assert op.schedule(cfg, cfg.ramp_steps)[1] == cfg.m_f
        # halfway, the printed form sits between m_f and m_i
        mid = op.schedule(cfg, cfg.ramp_steps // 2)[1]
        assert mid == pytest.approx(0.5 * (cfg.m_i + cfg.m_f))

    def test_pure_function(self):
        cfg = op.OptimizerConfig()
        assert op.schedule(cfg, 777) == op.schedule(cfg, 777)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            op.OptimizerConfig(epsilon0=0.0)
        with pytest.raises(ValueError):
            op.OptimizerConfig(m_i=0.9, m_f=0.5)
        with pytest.raises(ValueError):
            op.OptimizerConfig(momentum_ramp="sideways")


class TestMaxnormProject:
    def test_zero_matrix_unchanged(self):
        w = np.zeros((4, 7))
        assert np.array_equal(op.maxnorm_project(w, 1.5), w)

    def test_unit_vector_unchanged(self):
        w = np.array([[1.0, 0.0, 0.0]])
        assert np.array_equal(op.maxnorm_project(w, 1.0), w)

    def test_three_four_rescales_to_unit(self):
        w = np.array([[3.0, 4.0]])
        out = op.maxnorm_project(w, 1.0)
        assert np.allclose(out, [[0.6, 0.8]])

    def test_only_oversized_rows_touched(self):
        w = np.array([[0.3, 0.4], [3.0, 4.0]])
        out = op.maxnorm_project(w, 2.5)
        assert np.array_equal(out[0], [0.3, 0.4])
        assert np.hypot(*out[1]) == pytest.approx(2.5)


class TestStep:
    def test_zero_gradient_zero_velocity_keeps_parameters(self):
        w = np.array([1.0, -2.0, 3.0])
        st = op.OptimizerState()
        op.step(st, [w], [np.zeros(3)], op.OptimizerConfig())
        assert np.array_equal(w, [1.0, -2.0, 3.0])

    def test_plain_descent_when_momentum_zero(self):
        cfg = op.OptimizerConfig(epsilon0=1.0, decay_f=1.0, m_i=0.0, m_f=0.0)
        w = np.array([5.0])
        op.step(op.OptimizerState(), [w], [np.array([2.0])], cfg)
        assert w[0] == pytest.approx(3.0)

    def test_five_step_hand_computed_sequence(self):
        # w <- w - 0.1 * (2w) on the scalar quadratic w^2
        cfg = op.OptimizerConfig(epsilon0=0.1, decay_f=1.0, m_i=0.0, m_f=0.0)
        w = np.array([1.0])
        st = op.OptimizerState()
        seen = []
        for _ in range(5):
            op.step(st, [w], [2.0 * w], cfg)
            seen.append(w[0])
        assert seen == pytest.approx([0.8, 0.64, 0.512, 0.4096, 0.32768])

    def test_projection_caps_updated_rows(self):
        cfg = op.OptimizerConfig(epsilon0=1.0, decay_f=1.0, m_i=0.0, m_f=0.0,
                                 max_norm_c=1.0)
        w = np.array([[0.0, 1.0]])
        # gradient drives the row to norm 2c; projection brings it back to c
        op.step(op.OptimizerState(), [w], [np.array([[0.0, -1.0]])], cfg,
                maxnorm_flags=[True])
        assert np.linalg.norm(w[0]) == pytest.approx(1.0)

    def test_thousand_random_steps_respect_norm_constraint(self):
        rng = seeded_rng(42)
        cfg = op.OptimizerConfig(epsilon0=0.05, decay_f=1.0, max_norm_c=3.0)
        fc = rng.standard_normal((16, 24))
        conv = rng.standard_normal((4, 2, 3, 3))
        st = op.OptimizerState()
        params = [fc, conv]
        flags = [True, False]
        for _ in range(1000):
            grads = [rng.standard_normal(p.shape) for p in params]
            op.step(st, params, grads, cfg, flags)
            norms = np.linalg.norm(fc, axis=1)
            assert (norms <= 3.0 + 1e-9).all()
        assert st.t == 1000

    def test_quadratic_toy_converges_with_defaults(self):
        curvature = np.array([30.0, 8.0])
        target = np.array([0.5, -0.3])
        w = np.zeros(2)
        st = op.OptimizerState()
        cfg = op.OptimizerConfig()
        for _ in range(10 ** 4):
            op.step(st, [w], [curvature * (w - target)], cfg)
        assert np.abs(w - target).max() < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            op.step(op.OptimizerState(), [np.zeros(3)], [np.zeros(4)],
                    op.OptimizerConfig())

    def test_count_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            op.step(op.OptimizerState(), [np.zeros(3)], [],
                    op.OptimizerConfig())

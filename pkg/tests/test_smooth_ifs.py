import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifs_oracle import FERN_AFFINE, affine_points, gaussian_pixel_image
from smoothlang.autodiff import DomainError, Tape, backward, gradcheck, lift
from smoothlang.smooth_ifs import (
    Canvas,
    IfsModel,
    PointCloud,
    barnsley_fern,
    fit,
    ifs_loss_and_grad,
    ifs_loss_scalar,
    iterate,
    iterate_array,
    load_model,
    rasterize,
    rasterize_array,
    read_pgm,
    render,
    render_crisp,
    sample_choices,
    save_model,
    write_pgm,
)

SMALL = Canvas(8, 8, -2.0, 2.0, -2.0, 2.0)


def small_model(T=12, seed=4):
    params = [[0.1, -0.5, 0.2, 0.0, -0.1, -0.4], [-0.3, -0.4, -0.1, 0.2, 0.1, -0.5]]
    return IfsModel.create(params, T, seed, sigma=1.0, canvas=SMALL)


class TestIterate:
    def test_single_map(self):
        m = IfsModel([[1.0, 0, 0, 2.0, 0, 0]], [0, 0, 0])
        cloud = iterate(m)
        assert cloud.xs == [1.0, 2.0, 3.0]
        assert cloud.ys == [2.0, 4.0, 6.0]

    def test_matches_affine_oracle(self):
        params, weights, canvas = barnsley_fern()
        model = IfsModel.create(params, 200, 7, weights, canvas=canvas)
        want = affine_points(FERN_AFFINE, model.choices)
        got, truncated = iterate_array(model.params, model.choices, (0.0, 0.0))
        assert not truncated
        assert np.allclose(got, want, atol=1e-12)
        assert np.allclose(iterate(model).values(), want, atol=1e-12)

    def test_divergence_truncates(self):
        m = IfsModel([[0.0, 9.0, 0, 0, 0, 9.0]], [0] * 50, initial_point=(1.0, 1.0))
        cloud = iterate(m)
        assert cloud.truncated and len(cloud) < 50
        pts, truncated = iterate_array(m.params, m.choices, m.initial_point)
        assert truncated and len(pts) == len(cloud)

    def test_model_validation(self):
        with pytest.raises(DomainError):
            IfsModel([[0.0] * 6], [1])
        with pytest.raises(DomainError):
            IfsModel([[math.nan] + [0.0] * 5], [0])


class TestChoices:
    def test_deterministic(self):
        assert np.array_equal(sample_choices(4, 100, 9), sample_choices(4, 100, 9))
        assert not np.array_equal(sample_choices(4, 100, 9), sample_choices(4, 100, 10))

    def test_single_map(self):
        assert sample_choices(1, 5, 0).tolist() == [0] * 5

    def test_frequencies(self):
        w = [0.01, 0.85, 0.07, 0.07]
        counts = np.bincount(sample_choices(4, 100_000, 1, w), minlength=4) / 100_000
        assert np.all(np.abs(counts - w) < 0.01)

    def test_bad_weights(self):
        with pytest.raises(DomainError):
            sample_choices(2, 5, 0, [0.5, 0.6])
        with pytest.raises(DomainError):
            sample_choices(0, 5, 0)


class TestCanvas:
    def test_corners(self):
        c = Canvas(10, 20, 0.0, 1.0, 0.0, 2.0)
        assert c.to_pixel(0.0, 2.0) == (0.0, 0.0)
        assert c.to_pixel(1.0, 0.0) == (10.0, 20.0)

    def test_json(self):
        c = Canvas(10, 20, 0.0, 1.0, -3.0, 2.0)
        assert Canvas.from_json(json.loads(json.dumps(c.to_json()))) == c


class TestRasterize:
    def test_matches_oracle(self):
        params, weights, canvas = barnsley_fern()
        model = IfsModel.create(params, 60, 3, weights, canvas=canvas)
        want = gaussian_pixel_image(
            affine_points(FERN_AFFINE, model.choices), 1.0, 32, 32, [-3.0, 3.0, -0.5, 10.5]
        )
        assert np.allclose(render(model, 1.0), want, atol=1e-12)

    def test_scalar_and_array_agree(self):
        m = small_model(T=30)
        pts, _ = iterate_array(m.params, m.choices, m.initial_point)
        a = rasterize_array(pts, 0.8, SMALL)
        s = np.array(rasterize(iterate(m), 0.8, SMALL), dtype=float)
        assert np.max(np.abs(a - s)) < 1e-15

    def test_range(self):
        params, weights, canvas = barnsley_fern()
        img = render(IfsModel.create(params, 500, 1, weights, canvas=canvas), 0.5)
        assert img.min() >= 0.0 and img.max() < 1.0
        assert img.shape == (32, 32)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=10))
    def test_adding_points_never_darkens(self, pts):
        arr = np.array(pts)
        fewer = rasterize_array(arr[:-1], 1.0, SMALL)
        more = rasterize_array(arr, 1.0, SMALL)
        assert np.all(more >= fewer - 1e-15)

    @pytest.mark.parametrize("sigma", [1.0, 1.5, 3.0])
    def test_footprint_truncation_is_small(self, sigma):
        # a single point: the first omitted ring would be below 1e-4
        edge = math.exp(-8.0) / (2 * math.pi * sigma * sigma)
        assert edge < 1e-4
        img = rasterize_array(np.array([[0.0, 0.0]]), sigma, Canvas(64, 64, -8, 8, -8, 8))
        assert img.max() <= 1.0 / (2 * math.pi * sigma * sigma) + 1e-15

    def test_clamp_keeps_gradient_finite(self):
        t = Tape()
        x = lift(-0.5, t)
        # footprint peak 1/(2 pi 0.09) > 1 at the pixel centre
        img = rasterize(PointCloud([x], [lift(0.5, t)]), 0.3, Canvas(2, 2, -1, 1, -1, 1))
        g = backward(img[0][0])[x]
        assert img[0][0].value <= 1 - 1e-9 and math.isfinite(g)

    def test_bad_sigma(self):
        with pytest.raises(DomainError):
            rasterize_array(np.zeros((1, 2)), 0.0, SMALL)


class TestGradients:
    def test_pixel_gradcheck(self):
        m = small_model(T=8)

        def pixel(xs):
            params = [xs[:6], xs[6:]]
            return rasterize(iterate(m, params), 1.0, SMALL)[3][4]

        rep = gradcheck(pixel, list(m.params.ravel()), h=1e-6, tol=1e-4)
        assert rep.passed, rep

    def test_loss_gradcheck(self):
        m = small_model(T=10)
        target = np.random.default_rng(0).uniform(0, 0.3, size=(8, 8))

        def loss(xs):
            return ifs_loss_scalar(m, [xs[:6], xs[6:]], target, 1.0)

        rep = gradcheck(loss, list(m.params.ravel()), h=1e-6, tol=1e-4)
        assert rep.passed, rep

    def test_adjoint_matches_tape(self):
        m = small_model(T=25)
        target = np.random.default_rng(1).uniform(0, 0.3, size=(8, 8))
        loss, grad, _ = ifs_loss_and_grad(m, m.params, target, 1.2)
        t = Tape()
        flat = [lift(v, t) for v in m.params.ravel()]
        ref = ifs_loss_scalar(m, [flat[:6], flat[6:]], target, 1.2)
        assert loss == pytest.approx(ref.value, rel=1e-12)
        assert np.allclose(grad.ravel(), backward(ref).of(flat), rtol=1e-9, atol=1e-15)

    def test_shape_mismatch(self):
        m = small_model()
        with pytest.raises(DomainError):
            ifs_loss_and_grad(m, m.params, np.zeros((3, 3)), 1.0)


class TestFit:
    def test_true_parameters_are_a_fixed_point(self):
        m = small_model(T=40)
        res = fit(m, render(m, 1.0), [1.0], steps_per_sigma=5)
        assert res.loss_history[0] == 0.0
        assert np.allclose(res.model.params, m.params)

    def test_descends_from_perturbation(self):
        params, weights, canvas = barnsley_fern()
        truth = IfsModel.create(params, 300, 7, weights, canvas=canvas)
        target = render(truth, 1.0)
        start = truth.with_params(params * 1.1)
        res = fit(start, target, [2.0, 1.0], steps_per_sigma=40, lr=0.01)
        assert len(res.loss_history) == 80
        assert res.sigma_history == [2.0] * 40 + [1.0] * 40
        before, _, _ = ifs_loss_and_grad(start, start.params, target, 1.0)
        after, _, _ = ifs_loss_and_grad(res.model, res.model.params, target, 1.0)
        assert after < 0.8 * before
        assert res.model.sigma == 1.0

    def test_increasing_schedule_warns(self):
        m = small_model()
        with pytest.warns(UserWarning):
            fit(m, render(m), [1.0, 2.0], steps_per_sigma=1)

    def test_bad_schedule(self):
        m = small_model()
        with pytest.raises(DomainError):
            fit(m, render(m), [], steps_per_sigma=1)


class TestFiles:
    def test_pgm_roundtrip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        assert back.shape == (3, 4)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_pgm_rejects_other_formats(self, tmp_path):
        (tmp_path / "b.pgm").write_text("P5\n1 1\n255\n0\n")
        with pytest.raises(DomainError):
            read_pgm(tmp_path / "b.pgm")

    def test_model_roundtrip(self, tmp_path):
        params, weights, canvas = barnsley_fern()
        m = IfsModel.create(params, 100, 5, weights, canvas=canvas, sigma=2.0)
        save_model(tmp_path / "m.json", m)
        back = load_model(tmp_path / "m.json")
        assert np.array_equal(back.params, m.params)
        assert np.array_equal(back.choices, m.choices)
        assert back.canvas == m.canvas and back.sigma == 2.0

    def test_unseeded_model_cannot_be_saved(self):
        with pytest.raises(DomainError):
            IfsModel([[0.0] * 6], [0]).to_json()

    def test_crisp_render(self):
        m = IfsModel([[0.6, 0, 0, 0.8, 0, 0]], [0], canvas=Canvas(4, 4, 0, 1, 0, 1))
        img = render_crisp(m)
        assert img.sum() == 1.0 and img[0, 2] == 1.0

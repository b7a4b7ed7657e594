import math

import numpy as np
import pytest

import wtvbilevel.bilevel as bl
from wtvbilevel.bilevel import (
    TRACE_COLUMNS,
    BilevelAborted,
    BilevelConfig,
    early_stop_check,
    gd_bil,
    project_beta,
    read_trace_csv,
    write_trace_csv,
)
from wtvbilevel.energy import ParamMap
from wtvbilevel.imaging import NoiseSpec, add_noise, center_crop
from wtvbilevel.io import load_field
from wtvbilevel.losses import whiteness_value


def piecewise(n=24, seed=0):
    r = np.random.default_rng(seed)
    k1, k2 = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x = 0.25 + 0.5 * ((k1 > n // 3) & (k2 < 2 * n // 3))
    y = x + 0.05 * r.standard_normal(x.shape)
    return x, y


class TestEarlyStopCheck:
    cfg = BilevelConfig(stop_threshold=0.9081, eps_outer=1e-6)

    @pytest.mark.parametrize("delta,q,expected", [(1e-9, 1.0, False), (0.5, 0.89, False), (0.5, 0.95, True)])
    def test_truth_table(self, delta, q, expected):
        assert early_stop_check(delta, q, self.cfg) is expected

    def test_boundary_is_inclusive_for_q(self):
        assert early_stop_check(0.5, 0.9081, self.cfg)

    def test_needs_threshold(self):
        with pytest.raises(ValueError):
            early_stop_check(1.0, 1.0, BilevelConfig())


class TestConfig:
    @pytest.mark.parametrize("field", ["eta", "eps_outer", "lambda_cap", "tol_lower", "epsilon"])
    def test_positive_fields(self, field):
        with pytest.raises(ValueError):
            BilevelConfig(**{field: 0.0})

    def test_bad_loss_mode_scaling(self):
        for kw in ({"loss": "l1"}, {"mode": "patch"}, {"step_scaling": "auto"}, {"max_outer_iters": 0}):
            with pytest.raises(ValueError):
                BilevelConfig(**kw)

    def test_standard_settings(self):
        c = BilevelConfig.for_method("white", "wtv")
        assert (c.loss, c.mode, c.eta, c.epsilon) == ("whiteness", "per_pixel", 1000.0, 0.1)
        c = BilevelConfig.for_method("mse", "tv")
        assert (c.loss, c.mode, c.eta, c.epsilon) == ("mse", "scalar", 100.0, 0.01)
        assert c.beta0 == 1.0 and c.lambda_cap == 5.0 and c.tol_lower == 1e-6 and c.eps_outer == 1e-6
        assert c.max_outer_iters == 3000
        assert c.beta_cap == pytest.approx(math.log(5))

    def test_step_factor(self):
        n = 100
        assert BilevelConfig.for_method("white", "wtv").step_factor(n) == 1.0
        assert BilevelConfig.for_method("mse", "wtv").step_factor(n) == n
        assert BilevelConfig.for_method("white", "tv").step_factor(n) == 1 / n
        assert BilevelConfig.for_method("mse", "tv").step_factor(n) == 1.0
        assert BilevelConfig.for_method("mse", "wtv", step_scaling="raw").step_factor(n) == 1.0


def test_projection_clips_exactly():
    b = np.array([0.0, 2.0, math.log(5) + 1e-15])
    out = project_beta(b, math.log(5))
    assert np.all(np.exp(out) <= 5.0) and out[0] == 0.0
    assert project_beta(3.0, math.log(5)) == math.log(5)


class TestGdBil:
    def test_lambda_never_exceeds_cap(self):
        x, y = piecewise()
        seen = []
        cfg = BilevelConfig.for_method("white", "wtv", max_outer_iters=15)
        gd_bil(y, cfg, callback=lambda rec, p, xs: seen.append(float(np.max(p.lam))))
        assert seen and max(seen) <= 5.0

    def test_default_start_is_e(self):
        x, y = piecewise()
        res = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=1))
        assert res.trace[0].lambda_min == pytest.approx(math.e)
        assert res.trace[0].lambda_max == pytest.approx(math.e)

    def test_do_while_and_trace_order(self):
        x, y = piecewise()
        res = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=4), x_ref=x)
        assert [t.iter for t in res.trace] == [0, 1, 2, 3]
        assert res.stop_reason == "max_iters"
        assert all(np.isfinite(t.ipsnr) and np.isfinite(t.issim) for t in res.trace)
        res1 = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=1))
        assert len(res1.trace) == 1

    def test_returned_pair_is_consistent(self):
        x, y = piecewise()
        res = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=3))
        assert res.final_q == pytest.approx(whiteness_value(res.x, y), rel=1e-12)

    def test_warm_and_cold_start_agree(self):
        # a natural crop: on the piecewise-constant fixture beta runs off to -100,
        # where rounding alone separates the two runs
        from skimage import data

        x = center_crop(data.camera() / 255.0, 32)
        y = add_noise(x, NoiseSpec("gaussian", 0.05, seed=1))
        betas = {}
        for warm in (True, False):
            cfg = BilevelConfig.for_method("white", "wtv", max_outer_iters=10, tol_lower=1e-12, cg_tol=1e-12,
                                           warm_start=warm)
            got = []
            gd_bil(y, cfg, callback=lambda rec, p, xs: got.append(np.array(p.beta)))
            betas[warm] = got
        assert len(betas[True]) == len(betas[False]) == 10
        for a, b in zip(betas[True], betas[False]):
            assert np.max(np.abs(a - b)) <= 1e-6

    @pytest.mark.parametrize("reg", ["tv", "wtv"])
    def test_mse_against_data_decreases(self, reg):
        x, y = piecewise(16)
        cfg = BilevelConfig.for_method("mse", reg, max_outer_iters=8)
        res = gd_bil(y, cfg, x_ref=y)
        q = [t.Q for t in res.trace]
        assert all(b <= a for a, b in zip(q, q[1:]))
        assert res.trace[-1].lambda_mean < res.trace[0].lambda_mean

    def test_supervised_tv_improves(self):
        x, y = piecewise(24)
        res = gd_bil(y, BilevelConfig.for_method("mse", "tv", max_outer_iters=200), x_ref=x)
        assert res.trace[-1].ipsnr > 3.0
        assert res.params.mode == "scalar"

    def test_whiteness_floor_returns_penultimate(self):
        x, y = piecewise()
        free = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=40))
        q = [t.Q for t in free.trace]
        floor = 0.5 * (q[3] + q[4]) if q[4] < q[3] else None
        assert floor is not None
        cfg = BilevelConfig.for_method("white", "wtv", max_outer_iters=40, stop_threshold=floor)
        res = gd_bil(y, cfg)
        assert res.stop_reason == "whiteness_floor"
        assert res.final_q >= floor and res.next_q < floor
        assert res.final_q == res.trace[-1].Q
        assert res.final_q == pytest.approx(whiteness_value(res.x, y), rel=1e-12)

    def test_converged_branch(self):
        x, y = piecewise(12)
        cfg = BilevelConfig.for_method("mse", "tv", eps_outer=1e3, max_outer_iters=50)
        res = gd_bil(y, cfg, x_ref=x)
        assert res.stop_reason == "converged" and len(res.trace) == 1

    def test_errors(self):
        x, y = piecewise(8)
        with pytest.raises(ValueError):
            gd_bil(y, BilevelConfig.for_method("mse", "tv"))
        with pytest.raises(ValueError):
            gd_bil(y, BilevelConfig.for_method("white", "wtv"), beta0=ParamMap(0.0, "scalar"))

    def test_non_finite_update_aborts_with_trace(self, monkeypatch):
        x, y = piecewise(8)
        real = bl.hypergrad
        calls = []

        def broken(*a, **k):
            hg = real(*a, **k)
            calls.append(1)
            if len(calls) == 3:
                hg.grad_beta = hg.grad_beta * np.nan
            return hg

        monkeypatch.setattr(bl, "hypergrad", broken)
        with pytest.raises(BilevelAborted) as err:
            gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=10))
        assert len(err.value.trace) == 2


class TestTraceIO:
    def test_csv_round_trip(self, tmp_path):
        x, y = piecewise(12)
        res = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=3), x_ref=x)
        path = tmp_path / "t.csv"
        write_trace_csv(path, res.trace)
        assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
        back = read_trace_csv(path)
        assert [r.Q for r in back] == [r.Q for r in res.trace]
        assert [r.ipsnr for r in back] == [r.ipsnr for r in res.trace]

    def test_timing_can_be_zeroed(self, tmp_path):
        x, y = piecewise(12)
        res = gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=2))
        write_trace_csv(tmp_path / "t.csv", res.trace, timing=False)
        assert all(r.seconds == 0.0 for r in read_trace_csv(tmp_path / "t.csv"))

    def test_snapshots(self, tmp_path):
        x, y = piecewise(12)
        gd_bil(y, BilevelConfig.for_method("white", "wtv", max_outer_iters=5),
               snapshot_dir=tmp_path / "snap", snapshot_stride=2)
        names = sorted(p.name for p in (tmp_path / "snap").glob("*.f64"))
        assert names == ["beta_00000.f64", "beta_00002.f64", "beta_00004.f64"]
        beta, meta = load_field(tmp_path / "snap" / "beta_00000.f64")
        assert meta["kind"] == "beta" and np.allclose(beta, 1.0)

"""Butterfly diagnostics: Durrleman's g, violation intervals, reports and the implied density."""

import json

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

from neurovol.arbitrage import (
    durrleman_g,
    g_from_derivatives,
    risk_neutral_density,
    ssvi_analytic,
    ssvi_surface_fn,
    surface_report,
    violation_intervals,
)
from neurovol.errors import DomainError

K_GRID = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.02), 10)


def flat(k, tau):
    return np.full(np.shape(k), 0.2)


def concave(k, tau):
    """A smile bent down so hard that its density turns negative at the money"""
    return 0.2 - 5.0 * np.asarray(k) ** 2


class TestDurrleman:
    def test_flat_smile(self):
        diag = durrleman_g(flat, 1.0, K_GRID)
        np.testing.assert_allclose(diag.g_values, 1.0, atol=1e-12)
        assert diag.clean and diag.min_g == pytest.approx(1.0)
        assert diag.violation_measure == 0.0

    def test_closed_form_at_the_money(self):
        assert g_from_derivatives(np.array([0.0]), np.array([0.04]), np.array([0.0]), np.array([0.0]))[0] == 1.0
        # k=0: g = 1 - w'^2/4 (1/w + 1/4) + w''/2
        g = g_from_derivatives(np.array([0.0]), np.array([0.04]), np.array([0.1]), np.array([0.2]))[0]
        assert g == pytest.approx(1.0 - 0.0025 * (25.0 + 0.25) + 0.1)

    def test_admissible_ssvi_is_clean(self, ssvi_params):
        for tau in (0.1, 0.5, 1.0, 2.0):
            diag = durrleman_g(None, tau, K_GRID, analytic=ssvi_analytic(ssvi_params))
            assert diag.min_g >= -1e-8
            assert diag.clean

    @pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
    def test_finite_differences_match_closed_form(self, ssvi_params, tau):
        fd = durrleman_g(ssvi_surface_fn(ssvi_params), tau, K_GRID, fd_step=1e-3)
        exact = durrleman_g(None, tau, K_GRID, analytic=ssvi_analytic(ssvi_params))
        np.testing.assert_allclose(fd.g_values, exact.g_values, atol=1e-4)

    def test_concave_slice_violates(self):
        k = np.linspace(-0.1, 0.1, 21)
        diag = durrleman_g(concave, 1.0, k)
        assert not diag.clean
        assert diag.min_g < 0
        lo, hi = diag.violation_intervals[0]
        assert lo <= 0.0 <= hi
        assert diag.violation_measure > 0
        assert risk_neutral_density(concave, 1.0, [0.0])[0] < 0

    def test_invalid_inputs(self):
        with pytest.raises(DomainError):
            durrleman_g(flat, 1.0, [])
        with pytest.raises(DomainError):
            durrleman_g(flat, 1.0, K_GRID, fd_step=0.0)
        with pytest.raises(DomainError):
            durrleman_g(lambda k, tau: np.full(np.shape(k), -0.1), 1.0, K_GRID)


class TestViolationIntervals:
    def test_runs(self):
        k = np.arange(6.0)
        g = np.array([1.0, -1.0, -1.0, 1.0, 0.5, -1.0])
        assert violation_intervals(k, g) == [(1.0, 2.0), (5.0, 5.0)]

    def test_tolerance(self):
        k = np.arange(3.0)
        assert violation_intervals(k, np.array([-1e-9, 0.0, -1e-12])) == []


class TestDensity:
    def test_flat_smile_is_lognormal(self):
        k = np.linspace(-0.5, 0.5, 11)
        strikes = np.exp(k)
        sd = 0.2
        expected = norm.pdf(-k / sd - sd / 2) / (strikes * sd)
        np.testing.assert_allclose(risk_neutral_density(flat, 1.0, k), expected, rtol=1e-4)

    def test_density_tracks_g(self, ssvi_params):
        k = np.linspace(-0.5, 0.5, 21)
        tau = 1.0
        surface = ssvi_surface_fn(ssvi_params)
        w = surface(k, tau) ** 2 * tau
        g = np.array(durrleman_g(None, tau, k, analytic=ssvi_analytic(ssvi_params)).g_values)
        d_minus = -k / np.sqrt(w) - np.sqrt(w) / 2
        expected = g * norm.pdf(d_minus) / (np.exp(k) * np.sqrt(w))
        np.testing.assert_allclose(risk_neutral_density(surface, tau, k), expected, atol=1e-4)


class TestSurfaceReport:
    @staticmethod
    def _one_bad_slice(k, tau):
        return concave(k, tau) if tau == 1.0 else flat(k, tau)

    def test_fraction_clean(self):
        k = np.linspace(-0.1, 0.1, 21)
        taus = [0.25, 0.5, 1.0, 2.0]
        report = surface_report(self._one_bad_slice, taus, k, max_workers=1)
        assert report.fraction_clean == pytest.approx(3 / 4)
        assert [s.tau for s in report.slices] == taus
        bad = report.slices[2]
        assert report.total_violation_measure == pytest.approx(bad.violation_measure)

    def test_clean_surface(self, ssvi_params):
        report = surface_report(None, [0.5, 1.0], K_GRID, analytic=ssvi_analytic(ssvi_params))
        assert report.fraction_clean == 1.0
        assert report.total_violation_measure == 0.0

    def test_empty_grids(self):
        with pytest.raises(DomainError):
            surface_report(flat, [], K_GRID)
        with pytest.raises(DomainError):
            surface_report(flat, [1.0], [])

    def test_outputs(self, tmp_path):
        k = np.linspace(-0.1, 0.1, 21)
        report = surface_report(self._one_bad_slice, [0.5, 1.0], k)
        document = json.loads(report.write_json(tmp_path / "arb.json").read_text())
        assert document["summary"]["n_slices"] == 2
        assert document["summary"]["fraction_clean"] == 0.5
        assert document["slices"][1]["violation_intervals"]

        frame = pd.read_csv(report.write_csv(tmp_path / "arb.csv"))
        assert list(frame.columns) == ["tau", "k", "g", "violation"]
        assert len(frame) == 42
        assert frame.loc[frame.tau == 0.5, "violation"].sum() == 0
        assert frame.loc[frame.tau == 1.0, "violation"].sum() > 0

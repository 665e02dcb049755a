"""Kuenzel constitutive relations for coupled heat and moisture transport.

All functions broadcast over numpy arrays, so a single call can evaluate a
whole element field or a batch of realisations at once.  Temperatures are in
degrees Celsius, relative humidity is dimensionless.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

PARAM_NAMES = ("dwf", "w80", "lambda0", "btcs", "mu", "a", "cs", "rhos")

#: prior mean and standard deviation of each material parameter (masonry)
PRIOR_TABLE = {
    "dwf": (100.0, 20.0),
    "w80": (50.0, 10.0),
    "lambda0": (0.3, 0.1),
    "btcs": (10.0, 2.0),
    "mu": (12.0, 5.0),
    "a": (0.6, 0.2),
    "cs": (900.0, 100.0),
    "rhos": (1650.0, 50.0),
}

KELVIN = 273.15
PHI_TOL = 1e-9
B_DENOM_TOL = 1e-12
PHI_CLAMP = (1e-4, 1.0 - 1e-4)


class CoefficientError(ValueError):
    """Raised when a constitutive relation is evaluated at a singular point."""


@dataclass(frozen=True)
class MaterialParams:
    """The eight Kuenzel parameters; each field is a scalar or an array.

    Arrays of a common shape describe spatially varying (per element) or
    batched parameter sets.
    """

    dwf: np.ndarray | float  # water content increment [kg m^-3]
    w80: np.ndarray | float  # water content at phi = 0.8 [kg m^-3]
    lambda0: np.ndarray | float  # dry thermal conductivity [W m^-1 K^-1]
    btcs: np.ndarray | float  # thermal conductivity supplement [-]
    mu: np.ndarray | float  # vapour diffusion resistance factor [-]
    a: np.ndarray | float  # water absorption coefficient [kg m^-2 s^-0.5]
    cs: np.ndarray | float  # specific heat capacity [J kg^-1 K^-1]
    rhos: np.ndarray | float  # bulk density [kg m^-3]

    @classmethod
    def prior_means(cls) -> "MaterialParams":
        return cls(**{k: v[0] for k, v in PRIOR_TABLE.items()})

    @classmethod
    def from_dict(cls, values: dict) -> "MaterialParams":
        missing = [k for k in PARAM_NAMES if k not in values]
        if missing:
            raise KeyError(f"missing material parameters: {missing}")
        return cls(**{k: values[k] for k in PARAM_NAMES})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, func) -> "MaterialParams":
        """Apply ``func`` to every field."""
        return replace(self, **{k: func(v) for k, v in self.as_dict().items()})

    @property
    def wf(self):
        """Free water saturation."""
        return np.add(self.w80, self.dwf)

    def validate(self) -> None:
        for name, value in self.as_dict().items():
            arr = np.asarray(value, dtype=float)
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise CoefficientError(f"material parameter {name!r} must be finite and positive")


def approximation_factor(p: MaterialParams):
    """Sorption isotherm shape factor ``b``, fixed so that w(0.8) = w80."""
    w80 = np.asarray(p.w80, dtype=float)
    wf = np.asarray(p.wf, dtype=float)
    denom = w80 - 0.8 * wf
    if np.any(np.abs(denom) < B_DENOM_TOL):
        raise CoefficientError("degenerate approximation factor: w80 - 0.8 wf vanishes")
    b = 0.8 * (w80 - wf) / denom
    if np.any(b <= 1.0):
        raise CoefficientError("approximation factor must exceed 1 (requires dwf > 0)")
    return b


def _gap(b, phi):
    gap = b - phi
    if np.any(np.abs(gap) < PHI_TOL):
        raise CoefficientError("relative humidity coincides with the approximation factor")
    return gap


def thermal_conductivity(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    return p.lambda0 * (1.0 + p.btcs * p.wf * (b - 1.0) * phi / (p.rhos * gap))


def thermal_conductivity_dphi(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    return p.lambda0 * p.btcs * p.wf * (b - 1.0) * b / (p.rhos * gap**2)


def _check_theta(theta):
    if np.any(np.asarray(theta) <= -KELVIN):
        raise CoefficientError("temperature below absolute zero")


def evaporation_enthalpy(theta):
    _check_theta(theta)
    expo = 0.267 + 3.67e-4 * theta
    return 2.5008e6 * (KELVIN / (theta + KELVIN)) ** expo


def evaporation_enthalpy_dtheta(theta):
    tk = theta + KELVIN
    expo = 0.267 + 3.67e-4 * theta
    return evaporation_enthalpy(theta) * (3.67e-4 * np.log(KELVIN / tk) - expo / tk)


def vapour_permeability(theta, mu):
    if np.any(np.asarray(mu) <= 0):
        raise CoefficientError("diffusion resistance factor must be positive")
    _check_theta(theta)
    return 1.9446e-12 / mu * (theta + KELVIN) ** 0.81


def vapour_permeability_dtheta(theta, mu):
    return 0.81 * vapour_permeability(theta, mu) / (theta + KELVIN)


_PSAT_A = 17.08
_PSAT_B = 234.18


def saturation_pressure(theta):
    denom = _PSAT_B + np.asarray(theta, dtype=float)
    if np.any(np.abs(denom) < 1e-12):
        raise CoefficientError("saturation pressure pole at theta = -234.18")
    return 611.0 * np.exp(_PSAT_A * theta / denom)


def saturation_pressure_dtheta(theta):
    g1 = _PSAT_A * _PSAT_B / (_PSAT_B + theta) ** 2
    return saturation_pressure(theta) * g1


def saturation_pressure_d2theta(theta):
    g1 = _PSAT_A * _PSAT_B / (_PSAT_B + theta) ** 2
    g2 = -2.0 * _PSAT_A * _PSAT_B / (_PSAT_B + theta) ** 3
    return saturation_pressure(theta) * (g1**2 + g2)


def _liquid_exponent(p, phi, b, gap):
    wf = p.wf
    if np.any(np.abs(wf - 1.0) < PHI_TOL):
        raise CoefficientError("free water saturation equal to 1 makes the exponent singular")
    # wf - 1 is kept verbatim from the model definition
    return 3.0 * wf * (b - 1.0) * phi / (gap * (wf - 1.0))


def liquid_conduction(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    expo = _liquid_exponent(p, phi, b, gap)
    return 3.8 * p.a**2 / p.wf * 10.0**expo * b * (b - 1.0) / gap**2


def liquid_conduction_dphi(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    wf = p.wf
    dexpo = 3.0 * wf * (b - 1.0) * b / (gap**2 * (wf - 1.0))
    return liquid_conduction(p, phi, b) * (np.log(10.0) * dexpo + 2.0 / gap)


def enthalpy(p: MaterialParams, theta):
    return p.rhos * p.cs * theta


def enthalpy_capacity(p: MaterialParams):
    """dH/dtheta; the enthalpy is linear in temperature."""
    return p.rhos * p.cs


def water_content(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    return p.wf * (b - 1.0) * phi / gap


def water_capacity(p: MaterialParams, phi, b=None):
    """dw/dphi in closed form."""
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    return p.wf * (b - 1.0) * b / gap**2


def water_capacity_dphi(p: MaterialParams, phi, b=None):
    if b is None:
        b = approximation_factor(p)
    gap = _gap(b, phi)
    return 2.0 * p.wf * (b - 1.0) * b / gap**3


def clamp_phi(phi):
    """Clip relative humidity into the valid range; returns (clipped, n_clipped)."""
    lo, hi = PHI_CLAMP
    phi = np.asarray(phi, dtype=float)
    clipped = np.clip(phi, lo, hi)
    return clipped, int(np.count_nonzero(clipped != phi))

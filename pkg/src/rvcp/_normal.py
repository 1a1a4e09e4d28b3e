"""Standard normal CDF and quantile function.

``norm_ppf`` is Wichura's AS241 (PPND16) rational approximation, accurate to
about 1 part in 1e16 over the open unit interval.  ``norm_cdf`` delegates to
``scipy.special.ndtr`` (Cephes), which carries comparable accuracy.
"""

import numpy as np
from scipy.special import ndtr

__all__ = ["norm_cdf", "norm_sf", "norm_pdf", "norm_ppf", "norm_isf"]

_SPLIT1 = 0.425
_SPLIT2 = 5.0
_CONST1 = 0.180625
_CONST2 = 1.6

# AS241 coefficients, highest degree last.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4, 5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
      6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
      5.47593808499534494600e-4, 1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
      1.42151175831644588870e-7, 2.04426310338993978564e-15)


def _poly(coef, x):
    out = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        out = out * x + c
    return out


def norm_cdf(x):
    """Lower-tail probability of the standard normal."""
    return ndtr(x)


def norm_sf(x):
    """Upper-tail probability ``1 - norm_cdf(x)`` without cancellation."""
    return ndtr(-np.asarray(x, dtype=float))


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def norm_ppf(p):
    """Quantile function of the standard normal (AS241).

    Returns ``-inf``/``inf`` at 0 and 1 and ``nan`` outside ``[0, 1]``.
    Scalars in, scalar out.
    """
    p_arr = np.asarray(p, dtype=float)
    scalar = p_arr.ndim == 0
    p_arr = np.atleast_1d(p_arr)
    out = np.empty_like(p_arr)

    q = p_arr - 0.5
    central = np.abs(q) <= _SPLIT1
    if central.any():
        qc = q[central]
        r = _CONST1 - qc * qc
        out[central] = qc * _poly(_A, r) / _poly(_B, r)

    tail = ~central & (p_arr > 0.0) & (p_arr < 1.0)
    if tail.any():
        qt = q[tail]
        # distance to the nearer boundary, computed exactly for p < 0.5
        r = np.where(qt < 0.0, p_arr[tail], 1.0 - p_arr[tail])
        r = np.sqrt(-np.log(r))
        val = np.empty_like(r)
        near = r <= _SPLIT2
        rn = r[near] - _CONST2
        val[near] = _poly(_C, rn) / _poly(_D, rn)
        rf = r[~near] - _SPLIT2
        val[~near] = _poly(_E, rf) / _poly(_F, rf)
        out[tail] = np.where(qt < 0.0, -val, val)

    out[p_arr == 0.0] = -np.inf
    out[p_arr == 1.0] = np.inf
    out[(p_arr < 0.0) | (p_arr > 1.0) | np.isnan(p_arr)] = np.nan
    return float(out[0]) if scalar else out


def norm_isf(p):
    """Upper-tail quantile: the ``x`` with ``norm_sf(x) == p``.

    Uses the symmetry ``isf(p) = -ppf(p)`` so small tail probabilities keep
    full relative precision.
    """
    return -norm_ppf(p)

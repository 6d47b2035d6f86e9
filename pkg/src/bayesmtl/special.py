"""Scalar special functions: digamma, log-gamma and their multivariate forms.

Both digamma and log-gamma shift the argument up to ``_SHIFT`` with the
recurrences psi(x+1) = psi(x) + 1/x and lgamma(x+1) = lgamma(x) + log(x),
then evaluate an asymptotic series. At x >= 10 the truncated series error is
below 1e-16, so accuracy is limited by the shift arithmetic.
"""

import math

from .errors import DomainError

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_{2k} / (2k) for the digamma expansion, k = 1..7
_DIGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# B_{2k} / (2k (2k - 1)) for Stirling's series, k = 1..7
_STIRLING_COEFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _check_positive(x, name="x"):
    x = float(x)
    if not x > 0.0 or not math.isfinite(x):
        raise DomainError(f"{name} must be a positive finite number, got {x!r}")
    return x


def digamma(x):
    x = _check_positive(x)
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    power = inv2
    for c in _DIGAMMA_COEFS:
        series += c * power
        power *= inv2
    return acc + math.log(x) - 0.5 / x - series


def log_gamma(x):
    x = _check_positive(x)
    prod = 1.0
    log_prod = 0.0
    while x < _SHIFT:
        prod *= x
        # keep the running product away from underflow for tiny x
        if prod < 1e-200:
            log_prod += math.log(prod)
            prod = 1.0
        x += 1.0
    log_prod += math.log(prod)
    inv = 1.0 / x
    inv2 = inv * inv
    series = 0.0
    power = inv
    for c in _STIRLING_COEFS:
        series += c * power
        power *= inv2
    return (x - 0.5) * math.log(x) - x + _HALF_LOG_2PI + series - log_prod


def _check_multivariate(x, p):
    if int(p) != p or p < 1:
        raise DomainError(f"dimension p must be a positive integer, got {p!r}")
    x = float(x)
    if not x > (p - 1) / 2.0:
        raise DomainError(f"x must exceed (p - 1)/2 = {(p - 1) / 2.0}, got {x!r}")
    return x, int(p)


def multivariate_digamma(x, p):
    """Sum of psi(x + (1 - i)/2) for i = 1..p."""
    x, p = _check_multivariate(x, p)
    return sum(digamma(x + (1 - i) / 2.0) for i in range(1, p + 1))


def multivariate_log_gamma(x, p):
    """log Gamma_p(x) = p(p-1)/4 log(pi) + sum_i log Gamma(x + (1 - i)/2)."""
    x, p = _check_multivariate(x, p)
    const = p * (p - 1) / 4.0 * math.log(math.pi)
    return const + sum(log_gamma(x + (1 - i) / 2.0) for i in range(1, p + 1))


def log_beta(a, b):
    a = _check_positive(a, "a")
    b = _check_positive(b, "b")
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)

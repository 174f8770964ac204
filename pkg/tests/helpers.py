"""Shared test helpers."""

import numpy as np

from plrbias.lti_core import Polynomial, RationalFilter


def stable_poly(gen: np.random.Generator, degree: int, radius: float = 0.9) -> Polynomial:
    """Monic polynomial in q^-1 with all roots (in z) inside ``radius``."""
    roots = []
    while len(roots) < degree:
        if degree - len(roots) >= 2 and gen.random() < 0.5:
            r = radius * np.sqrt(gen.random())
            a = gen.uniform(0, np.pi)
            roots += [r * np.exp(1j * a), r * np.exp(-1j * a)]
        else:
            roots.append(gen.uniform(-radius, radius))
    return Polynomial(np.real(np.poly(roots)))


def random_stable_filter(gen, n_den=2, n_num=2, delay=1) -> RationalFilter:
    b = np.r_[np.zeros(delay), gen.normal(size=n_num)]
    return RationalFilter(b, stable_poly(gen, n_den))

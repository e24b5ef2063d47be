import numpy as np
import pytest

from lstm_resilience.lstm_core import LstmParams, random_params
from lstm_resilience.stability_cert import certify

SIMPLIFIED = dict(W_range=(0.0, 0.1), U_range=(0.0, 1.0), b_range=(0.0, 0.0), Uy_range=(0.0, 1.0))


def simplified_model(rng) -> LstmParams:
    return random_params(rng, 1, 1, 1, x_max=1.0, **SIMPLIFIED)


def small_model(rng, n_x=2, n_c=3, n_y=2, n_layers=1, scale=0.5) -> LstmParams:
    r = (-scale, scale)
    return random_params(rng, n_x, n_c, n_y, W_range=r, U_range=r, b_range=r, Uy_range=(-1, 1),
                         by_range=(-0.5, 0.5), n_layers=n_layers)


def certified_models(rng, count, k=0, max_tries=10_000, **kw):
    """Rejection-sample ``count`` models that certify at ``k``."""
    kw.setdefault("scale", 0.3)
    out = []
    for _ in range(max_tries):
        p = small_model(rng, **kw)
        if certify(p, k).verdict:
            out.append(p)
            if len(out) == count:
                return out
    raise RuntimeError(f"only {len(out)} of {count} sampled models certified")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)

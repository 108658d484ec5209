import numpy as np
import pytest

from mipool import MultipleImputationSet


def make_set(rng, n=40, p=5, D=2, family="gaussian", beta=None, mask_frac=0.0):
    """Random multiply-imputed set; masked cells get independent noise per copy."""
    base = rng.standard_normal((n, p))
    if beta is None:
        beta = np.zeros(p)
        beta[: min(3, p)] = [1.5, -1.0, 0.5][: min(3, p)]
    eta = base @ beta
    if family == "gaussian":
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    mask = np.zeros((n, p), dtype=bool)
    if mask_frac > 0:
        mask[:, :-1] = rng.uniform(size=(n, p - 1)) < mask_frac
    X = np.repeat(base[None], D, axis=0).copy()
    for d in range(D):
        X[d][mask] = base[mask] + rng.standard_normal(int(mask.sum()))
    return MultipleImputationSet(X=X, y=y, mask=mask, subject_id=np.arange(n))


def textbook_lasso(X, y, lam, tol=1e-10, max_iter=5000, warm=None):
    """Naive cyclic coordinate descent for (1/2n)||y - mu - X b||^2 + lam ||b||_1.

    Recomputes the full residual for every coordinate; deliberately shares no
    code with the package solver.
    """
    n, p = X.shape
    if warm is None:
        mu, b = 0.0, np.zeros(p)
    else:
        mu, b = warm[0], warm[1].copy()
    xsq = (X**2).sum(axis=0) / n
    for _ in range(max_iter):
        mu_old, b_old = mu, b.copy()
        mu = float(np.mean(y - X @ b))
        for j in range(p):
            resid = y - mu - X @ b + X[:, j] * b[j]
            z = float(X[:, j] @ resid) / n
            b[j] = np.sign(z) * max(abs(z) - lam, 0.0) / xsq[j]
        if max(abs(mu - mu_old), float(np.abs(b - b_old).max())) < tol:
            break
    return mu, b


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

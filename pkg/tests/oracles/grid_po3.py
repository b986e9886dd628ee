"""Dense-grid posterior medians for the three-category proportional-odds model.

Standalone oracle: uses only numpy/scipy and writes the model directly in
terms of the intercepts (alpha_2, alpha_3) and the log-OR beta, so it shares
no code with the package.  A flat Dirichlet prior on the control-arm
probabilities becomes, in alpha coordinates, the Jacobian of
(alpha_2, alpha_3) -> (expit(alpha_2), expit(alpha_3)), i.e. the product of
the two logistic densities, restricted to alpha_2 > alpha_3.  beta has a
N(0, 100^2) prior.

Run ``python tests/oracles/grid_po3.py`` to regenerate the frozen values in
``tests/test_acceptance.py``.
"""
import numpy as np
from scipy import integrate, optimize
from scipy.special import expit, log_expit

COUNTS = np.array([[27, 43, 32], [21, 45, 32]], dtype=float)
PRIOR_SD_BETA = 100.0


def log_post(a2, a3, b):
    a2, a3, b = np.broadcast_arrays(a2, a3, b)
    out = np.zeros(a2.shape)
    for arm in (0, 1):
        e2 = a2 + b * arm
        e3 = a3 + b * arm
        # P(Y=1) = 1 - expit(e2), P(Y=2) = expit(e2) - expit(e3), P(Y=3) = expit(e3)
        p2 = expit(e2) - expit(e3)
        with np.errstate(divide="ignore", invalid="ignore"):
            out += COUNTS[arm, 0] * log_expit(-e2)
            out += COUNTS[arm, 1] * np.log(np.where(p2 > 0, p2, np.nan))
            out += COUNTS[arm, 2] * log_expit(e3)
    out += log_expit(a2) + log_expit(-a2) + log_expit(a3) + log_expit(-a3)
    out += -0.5 * (b / PRIOR_SD_BETA) ** 2
    return np.where((a2 > a3) & np.isfinite(out), out, -np.inf)


def mode_and_se():
    f = lambda v: -float(log_post(*v))
    res = optimize.minimize(f, np.array([1.0, -1.0, 0.0]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    x = res.x
    h = 1e-4
    H = np.empty((3, 3))
    for i in range(3):
        for k in range(3):
            ei = np.eye(3)[i] * h
            ek = np.eye(3)[k] * h
            H[i, k] = (f(x + ei + ek) - f(x + ei - ek) - f(x - ei + ek) + f(x - ei - ek)) / (4 * h * h)
    return x, np.sqrt(np.diag(np.linalg.inv(H)))


def medians(n_grid=201, half_width=6.0):
    x, se = mode_and_se()
    axes = [np.linspace(x[i] - half_width * se[i], x[i] + half_width * se[i], n_grid)
            for i in range(3)]
    A2, A3, B = np.meshgrid(*axes, indexing="ij")
    lp = log_post(A2, A3, B)
    w = np.exp(lp - lp[np.isfinite(lp)].max())
    out = []
    for i in range(3):
        other = tuple(a for a in range(3) if a != i)
        marg = w
        for ax in sorted(other, reverse=True):
            marg = integrate.trapezoid(marg, axes[ax], axis=ax)
        cdf = integrate.cumulative_trapezoid(marg, axes[i], initial=0.0)
        cdf /= cdf[-1]
        out.append(float(np.interp(0.5, cdf, axes[i])))
    return np.array(out)


if __name__ == "__main__":
    print("medians (alpha_2, alpha_3, beta):", np.round(medians(), 6).tolist())

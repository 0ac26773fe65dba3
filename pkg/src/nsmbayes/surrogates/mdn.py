"""Conditional Gaussian mixture density network.

A tanh trunk on theta feeds three heads: mixture logits, component means and
raw diagonal variances (softplus + floor). Score and Hessian w.r.t. x are
closed forms of the mixture; nothing here differentiates through the trunk,
since the trunk never sees x.
"""

import numpy as np

from .. import tapenets
from ..autodiff import softplus
from ..nets import Mlp

LOG_2PI = np.log(2.0 * np.pi)


class Mdn:
    family = "mdn"

    def __init__(self, x_dim, theta_dim, components=10, hidden_width=50,
                 var_floor=1e-4, seed=0):
        self.x_dim = int(x_dim)
        self.theta_dim = int(theta_dim)
        self.components = int(components)
        self.var_floor = float(var_floor)
        rng = np.random.default_rng(seed)
        self.net = Mlp(theta_dim, 0, [hidden_width],
                       {"logits": components,
                        "means": components * x_dim,
                        "scales": components * x_dim},
                       rng=rng)
        self.standardizer = None
        self.theta_standardizer = None

    # -- mixture parameters ---------------------------------------------------

    def _theta_internal(self, theta, n):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim == 1:
            theta = np.broadcast_to(theta, (n, theta.size))
        if self.theta_standardizer is not None:
            theta = self.theta_standardizer.transform(theta)
        return theta

    def mixture_params(self, theta, n=1):
        """(weights log, means, variances) for internal (standardised-x) space."""
        theta = self._theta_internal(theta, n)
        out = self.net.forward(theta)
        K, d = self.components, self.x_dim
        logits = out["logits"]
        logw = logits - _logsumexp(logits, axis=1, keepdims=True)
        means = out["means"].reshape(-1, K, d)
        variances = softplus(out["scales"].reshape(-1, K, d)) + self.var_floor
        return logw, means, variances

    def _internal_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.standardizer is None:
            return x, np.ones(self.x_dim), 0.0
        return (self.standardizer.transform(x), self.standardizer.scale,
                np.log(self.standardizer.scale).sum())

    def _component_logdensities(self, z, logw, means, variances):
        diff = z[:, None, :] - means
        quad = (diff ** 2 / variances).sum(axis=2)
        logdet = (np.log(variances)).sum(axis=2)
        log_norm = -0.5 * (quad + logdet + self.x_dim * LOG_2PI)
        return logw + log_norm

    # -- density interface -------------------------------------------------------

    def log_density(self, x, theta):
        z, _, log_scale_sum = self._internal_x(x)
        logw, means, variances = self.mixture_params(theta, z.shape[0])
        comp = self._component_logdensities(z, logw, means, variances)
        out = _logsumexp(comp, axis=1) - log_scale_sum
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite mixture log-density")
        return out

    def responsibilities(self, x, theta):
        z, _, _ = self._internal_x(x)
        logw, means, variances = self.mixture_params(theta, z.shape[0])
        comp = self._component_logdensities(z, logw, means, variances)
        rho = np.exp(comp - _logsumexp(comp, axis=1, keepdims=True))
        return rho

    def score_x(self, x, theta):
        z, scale, _ = self._internal_x(x)
        logw, means, variances = self.mixture_params(theta, z.shape[0])
        comp = self._component_logdensities(z, logw, means, variances)
        rho = np.exp(comp - _logsumexp(comp, axis=1, keepdims=True))
        comp_scores = -(z[:, None, :] - means) / variances       # (n,K,d)
        score_z = np.einsum("nk,nkd->nd", rho, comp_scores)
        return score_z / scale

    def hessian_diag_x(self, x, theta):
        z, scale, _ = self._internal_x(x)
        logw, means, variances = self.mixture_params(theta, z.shape[0])
        comp = self._component_logdensities(z, logw, means, variances)
        rho = np.exp(comp - _logsumexp(comp, axis=1, keepdims=True))
        g = -(z[:, None, :] - means) / variances
        mean_g = np.einsum("nk,nkd->nd", rho, g)
        # Sum_k rho_k (g_k^2 - 1/var_k) + diag Cov_rho(g) collapses to:
        diag_z = (np.einsum("nk,nkd->nd", rho, g ** 2 - 1.0 / variances)
                  - mean_g ** 2)
        return diag_z / scale ** 2

    def hessian_trace_x(self, x, theta):
        return self.hessian_diag_x(x, theta).sum(axis=-1)

    def score_growth_constant(self):
        """For the certificate ||score_z|| <= (1/var_floor)(||z|| + max_k ||mean_k||)."""
        return 1.0 / self.var_floor

    # -- training support ----------------------------------------------------------

    def param_vector(self):
        return self.net.param_vector()

    def set_param_vector(self, vec):
        self.net.set_param_vector(vec)

    def tape_loss(self, tape, p, theta_z, x_z):
        """Negative log-likelihood of the batch on the tape (internal coords)."""
        n = x_z.shape[0]
        K, d = self.components, self.x_dim
        params = tapenets.unpack_params(tape, p, self.net)
        out = tapenets.mlp_forward(tape, params, self.net, theta_z)
        logits = out["logits"]
        logw = tape.add(logits, tape.multiply(
            tape.constant(np.full((n, 1), -1.0)),
            tape.logsumexp(logits, axis=1, keepdims=True)))
        means = tape.reshape(out["means"], (n, K, d))
        variances = tape.add(tape.softplus(tape.reshape(out["scales"], (n, K, d))),
                             tape.constant(np.full((n, K, d), self.var_floor)))
        diff = tape.add(tape.constant(x_z[:, None, :]),
                        tape.multiply(tape.constant(np.full((n, K, d), -1.0)), means))
        quad = tape.sum(tape.divide(tape.square(diff), variances), axis=2)
        logdet = tape.sum(tape.log(variances), axis=2)
        log_norm = tape.multiply(
            tape.constant(np.full((n, K), -0.5)),
            tape.add(tape.add(quad, logdet), tape.constant(np.full((n, K), d * LOG_2PI))))
        total = tape.logsumexp(tape.add(logw, log_norm), axis=1)
        return tape.multiply(tape.constant(np.array(-1.0 / n)), tape.sum(total))

    def numpy_loss(self, theta_z, x_z):
        """Validation NLL in internal coordinates, bypassing both standardizers."""
        out = self.net.forward(theta_z)
        K, d = self.components, self.x_dim
        logits = out["logits"]
        logw = logits - _logsumexp(logits, axis=1, keepdims=True)
        means = out["means"].reshape(-1, K, d)
        variances = softplus(out["scales"].reshape(-1, K, d)) + self.var_floor
        comp = self._component_logdensities(x_z, logw, means, variances)
        return float(-np.mean(_logsumexp(comp, axis=1)))


def _logsumexp(a, axis=None, keepdims=False):
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out

"""Masked autoregressive flow with analytic input derivatives.

Each transform maps v -> u with u_i = (v_i - mu_i(v_<i, theta)) / sigma_i(v_<i,
theta); a coordinate reversal sits between consecutive transforms and the base
density is standard normal. Score and Hessian w.r.t. x are propagated through
the stack with exact chain/product-rule recursions: per transform we hold the
Jacobian J = dv/dx and the per-component Hessians H[c] = d^2 v_c / dx dx' and
push them through

    du_i/dv = (e_i - dmu_i - u_i dsigma_i) / sigma_i
    d2u_i/dv2 = -Hmu_i/s - sym(outer(e_i - dmu_i, dsig_i))/s^2
                - u_i Hsig_i/s + 2 u_i outer(dsig_i, dsig_i)/s^2

followed by the scalar-composition rule f(v(x)):
grad = J' g,  hess = J' Hv J + sum_c g_c H[c]. d_X is at most a few, so full
d x d blocks are cheap.
"""

import numpy as np

from .. import tapenets
from ..nets import MaskedMlp

LOG_2PI = np.log(2.0 * np.pi)


class Maf:
    family = "maf"

    def __init__(self, x_dim, theta_dim, n_transforms=5, hidden_width=50,
                 hidden_layers=2, seed=0):
        self.x_dim = int(x_dim)
        self.theta_dim = int(theta_dim)
        rng = np.random.default_rng(seed)
        self.transforms = [
            MaskedMlp(x_dim, theta_dim, [hidden_width] * hidden_layers,
                      {"mu": x_dim, "s": x_dim}, softplus_heads=("s",), rng=rng)
            for _ in range(n_transforms)
        ]
        self.standardizer = None
        self.theta_standardizer = None

    # -- coordinate helpers ------------------------------------------------------

    def _internal_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.standardizer is None:
            return x, np.ones(self.x_dim), 0.0
        return (self.standardizer.transform(x), self.standardizer.scale,
                np.log(self.standardizer.scale).sum())

    def _theta_internal(self, theta, n):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim == 1:
            theta = np.broadcast_to(theta, (n, theta.size))
        if self.theta_standardizer is not None:
            theta = self.theta_standardizer.transform(theta)
        return theta

    # -- density -------------------------------------------------------------------

    def forward_to_base(self, x, theta):
        """Map data to base-normal space; returns (z, log_det) in internal coords."""
        v, _, _ = self._internal_x(x)
        theta = self._theta_internal(theta, v.shape[0])
        log_det = np.zeros(v.shape[0])
        last = len(self.transforms) - 1
        for l, net in enumerate(self.transforms):
            out = net.forward(v, theta)
            sigma = out["s"]
            u = (v - out["mu"]) / sigma
            log_det -= np.log(sigma).sum(axis=1)
            v = u[:, ::-1] if l < last else u
        return v, log_det

    def log_density(self, x, theta):
        _, _, log_scale_sum = self._internal_x(x)
        z, log_det = self.forward_to_base(x, theta)
        base = -0.5 * (z ** 2).sum(axis=1) - 0.5 * self.x_dim * LOG_2PI
        out = base + log_det - log_scale_sum
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite flow log-density")
        return out

    # -- score / hessian --------------------------------------------------------------

    def _score_hess_internal(self, z_in, theta):
        """Gradient and full Hessian of log q w.r.t. internal coordinates."""
        n, d = z_in.shape
        v = z_in
        J = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        H = np.zeros((n, d, d, d))
        grad = np.zeros((n, d))
        hess = np.zeros((n, d, d))
        eye = np.eye(d)
        last = len(self.transforms) - 1
        for l, net in enumerate(self.transforms):
            out, jac, hfull = net.input_derivs(v, theta, hessian="full")
            mu, sigma = out["mu"], out["s"]
            Jmu, Jsig = jac["mu"], jac["s"]
            Hmu, Hsig = hfull["mu"], hfull["s"]
            u = (v - mu) / sigma

            # derivatives of the -sum log sigma term, composed down to x
            g_v = (Jsig / sigma[..., None]).sum(axis=1)                   # (n,d)
            Hv = (Hsig / sigma[..., None, None]).sum(axis=1) \
                - np.einsum("nia,nib->nab", Jsig / sigma[..., None],
                            Jsig / sigma[..., None])
            grad -= np.einsum("nab,na->nb", J, g_v)
            hess -= (np.einsum("nab,nac,ncd->nbd", J, Hv, J)
                     + np.einsum("na,nabd->nbd", g_v, H))

            # u and its v-derivatives
            Jg = eye[None] - Jmu                                           # (n,d,d)
            Ju = (Jg - u[..., None] * Jsig) / sigma[..., None]
            inv_s = 1.0 / sigma
            cross = Jg[..., :, None] * Jsig[..., None, :]
            sym = cross + np.swapaxes(cross, -1, -2)
            Hu = (-Hmu * inv_s[..., None, None]
                  - sym * (inv_s ** 2)[..., None, None]
                  - u[..., None, None] * Hsig * inv_s[..., None, None]
                  + 2.0 * u[..., None, None]
                  * Jsig[..., :, None] * Jsig[..., None, :]
                  * (inv_s ** 2)[..., None, None])

            # compose to x coordinates
            Jx = np.einsum("nic,ncb->nib", Ju, J)
            Hx = (np.einsum("nab,niac,ncd->nibd", J, Hu, J)
                  + np.einsum("nic,ncbd->nibd", Ju, H))
            if l < last:
                u, Jx, Hx = u[:, ::-1], Jx[:, ::-1], Hx[:, ::-1]
            v, J, H = u, Jx, Hx

        # base standard normal: -1/2 ||z||^2
        grad -= np.einsum("nc,ncb->nb", v, J)
        hess -= (np.einsum("ncb,ncd->nbd", J, J) + np.einsum("nc,ncbd->nbd", v, H))
        return grad, hess

    def score_x(self, x, theta):
        z_in, scale, _ = self._internal_x(x)
        theta = self._theta_internal(theta, z_in.shape[0])
        grad, _ = self._score_hess_internal(z_in, theta)
        return grad / scale

    def hessian_diag_x(self, x, theta):
        z_in, scale, _ = self._internal_x(x)
        theta = self._theta_internal(theta, z_in.shape[0])
        _, hess = self._score_hess_internal(z_in, theta)
        return np.diagonal(hess, axis1=-2, axis2=-1) / scale ** 2

    def hessian_trace_x(self, x, theta):
        return self.hessian_diag_x(x, theta).sum(axis=-1)

    def score_and_hessian_diag_x(self, x, theta):
        z_in, scale, _ = self._internal_x(x)
        theta = self._theta_internal(theta, z_in.shape[0])
        grad, hess = self._score_hess_internal(z_in, theta)
        return grad / scale, np.diagonal(hess, axis1=-2, axis2=-1) / scale ** 2

    # -- sampling -----------------------------------------------------------------

    def _invert_transform(self, net, u, theta):
        v = np.zeros_like(u)
        for i in range(self.x_dim):
            out = net.forward(v, theta)
            v[:, i] = out["mu"][:, i] + out["s"][:, i] * u[:, i]
        return v

    def sample(self, theta, count, rng):
        """Draw from the flow by inverting the stack coordinate by coordinate."""
        z = rng.standard_normal((count, self.x_dim))
        theta = self._theta_internal(theta, count)
        cur = z
        for l in reversed(range(len(self.transforms))):
            v = self._invert_transform(self.transforms[l], cur, theta)
            cur = v if l == 0 else v[:, ::-1]
        if self.standardizer is not None:
            cur = self.standardizer.inverse(cur)
        return cur

    # -- training support ------------------------------------------------------------

    def param_vector(self):
        return np.concatenate([t.param_vector() for t in self.transforms])

    def set_param_vector(self, vec):
        pos = 0
        for t in self.transforms:
            size = t.param_vector().size
            t.set_param_vector(vec[pos:pos + size])
            pos += size

    def tape_loss(self, tape, p, theta_z, x_z):
        """Negative log-likelihood on the tape (internal coordinates)."""
        n, d = x_z.shape
        theta_node = tape.constant(theta_z)
        v = tape.constant(x_z)
        neg_log_det = None
        pos = 0
        last = len(self.transforms) - 1
        for l, net in enumerate(self.transforms):
            size = net.param_vector().size
            params = tapenets.unpack_params(
                tape, tape.getitem(p, slice(pos, pos + size)), net)
            pos += size
            out = tapenets.mlp_forward(tape, params, net, v, cond=theta_node)
            sigma = out["s"]
            u = tape.divide(
                tape.add(v, tape.multiply(tape.constant(np.full((n, d), -1.0)),
                                          out["mu"])),
                sigma)
            ld = tape.sum(tape.log(sigma), axis=1)
            neg_log_det = ld if neg_log_det is None else tape.add(neg_log_det, ld)
            v = tape.getitem(u, (slice(None), slice(None, None, -1))) if l < last else u
        base = tape.multiply(tape.constant(np.full(n, -0.5)),
                             tape.sum(tape.square(v), axis=1))
        logq = tape.add(base, tape.multiply(tape.constant(np.full(n, -1.0)),
                                            neg_log_det))
        # the -d/2 log 2pi constant does not affect gradients; keep values exact
        logq = tape.add(logq, tape.constant(np.full(n, -0.5 * d * LOG_2PI)))
        return tape.multiply(tape.constant(np.array(-1.0 / n)), tape.sum(logq))

    def numpy_loss(self, theta_z, x_z):
        v = x_z
        log_det = np.zeros(v.shape[0])
        last = len(self.transforms) - 1
        for l, net in enumerate(self.transforms):
            out = net.forward(v, theta_z)
            sigma = out["s"]
            u = (v - out["mu"]) / sigma
            log_det -= np.log(sigma).sum(axis=1)
            v = u[:, ::-1] if l < last else u
        logq = -0.5 * (v ** 2).sum(axis=1) - 0.5 * self.x_dim * LOG_2PI + log_det
        return float(-np.mean(logq))

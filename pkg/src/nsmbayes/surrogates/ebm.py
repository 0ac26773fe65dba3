"""Exponential-family energy-based surrogate: log q(x|theta) = T(x)'theta + b(x) + const.

T and b are separate tanh MLPs with linear heads (bounded features, so the
implied density is normalisable). Scores and Hessian traces never need the
normalisation constant. All public evaluations are in the ORIGINAL data
coordinates; if a standardizer is attached, the affine chain rule is applied
(jacobian / scale, hessian / scale^2) before anything is returned.
"""

import numpy as np

from .. import tapenets
from ..nets import Mlp


class ExpFamEbm:
    family = "ebm"

    def __init__(self, x_dim, theta_dim, hidden_width=128, seed=0, t_hidden=None):
        """`t_hidden=[]` forces a linear T head (useful for analytic oracles)."""
        rng = np.random.default_rng(seed)
        t_layers = [hidden_width] if t_hidden is None else list(t_hidden)
        self.x_dim = int(x_dim)
        self.theta_dim = int(theta_dim)
        self.hidden_width = int(hidden_width)
        self.t_net = Mlp(x_dim, 0, t_layers, {"T": theta_dim}, rng=rng)
        self.b_net = Mlp(x_dim, 0, [hidden_width], {"b": 1}, rng=rng)
        self.standardizer = None
        self.theta_standardizer = None

    # -- coordinate handling -------------------------------------------------

    def _to_internal(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.standardizer is None:
            return x, np.ones(self.x_dim)
        return self.standardizer.transform(x), self.standardizer.scale

    def internal_theta(self, theta):
        """Coefficient vector the features contract against (T(x)' theta_int)."""
        theta = np.asarray(theta, dtype=np.float64)
        if self.theta_standardizer is None:
            return theta
        return self.theta_standardizer.transform(theta[None])[0]

    # -- features ------------------------------------------------------------

    def ebm_features(self, x, hessians=False):
        """Everything the conjugate posterior needs, in original coordinates.

        Returns a dict with T (n,k), b (n,), jac_T (n,k,d), jac_b (n,d),
        hess_diag_T (n,k,d), hess_diag_b (n,d), trace_T (n,k), trace_b (n,)
        and, when hessians=True, the full hess_T (n,k,d,d) / hess_b (n,d,d).
        """
        z, scale = self._to_internal(x)
        mode = "full" if hessians else "diag"
        t_out, t_jac, t_hess = self.t_net.input_derivs(z, hessian=mode)
        b_out, b_jac, b_hess = self.b_net.input_derivs(z, hessian=mode)
        inv = 1.0 / scale
        feats = {
            "T": t_out["T"],
            "b": b_out["b"][:, 0],
            "jac_T": t_jac["T"] * inv,
            "jac_b": b_jac["b"][:, 0, :] * inv,
        }
        if hessians:
            outer = inv[:, None] * inv[None, :]
            feats["hess_T"] = t_hess["T"] * outer
            feats["hess_b"] = b_hess["b"][:, 0] * outer
            feats["hess_diag_T"] = np.diagonal(feats["hess_T"], axis1=-2, axis2=-1)
            feats["hess_diag_b"] = np.diagonal(feats["hess_b"], axis1=-2, axis2=-1)
        else:
            feats["hess_diag_T"] = t_hess["T"] * inv ** 2
            feats["hess_diag_b"] = b_hess["b"][:, 0, :] * inv ** 2
        feats["trace_T"] = feats["hess_diag_T"].sum(axis=-1)
        feats["trace_b"] = feats["hess_diag_b"].sum(axis=-1)
        return feats

    # -- density interface -----------------------------------------------------

    def log_unnorm_density(self, x, theta):
        feats = self.ebm_features(x)
        return feats["T"] @ self.internal_theta(theta) + feats["b"]

    def score_x(self, x, theta):
        feats = self.ebm_features(x)
        return self.score_from_features(feats, self.internal_theta(theta))

    def hessian_diag_x(self, x, theta):
        feats = self.ebm_features(x)
        theta = self.internal_theta(theta)
        return np.einsum("nkd,k->nd", feats["hess_diag_T"], theta) + feats["hess_diag_b"]

    def hessian_trace_x(self, x, theta):
        return self.hessian_diag_x(x, theta).sum(axis=-1)

    @staticmethod
    def score_from_features(feats, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return np.einsum("nkd,k->nd", feats["jac_T"], theta) + feats["jac_b"]

    # -- training support --------------------------------------------------------

    def param_vector(self):
        return np.concatenate([self.t_net.param_vector(), self.b_net.param_vector()])

    def set_param_vector(self, vec):
        nt = self.t_net.param_vector().size
        self.t_net.set_param_vector(vec[:nt])
        self.b_net.set_param_vector(vec[nt:])

    def tape_loss(self, tape, p, theta_z, x_z):
        """Score-matching objective mean[ ||score||^2 + 2 tr hess ] on the tape.

        theta_z, x_z are the (already standardised) training batch; the
        objective is expressed in the training coordinates.
        """
        n = x_z.shape[0]
        nt = self.t_net.param_vector().size
        p_t = tape.getitem(p, slice(0, nt))
        p_b = tape.getitem(p, slice(nt, p.value.size))
        params_t = tapenets.unpack_params(tape, p_t, self.t_net)
        params_b = tapenets.unpack_params(tape, p_b, self.b_net)
        _, jac_T, tr_T = tapenets.mlp_score_features(tape, params_t, self.t_net, x_z)["T"]
        _, jac_b, tr_b = tapenets.mlp_score_features(tape, params_b, self.b_net, x_z)["b"]
        theta_node = tape.constant(theta_z[:, None, :])          # (n,1,k)
        score = tape.add(tape.matmul(theta_node, jac_T), jac_b)  # (n,1,d)
        norm2 = tape.sum(tape.square(score), axis=(1, 2))        # (n,)
        trace = tape.add(
            tape.reshape(tape.matmul(theta_node, tape.reshape(tr_T, tr_T.shape + (1,))),
                         (n,)),
            tape.reshape(tr_b, (n,)),
        )
        per_point = tape.add(norm2, tape.multiply(tape.constant(np.full(n, 2.0)), trace))
        return tape.multiply(tape.constant(np.array(1.0 / n)), tape.sum(per_point))

    def numpy_loss(self, theta_z, x_z):
        """Validation-path J_m in training coordinates (no tape)."""
        mode = "diag"
        t_out, t_jac, t_hess = self.t_net.input_derivs(x_z, hessian=mode)
        b_out, b_jac, b_hess = self.b_net.input_derivs(x_z, hessian=mode)
        score = (np.einsum("nkd,nk->nd", t_jac["T"], theta_z) + b_jac["b"][:, 0, :])
        trace = (np.einsum("nkd,nk->n", t_hess["T"], theta_z)
                 + b_hess["b"][:, 0, :].sum(axis=-1))
        return float(np.mean((score ** 2).sum(axis=1) + 2.0 * trace))

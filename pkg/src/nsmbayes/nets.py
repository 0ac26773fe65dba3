"""Feed-forward and masked MLPs with analytic input derivatives.

Hidden activations are tanh; output heads are named linear maps, optionally
followed by softplus. First and second derivatives with respect to the input
x are closed-form layer recursions (the conditioning vector is held fixed),
so no nested autodiff is ever needed:

    J_{l+1} = diag(1 - h_{l+1}^2) W_{l+1} J_l
    H_{l+1}[u] = (1-h_u^2) sum_v W[u,v] H_l[v] - 2 h_u (1-h_u^2) g_u g_u^T

with g_u the rows of W_{l+1} J_l. A diagonal-only fast path propagates
per-unit Hessian diagonals instead of full d x d blocks.
"""

import json
import warnings

import numpy as np

from .autodiff import sigmoid, softplus


def xavier_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def made_degrees(input_dim, hidden_widths):
    """Sequential MADE degrees: inputs 1..d, hidden units cycle over 1..d-1."""
    degrees = [np.arange(1, input_dim + 1)]
    for width in hidden_widths:
        degrees.append(np.arange(width) % max(1, input_dim - 1) + min(1, input_dim - 1))
    return degrees


def made_masks(input_dim, hidden_widths):
    """Hidden masks M[u,v] = 1{deg_u >= deg_v} and the strict output mask."""
    degrees = made_degrees(input_dim, hidden_widths)
    masks = []
    for prev, cur in zip(degrees[:-1], degrees[1:]):
        masks.append((cur[:, None] >= prev[None, :]).astype(np.float64))
    out_degrees = np.arange(1, input_dim + 1)
    last = degrees[-1]
    out_mask = (out_degrees[:, None] > last[None, :]).astype(np.float64)
    return masks, out_mask


class Mlp:
    """Plain tanh MLP; any conditioning vector is concatenated to the input.

    `heads` maps a head name to its output dimension; names listed in
    `softplus_heads` get a final softplus. With `hidden_widths=[]` the heads
    act directly on the (concatenated) input, i.e. the net is affine.
    """

    kind = "mlp"

    def __init__(self, input_dim, cond_dim, hidden_widths, heads,
                 softplus_heads=(), rng=None, bias_init=0.01):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.cond_dim = int(cond_dim)
        self.hidden_widths = [int(w) for w in hidden_widths]
        self.head_specs = [(name, int(dim), name in softplus_heads)
                           for name, dim in heads.items()]
        self.layers = []
        fan_in = self.input_dim + self.cond_dim
        for width in self.hidden_widths:
            self.layers.append({
                "W": xavier_uniform(rng, width, fan_in),
                "b": np.full(width, bias_init),
            })
            fan_in = width
        self.heads = {}
        for name, dim, _ in self.head_specs:
            self.heads[name] = {
                "A": xavier_uniform(rng, dim, fan_in),
                "c": np.full(dim, bias_init),
            }

    # -- evaluation ---------------------------------------------------------

    def _stack_input(self, x, cond):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.cond_dim:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.ndim == 1:
                cond = np.broadcast_to(cond, (x.shape[0], cond.size))
            return np.concatenate([x, cond], axis=1)
        return x

    def forward(self, x, cond=None):
        h = self._stack_input(x, cond)
        for layer in self.layers:
            h = np.tanh(h @ layer["W"].T + layer["b"])
        out = {}
        for name, _, use_softplus in self.head_specs:
            y = h @ self.heads[name]["A"].T + self.heads[name]["c"]
            out[name] = softplus(y) if use_softplus else y
        return out

    def input_derivs(self, x, cond=None, hessian="none"):
        """Head outputs plus Jacobians (n, out, d) and Hessians w.r.t. x.

        hessian: "none", "diag" -> (n, out, d) diagonals, "full" -> (n, out, d, d).
        """
        full = hessian == "full"
        inp = self._stack_input(x, cond)
        n = inp.shape[0]
        d = self.input_dim
        h = inp
        # Jacobian of the stacked input w.r.t. x is [I_d; 0].
        J = np.broadcast_to(
            np.concatenate([np.eye(d), np.zeros((self.cond_dim, d))], axis=0),
            (n, d + self.cond_dim, d),
        ).copy()
        D = np.zeros((n, d + self.cond_dim, d))
        H = np.zeros((n, d + self.cond_dim, d, d)) if full else None
        for layer in self.layers:
            h, J, D, H = _tanh_layer(h, J, D, H, layer["W"], layer["b"], full)
        outputs, jac, hess = {}, {}, {}
        for name, _, use_softplus in self.head_specs:
            y, Jy, Dy, Hy = _head(h, J, D, H, self.heads[name]["A"],
                                  self.heads[name]["c"], use_softplus, full)
            outputs[name] = y
            jac[name] = Jy
            if hessian != "none":
                hess[name] = Hy if full else Dy
        return outputs, jac, hess

    # -- parameters ----------------------------------------------------------

    def param_entries(self):
        """Ordered (key, array) pairs defining the flat parameter layout."""
        entries = []
        for i, layer in enumerate(self.layers):
            entries.append((("layer", i, "W"), layer["W"]))
            entries.append((("layer", i, "b"), layer["b"]))
        for name, _, _ in self.head_specs:
            entries.append((("head", name, "A"), self.heads[name]["A"]))
            entries.append((("head", name, "c"), self.heads[name]["c"]))
        return entries

    def param_layout(self):
        layout = []
        start = 0
        for key, arr in self.param_entries():
            layout.append((key, arr.shape, start))
            start += arr.size
        return layout, start

    def param_vector(self):
        return np.concatenate([arr.ravel() for _, arr in self.param_entries()])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for _, arr in self.param_entries():
            arr[...] = vec[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != vec.size:
            raise ValueError(f"parameter vector length {vec.size}, expected {pos}")

    # -- serialization --------------------------------------------------------

    def manifest(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "cond_dim": self.cond_dim,
            "hidden_widths": self.hidden_widths,
            "heads": [{"name": n, "dim": d, "softplus": s}
                      for n, d, s in self.head_specs],
            "param_count": int(self.param_vector().size),
        }

    @classmethod
    def from_manifest(cls, manifest):
        net = cls(
            manifest["input_dim"], manifest["cond_dim"], manifest["hidden_widths"],
            {h["name"]: h["dim"] for h in manifest["heads"]},
            softplus_heads=tuple(h["name"] for h in manifest["heads"] if h["softplus"]),
        )
        return net


class MaskedMlp:
    """MADE-style masked MLP: output block i depends only on x_j with j < i.

    The conditioning vector is wired into every layer (including the heads)
    through unmasked weights, so it never disturbs the autoregressive masks.
    Every head emits one output per input coordinate.
    """

    kind = "masked-mlp"

    def __init__(self, input_dim, cond_dim, hidden_widths, heads,
                 softplus_heads=(), rng=None, bias_init=0.01):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.cond_dim = int(cond_dim)
        self.hidden_widths = [int(w) for w in hidden_widths]
        self.head_specs = [(name, int(dim), name in softplus_heads)
                           for name, dim in heads.items()]
        for name, dim, _ in self.head_specs:
            if dim != self.input_dim:
                raise ValueError(f"masked head {name!r} must have dim == input_dim")
        masks, out_mask = made_masks(self.input_dim, self.hidden_widths)
        self.out_mask = out_mask
        self.layers = []
        fan_in = self.input_dim
        for width, mask in zip(self.hidden_widths, masks):
            self.layers.append({
                "W": xavier_uniform(rng, width, fan_in),
                "M": mask,
                "V": xavier_uniform(rng, width, self.cond_dim) if self.cond_dim else None,
                "b": np.full(width, bias_init),
            })
            fan_in = width
        self.heads = {}
        for name, dim, _ in self.head_specs:
            self.heads[name] = {
                "A": xavier_uniform(rng, dim, fan_in),
                "V": xavier_uniform(rng, dim, self.cond_dim) if self.cond_dim else None,
                "c": np.full(dim, bias_init),
            }

    def _cond(self, cond, n):
        if not self.cond_dim:
            return None
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.size))
        return cond

    def forward(self, x, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cond = self._cond(cond, x.shape[0])
        h = x
        for layer in self.layers:
            pre = h @ (layer["W"] * layer["M"]).T + layer["b"]
            if cond is not None:
                pre = pre + cond @ layer["V"].T
            h = np.tanh(pre)
        out = {}
        for name, _, use_softplus in self.head_specs:
            head = self.heads[name]
            y = h @ (head["A"] * self.out_mask).T + head["c"]
            if cond is not None:
                y = y + cond @ head["V"].T
            out[name] = softplus(y) if use_softplus else y
        return out

    def input_derivs(self, x, cond=None, hessian="none"):
        full = hessian == "full"
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cond = self._cond(cond, x.shape[0])
        n, d = x.shape
        h = x
        J = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        D = np.zeros((n, d, d))
        H = np.zeros((n, d, d, d)) if full else None
        for layer in self.layers:
            extra = cond @ layer["V"].T if cond is not None else None
            h, J, D, H = _tanh_layer(h, J, D, H, layer["W"] * layer["M"],
                                     layer["b"], full, extra=extra)
        outputs, jac, hess = {}, {}, {}
        for name, _, use_softplus in self.head_specs:
            head = self.heads[name]
            extra = cond @ head["V"].T if cond is not None else None
            y, Jy, Dy, Hy = _head(h, J, D, H, head["A"] * self.out_mask,
                                  head["c"], use_softplus, full, extra=extra)
            outputs[name] = y
            jac[name] = Jy
            if hessian != "none":
                hess[name] = Hy if full else Dy
        return outputs, jac, hess

    def sigma_bounds(self, name, cond=None):
        """Per-coordinate (lower, upper) bounds of a softplus head over all x.

        The last hidden state lives in [-1,1]^width, so the pre-softplus output
        is within +-(|A_masked| 1 + |V cond + c|) of zero.
        """
        head = self.heads[name]
        span = np.abs(head["A"] * self.out_mask).sum(axis=1)
        center = head["c"].astype(np.float64).copy()
        if self.cond_dim and cond is not None:
            center = center + np.asarray(cond, dtype=np.float64) @ head["V"].T
        s_hi = np.abs(center) + span
        return softplus(-s_hi), softplus(s_hi)

    # parameter handling mirrors Mlp

    def param_entries(self):
        entries = []
        for i, layer in enumerate(self.layers):
            entries.append((("layer", i, "W"), layer["W"]))
            if layer["V"] is not None:
                entries.append((("layer", i, "V"), layer["V"]))
            entries.append((("layer", i, "b"), layer["b"]))
        for name, _, _ in self.head_specs:
            head = self.heads[name]
            entries.append((("head", name, "A"), head["A"]))
            if head["V"] is not None:
                entries.append((("head", name, "V"), head["V"]))
            entries.append((("head", name, "c"), head["c"]))
        return entries

    param_layout = Mlp.param_layout
    param_vector = Mlp.param_vector
    set_param_vector = Mlp.set_param_vector

    def manifest(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "cond_dim": self.cond_dim,
            "hidden_widths": self.hidden_widths,
            "heads": [{"name": n, "dim": d, "softplus": s}
                      for n, d, s in self.head_specs],
            "masks": [layer["M"].astype(int).tolist() for layer in self.layers],
            "out_mask": self.out_mask.astype(int).tolist(),
            "param_count": int(self.param_vector().size),
        }

    @classmethod
    def from_manifest(cls, manifest):
        net = cls(
            manifest["input_dim"], manifest["cond_dim"], manifest["hidden_widths"],
            {h["name"]: h["dim"] for h in manifest["heads"]},
            softplus_heads=tuple(h["name"] for h in manifest["heads"] if h["softplus"]),
        )
        # Masks are deterministic from the dims, but trust the manifest.
        for layer, mask in zip(net.layers, manifest["masks"]):
            stored = np.asarray(mask, dtype=np.float64)
            if stored.shape != layer["M"].shape:
                raise ValueError("mask shape mismatch in manifest")
            layer["M"] = stored
        net.out_mask = np.asarray(manifest["out_mask"], dtype=np.float64)
        return net


def _tanh_layer(h, J, D, H, W, b, full, extra=None):
    pre = h @ W.T + b
    if extra is not None:
        pre = pre + extra
    h_new = np.tanh(pre)
    s = 1.0 - h_new * h_new
    preJ = np.einsum("up,npd->nud", W, J)
    J_new = s[..., None] * preJ
    preD = np.einsum("up,npd->nud", W, D)
    D_new = s[..., None] * preD - (2.0 * h_new * s)[..., None] * preJ ** 2
    H_new = None
    if full:
        preH = np.einsum("up,npde->nude", W, H)
        H_new = (s[..., None, None] * preH
                 - (2.0 * h_new * s)[..., None, None]
                 * preJ[..., :, None] * preJ[..., None, :])
    return h_new, J_new, D_new, H_new


def _head(h, J, D, H, A, c, use_softplus, full, extra=None):
    y = h @ A.T + c
    if extra is not None:
        y = y + extra
    Jy = np.einsum("op,npd->nod", A, J)
    Dy = np.einsum("op,npd->nod", A, D)
    Hy = np.einsum("op,npde->node", A, H) if full else None
    if use_softplus:
        sig = sigmoid(y)
        curv = sig * (1.0 - sig)
        Dy = sig[..., None] * Dy + curv[..., None] * Jy ** 2
        if full:
            Hy = (sig[..., None, None] * Hy
                  + curv[..., None, None] * Jy[..., :, None] * Jy[..., None, :])
        Jy = sig[..., None] * Jy
        y = softplus(y)
    return y, Jy, Dy, Hy


# -- model file round trip ----------------------------------------------------

_NET_KINDS = {"mlp": Mlp, "masked-mlp": MaskedMlp}


def save_net(net, stem, extra_manifest=None):
    """Write `<stem>.json` (shape manifest) and `<stem>.params.bin` (flat f64 LE)."""
    manifest = net.manifest()
    if extra_manifest:
        manifest = {**manifest, **extra_manifest}
    params = net.param_vector().astype("<f8")
    with open(f"{stem}.params.bin", "wb") as fh:
        fh.write(params.tobytes())
    with open(f"{stem}.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_net(stem):
    with open(f"{stem}.json") as fh:
        manifest = json.load(fh)
    kind = manifest["kind"]
    if kind not in _NET_KINDS:
        raise ValueError(f"unknown net kind {kind!r}")
    net = _NET_KINDS[kind].from_manifest(manifest)
    raw = np.fromfile(f"{stem}.params.bin", dtype="<f8")
    if raw.size != manifest["param_count"]:
        warnings.warn("parameter file length differs from manifest")
    net.set_param_vector(raw.astype(np.float64))
    return net, manifest

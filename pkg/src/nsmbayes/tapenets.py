"""Tape-side mirrors of the nets module.

Training needs d(objective)/d(params), so the forward pass (and, for the
score-matching objective, the analytic input-derivative recursions) must be
recorded on the tape with the flat parameter vector as the only leaf. The
numpy implementations in :mod:`nsmbayes.nets` stay the single source of truth
for evaluation; unit tests pin the two paths together.
"""

import numpy as np


def unpack_params(tape, p, net):
    """Slice the flat parameter leaf into named, shaped nodes."""
    layout, total = net.param_layout()
    if p.value.size != total:
        raise ValueError(f"parameter leaf has {p.value.size} entries, net expects {total}")
    nodes = {}
    for key, shape, start in layout:
        node = tape.getitem(p, slice(start, start + int(np.prod(shape))))
        nodes[key] = tape.reshape(node, shape)
    return nodes


def _as_node(tape, value_or_node):
    if hasattr(value_or_node, "value"):
        return value_or_node
    return tape.constant(np.asarray(value_or_node, dtype=np.float64))


def _affine(tape, h, W, b, mask=None, cond=None, V=None):
    """h @ W_eff.T + b (+ cond @ V.T); h is a node, W/b/V parameter nodes."""
    Weff = tape.multiply(W, tape.constant(mask)) if mask is not None else W
    pre = tape.add(tape.matmul(h, tape.swapaxes(Weff, -1, -2)), b)
    if V is not None and cond is not None:
        pre = tape.add(pre, tape.matmul(cond, tape.swapaxes(V, -1, -2)))
    return pre


def mlp_forward(tape, params, net, x, cond=None):
    """Forward pass of an Mlp or MaskedMlp on the tape. Returns head nodes."""
    masked = net.kind == "masked-mlp"
    h = _as_node(tape, x)
    if not masked and net.cond_dim:
        h = tape.concat([h, _as_node(tape, cond)], axis=1)
    cond_node = _as_node(tape, cond) if (masked and net.cond_dim) else None
    for i, layer in enumerate(net.layers):
        pre = _affine(
            tape, h, params[("layer", i, "W")], params[("layer", i, "b")],
            mask=layer["M"] if masked else None,
            cond=cond_node, V=params.get(("layer", i, "V")),
        )
        h = tape.tanh(pre)
    out = {}
    for name, _, use_softplus in net.head_specs:
        y = _affine(
            tape, h, params[("head", name, "A")], params[("head", name, "c")],
            mask=net.out_mask if masked else None,
            cond=cond_node, V=params.get(("head", name, "V")),
        )
        out[name] = tape.softplus(y) if use_softplus else y
    return out


def mlp_score_features(tape, params, net, x):
    """Head values, input Jacobians and Hessian-trace vectors on the tape.

    Only plain Mlps without conditioning are supported (the EBM case). For a
    batch of size n returns, per head: value (n, out), jac (n, out, d) and
    trace (n, out) where trace[_, k] = sum_j d^2 head_k / dx_j^2.

    The recursions mirror nets._tanh_layer:
        J_{l+1} = s . (W J_l),      s = 1 - h^2
        t_{l+1} = s . (W t_l) - 2 h s . rowsq(W J_l)
    """
    if net.kind != "mlp" or net.cond_dim:
        raise ValueError("score features on tape support unconditioned Mlps only")
    n, d = np.asarray(x).shape
    h = _as_node(tape, x)
    J = None   # (n, width, d); None encodes the identity at the input layer
    t = None   # (n, width); None encodes zero
    for i, _ in enumerate(net.layers):
        W = params[("layer", i, "W")]
        b = params[("layer", i, "b")]
        h = tape.tanh(tape.add(tape.matmul(h, tape.swapaxes(W, -1, -2)), b))
        s = tape.add(tape.constant(np.ones(h.shape)),
                     tape.multiply(tape.constant(-np.ones(h.shape)), tape.square(h)))
        width = h.shape[1]
        if J is None:
            preJ = tape.reshape(W, (1, width, d))
            pre_t = None
        else:
            preJ = tape.matmul(_expand0(tape, W), J)
            pre_t = tape.reshape(
                tape.matmul(_expand0(tape, W), tape.reshape(t, (n, t.shape[1], 1))),
                (n, width),
            )
        rowsq = tape.reshape(tape.sum(tape.square(preJ), axis=2, keepdims=True),
                             (preJ.shape[0], width))
        neg2hs = tape.multiply(tape.constant(np.full(h.shape, -2.0)),
                               tape.multiply(h, s))
        t_new = tape.multiply(neg2hs, rowsq)
        if pre_t is not None:
            t_new = tape.add(t_new, tape.multiply(s, pre_t))
        t = t_new
        J = tape.multiply(tape.reshape(s, (n, width, 1)), preJ)
    out = {}
    for name, dim, use_softplus in net.head_specs:
        if use_softplus:
            raise ValueError("softplus heads unsupported in tape score features")
        A = params[("head", name, "A")]
        c = params[("head", name, "c")]
        value = tape.add(tape.matmul(h, tape.swapaxes(A, -1, -2)), c)
        if J is None:  # affine net: constant Jacobian, zero curvature
            jac = tape.reshape(A, (1, dim, d))
            trace = tape.constant(np.zeros((n, dim)))
        else:
            jac = tape.matmul(_expand0(tape, A), J)
            trace = tape.reshape(
                tape.matmul(_expand0(tape, A), tape.reshape(t, (n, t.shape[1], 1))),
                (n, dim),
            )
        out[name] = (value, jac, trace)
    return out


def _expand0(tape, node):
    return tape.reshape(node, (1,) + node.shape)

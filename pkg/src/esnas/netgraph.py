"""Executable computational graphs with a minimal dense-tensor engine.

Graphs are flat topologically-ordered node lists over float64 numpy arrays
(batch dimension fixed to 1; feature maps are (C, H, W)).  The engine
supports forward evaluation with activation taps, a scoring-mode rewrite
(normalisation suppressed, GELU -> ReLU, absolute weights), and reverse-mode
gradients of the scalar sum of the output with respect to every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .archspace import (
    FFN_CONVNEXT,
    FFN_IBN,
    AttnGene,
    FfnGene,
    InvalidGenomeError,
    validate,
)

INPUT = -1  # pseudo node id for the graph input

ACTIVATION_KINDS = ("relu", "gelu")
NORM_KINDS = ("batchnorm", "layernorm")


class GraphShapeError(RuntimeError):
    """Shape mismatch while evaluating a node; names the node and both shapes."""


@dataclass
class OpNode:
    kind: str
    inputs: list[int]
    params: list[np.ndarray] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)

    def copy(self):
        return OpNode(self.kind, list(self.inputs),
                      [p.copy() for p in self.params], dict(self.attrs))


@dataclass
class Graph:
    nodes: list[OpNode]
    input_shape: tuple
    output_id: int
    activation_taps: list[int]
    out_shapes: list[tuple]
    scoring_mode: bool = False

    def copy(self):
        return Graph([n.copy() for n in self.nodes], tuple(self.input_shape),
                     self.output_id, list(self.activation_taps),
                     list(self.out_shapes), self.scoring_mode)

    def iter_params(self):
        """Yield (node_id, param_index, array) over all parameter tensors."""
        for nid, node in enumerate(self.nodes):
            for pi, p in enumerate(node.params):
                yield nid, pi, p

    def dump(self):
        """JSON-ready node listing for debugging and counting oracles."""
        return [
            {
                "id": nid,
                "kind": n.kind,
                "input_ids": list(n.inputs),
                "param_shapes": [list(p.shape) for p in n.params],
                "out_shape": list(self.out_shapes[nid]),
            }
            for nid, n in enumerate(self.nodes)
        ]


# ---------------------------------------------------------------------------
# convolution helpers

def _conv_out_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = _conv_out_hw(h, w, k, stride, pad)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (C, Ho, Wo, k, k)
    return win, ho, wo


def _col2im(gcols, c, h, w, k, stride, pad):
    # gcols: (C, k, k, Ho, Wo) -> gradient w.r.t. the unpadded input
    ho, wo = _conv_out_hw(h, w, k, stride, pad)
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcols[:, i, j]
    return gxp[:, pad:pad + h, pad:pad + w] if pad else gxp


def _conv2d_forward(x, node):
    a = node.attrs
    k, stride, pad, groups = a["kernel"], a["stride"], a["padding"], a["groups"]
    w = node.params[0]
    cout = w.shape[0]
    cin = x.shape[0]
    win, ho, wo = _im2col(x, k, stride, pad)
    if groups == 1:
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
        out = (w.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    elif groups == cin and w.shape[1] == 1 and cout == cin:
        out = np.einsum("chwij,cij->chw", win, w[:, 0])
    else:
        out = np.empty((cout, ho, wo))
        cg, og = cin // groups, cout // groups
        for g in range(groups):
            cols = (win[g * cg:(g + 1) * cg]
                    .transpose(0, 3, 4, 1, 2).reshape(cg * k * k, ho * wo))
            out[g * og:(g + 1) * og] = (
                w[g * og:(g + 1) * og].reshape(og, -1) @ cols).reshape(og, ho, wo)
    if a["bias"]:
        out += node.params[1][:, None, None]
    return out


def _conv2d_backward(x, node, gout):
    a = node.attrs
    k, stride, pad, groups = a["kernel"], a["stride"], a["padding"], a["groups"]
    w = node.params[0]
    cout = w.shape[0]
    cin = x.shape[0]
    win, ho, wo = _im2col(x, k, stride, pad)
    pgrads = []
    if groups == 1:
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
        gflat = gout.reshape(cout, -1)
        gw = (gflat @ cols.T).reshape(w.shape)
        gcols = (w.reshape(cout, -1).T @ gflat).reshape(cin, k, k, ho, wo)
    elif groups == cin and w.shape[1] == 1 and cout == cin:
        gw = np.einsum("chwij,chw->cij", win, gout)[:, None]
        gcols = np.einsum("chw,cij->cijhw", gout, w[:, 0])
    else:
        gw = np.empty_like(w)
        gcols = np.empty((cin, k, k, ho, wo))
        cg, og = cin // groups, cout // groups
        for g in range(groups):
            cols = (win[g * cg:(g + 1) * cg]
                    .transpose(0, 3, 4, 1, 2).reshape(cg * k * k, ho * wo))
            gflat = gout[g * og:(g + 1) * og].reshape(og, -1)
            gw[g * og:(g + 1) * og] = (gflat @ cols.T).reshape(og, cg, k, k)
            gcols[g * cg:(g + 1) * cg] = (
                w[g * og:(g + 1) * og].reshape(og, -1).T @ gflat
            ).reshape(cg, k, k, ho, wo)
    gx = _col2im(gcols, cin, x.shape[1], x.shape[2], k, stride, pad)
    pgrads.append(gw)
    if a["bias"]:
        pgrads.append(gout.sum(axis=(1, 2)))
    return [gx], pgrads


# ---------------------------------------------------------------------------
# node forward / backward

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


def _matmul_operands(a, b, attrs):
    if attrs.get("transpose_a"):
        a = np.swapaxes(a, -1, -2)
    if attrs.get("transpose_b"):
        b = np.swapaxes(b, -1, -2)
    return a, b


def _node_forward(node, ins):
    kind = node.kind
    if kind == "conv2d":
        return _conv2d_forward(ins[0], node)
    if kind == "linear":
        w = node.params[0]
        out = ins[0] @ w.T
        if node.attrs["bias"]:
            out = out + node.params[1]
        return out
    if kind == "relu":
        return np.maximum(ins[0], 0.0)
    if kind == "gelu":
        return _gelu(ins[0])
    if kind == "identity":
        return ins[0]
    if kind == "batchnorm":
        gamma, beta = node.params
        return gamma[:, None, None] * ins[0] + beta[:, None, None]
    if kind == "layernorm":
        x = ins[0]
        gamma, beta = node.params
        mu = x.mean(axis=0, keepdims=True)
        var = x.var(axis=0, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + node.attrs["eps"])
        return gamma[:, None, None] * xhat + beta[:, None, None]
    if kind == "softmax":
        x = ins[0]
        ax = node.attrs["axis"]
        e = np.exp(x - x.max(axis=ax, keepdims=True))
        return e / e.sum(axis=ax, keepdims=True)
    if kind == "matmul":
        a, b = _matmul_operands(ins[0], ins[1], node.attrs)
        return a @ b
    if kind == "scale":
        return ins[0] * node.attrs["factor"]
    if kind == "add":
        if ins[0].shape != ins[1].shape:
            raise GraphShapeError(
                f"add inputs disagree: {ins[0].shape} vs {ins[1].shape}")
        return ins[0] + ins[1]
    if kind == "zeropad":
        c_from, c_to = node.attrs["from"], node.attrs["to"]
        pad = [(0, c_to - c_from)] + [(0, 0)] * (ins[0].ndim - 1)
        return np.pad(ins[0], pad)
    if kind == "avgpool":
        k, stride = node.attrs["k"], node.attrs["stride"]
        win, _, _ = _im2col(ins[0], k, stride, 0)
        return win.mean(axis=(3, 4))
    if kind == "reshape":
        return ins[0].reshape(node.attrs["shape"])
    raise ValueError(f"unknown node kind {kind!r}")


def _node_backward(node, ins, out, gout):
    """Return ([grad wrt each input], [grad wrt each param])."""
    kind = node.kind
    if kind == "conv2d":
        return _conv2d_backward(ins[0], node, gout)
    if kind == "linear":
        w = node.params[0]
        x = ins[0]
        gx = gout @ w
        gw = np.tensordot(gout.reshape(-1, gout.shape[-1]).T,
                          x.reshape(-1, x.shape[-1]), axes=1)
        pg = [gw]
        if node.attrs["bias"]:
            pg.append(gout.reshape(-1, gout.shape[-1]).sum(axis=0))
        return [gx], pg
    if kind == "relu":
        return [gout * (ins[0] > 0)], []
    if kind == "gelu":
        return [gout * _gelu_grad(ins[0])], []
    if kind == "identity":
        return [gout], []
    if kind == "batchnorm":
        gamma, _ = node.params
        x = ins[0]
        gx = gout * gamma[:, None, None]
        ggamma = (gout * x).sum(axis=(1, 2))
        gbeta = gout.sum(axis=(1, 2))
        return [gx], [ggamma, gbeta]
    if kind == "layernorm":
        x = ins[0]
        gamma, _ = node.params
        eps = node.attrs["eps"]
        mu = x.mean(axis=0, keepdims=True)
        var = x.var(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        gxhat = gout * gamma[:, None, None]
        d = x.shape[0]
        gx = inv * (gxhat - gxhat.mean(axis=0, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=0, keepdims=True))
        ggamma = (gout * xhat).sum(axis=(1, 2))
        gbeta = gout.sum(axis=(1, 2))
        return [gx], [ggamma, gbeta]
    if kind == "softmax":
        ax = node.attrs["axis"]
        s = out
        gx = s * (gout - (gout * s).sum(axis=ax, keepdims=True))
        return [gx], []
    if kind == "matmul":
        a, b = _matmul_operands(ins[0], ins[1], node.attrs)
        ga = gout @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ gout
        if node.attrs.get("transpose_a"):
            ga = np.swapaxes(ga, -1, -2)
        if node.attrs.get("transpose_b"):
            gb = np.swapaxes(gb, -1, -2)
        return [ga, gb], []
    if kind == "scale":
        return [gout * node.attrs["factor"]], []
    if kind == "add":
        return [gout, gout], []
    if kind == "zeropad":
        return [gout[:node.attrs["from"]]], []
    if kind == "avgpool":
        k, stride = node.attrs["k"], node.attrs["stride"]
        c, h, w = ins[0].shape
        gcols = np.broadcast_to(
            (gout / (k * k))[:, None, None], (c, k, k) + gout.shape[1:])
        return [_col2im(np.ascontiguousarray(gcols), c, h, w, k, stride, 0)], []
    if kind == "reshape":
        return [gout.reshape(ins[0].shape)], []
    raise ValueError(f"unknown node kind {kind!r}")


# ---------------------------------------------------------------------------
# graph evaluation

def _forward_all(graph, x):
    if tuple(x.shape) != tuple(graph.input_shape):
        raise GraphShapeError(
            f"input shape {tuple(x.shape)} does not match graph input "
            f"{tuple(graph.input_shape)}")
    vals = [None] * len(graph.nodes)

    def val(i):
        return x if i == INPUT else vals[i]

    for nid, node in enumerate(graph.nodes):
        ins = [val(i) for i in node.inputs]
        try:
            vals[nid] = _node_forward(node, ins)
        except GraphShapeError as e:
            raise GraphShapeError(f"node {nid} ({node.kind}): {e}") from None
        expect = graph.out_shapes[nid]
        if tuple(vals[nid].shape) != tuple(expect):
            raise GraphShapeError(
                f"node {nid} ({node.kind}): produced {vals[nid].shape}, "
                f"expected {tuple(expect)}")
    return vals


def forward(graph, x):
    """Evaluate the graph; return (output, [tap tensors in network order])."""
    vals = _forward_all(graph, x)
    return vals[graph.output_id], [vals[t] for t in graph.activation_taps]


def backward_param_grads(graph):
    """Gradients of R = sum(output) under an all-ones input, per parameter.

    Returns a list of arrays aligned with graph.iter_params().
    """
    x = np.ones(graph.input_shape)
    vals = _forward_all(graph, x)
    node_grads = [None] * len(graph.nodes)
    node_grads[graph.output_id] = np.ones(graph.out_shapes[graph.output_id])
    pgrads = {}
    for nid in range(len(graph.nodes) - 1, -1, -1):
        g = node_grads[nid]
        node = graph.nodes[nid]
        if g is None:
            # node does not feed the output
            pgrads[nid] = [np.zeros_like(p) for p in node.params]
            continue
        ins = [x if i == INPUT else vals[i] for i in node.inputs]
        igrads, pg = _node_backward(node, ins, vals[nid], g)
        pgrads[nid] = pg
        for src, ig in zip(node.inputs, igrads):
            if src == INPUT:
                continue
            if node_grads[src] is None:
                node_grads[src] = ig.copy()
            else:
                node_grads[src] += ig
    out = []
    for nid, node in enumerate(graph.nodes):
        out.extend(pgrads[nid])
    return out


def prepare_for_scoring(graph):
    """Rewrite a graph for proxy scoring; the input graph is left untouched.

    Normalisation nodes become identities, GELU becomes ReLU, softmax becomes
    a row-sum-preserving scale, and every parameter value is replaced by its
    absolute value.  Idempotent.
    """
    g = graph.copy()
    for nid, node in enumerate(g.nodes):
        if node.kind in NORM_KINDS:
            node.kind = "identity"
            node.params = []
            node.attrs = {}
        elif node.kind == "gelu":
            node.kind = "relu"
        elif node.kind == "softmax":
            axis = node.attrs["axis"]
            node.kind = "scale"
            node.attrs = {"factor": 1.0 / g.out_shapes[nid][axis]}
        node.params = [np.abs(p) for p in node.params]
    g.activation_taps = [i for i, n in enumerate(g.nodes) if n.kind == "relu"]
    g.scoring_mode = True
    return g


def reinit(graph, seed):
    """Redraw all weights from U(-1/fan_in, +1/fan_in); returns a copy.

    The reciprocal (rather than root-reciprocal) fan-in scaling keeps the
    absolute-weight scoring forward pass depth-stable: the expected gain of a
    prepared conv/linear node is 1/2, so residual blocks hover near unit
    magnitude and the activation-squaring attention products cannot overflow
    float64 at any supported depth.
    """
    rng = np.random.default_rng(seed)
    g = graph.copy()
    for node in g.nodes:
        if node.kind in ("conv2d", "linear"):
            bound = 1.0 / node.attrs["fan_in"]
            node.params[0] = rng.uniform(-bound, bound, node.params[0].shape)
            if node.attrs["bias"]:
                node.params[1] = rng.uniform(-bound, bound, node.params[1].shape)
        elif node.kind == "batchnorm" or node.kind == "layernorm":
            node.params[0] = np.ones_like(node.params[0])
            node.params[1] = np.zeros_like(node.params[1])
    if g.scoring_mode:
        for node in g.nodes:
            node.params = [np.abs(p) for p in node.params]
    return g


# ---------------------------------------------------------------------------
# graph construction from a genome

class _Builder:
    def __init__(self, input_shape):
        self.nodes = []
        self.shapes = []
        self.input_shape = tuple(input_shape)

    def shape(self, nid):
        return self.input_shape if nid == INPUT else self.shapes[nid]

    def emit(self, kind, inputs, params=None, out_shape=None, **attrs):
        self.nodes.append(OpNode(kind, list(inputs), params or [], attrs))
        self.shapes.append(tuple(out_shape))
        return len(self.nodes) - 1

    def conv(self, src, cin, cout, k, stride=1, groups=1, bias=True):
        pad = k // 2
        _, h, w = self.shape(src)
        ho, wo = _conv_out_hw(h, w, k, stride, pad)
        params = [np.zeros((cout, cin // groups, k, k))]
        if bias:
            params.append(np.zeros(cout))
        return self.emit("conv2d", [src], params, (cout, ho, wo),
                         in_ch=cin, out_ch=cout, kernel=k, stride=stride,
                         groups=groups, padding=pad, bias=bias,
                         fan_in=(cin // groups) * k * k)

    def unary(self, kind, src, **attrs):
        return self.emit(kind, [src], None, self.shape(src), **attrs)

    def norm_bn(self, src, ch):
        return self.emit("batchnorm", [src], [np.ones(ch), np.zeros(ch)],
                         self.shape(src))

    def norm_ln(self, src, ch):
        return self.emit("layernorm", [src], [np.ones(ch), np.zeros(ch)],
                         self.shape(src), eps=1e-6)


def _residual(b, block_in, block_out, cin, cout):
    if cout > cin:
        pad = b.emit("zeropad", [block_in], None,
                     (cout,) + b.shape(block_in)[1:], **{"from": cin, "to": cout})
        return b.emit("add", [pad, block_out], None, b.shape(block_out))
    return b.emit("add", [block_in, block_out], None, b.shape(block_out))


def _append_ffn(b, src, cin, gene_ffn_type, cout, kernel, expansion):
    hid = expansion * cin
    if gene_ffn_type == FFN_IBN:
        x = b.conv(src, cin, hid, 1)
        x = b.norm_bn(x, hid)
        x = b.unary("relu", x)
        x = b.conv(x, hid, hid, kernel, groups=hid)
        x = b.norm_bn(x, hid)
        x = b.unary("relu", x)
        x = b.conv(x, hid, cout, 1)
        x = b.norm_bn(x, cout)
    elif gene_ffn_type == FFN_CONVNEXT:
        x = b.conv(src, cin, cin, kernel, groups=cin)
        x = b.norm_ln(x, cin)
        x = b.conv(x, cin, hid, 1)
        x = b.unary("gelu", x)
        x = b.conv(x, hid, cout, 1)
    else:
        raise ValueError(f"unknown ffn type {gene_ffn_type!r}")
    return _residual(b, src, x, cin, cout)


def _append_mhsa(b, src, cin, heads, head_dim):
    hd = heads * head_dim
    _, hs, ws = b.shape(src)
    length = hs * ws
    q = b.conv(src, cin, hd, 1)
    k = b.conv(src, cin, hd, 1)
    v = b.conv(src, cin, hd, 1)
    q = b.emit("reshape", [q], None, (heads, head_dim, length),
               shape=(heads, head_dim, length))
    k = b.emit("reshape", [k], None, (heads, head_dim, length),
               shape=(heads, head_dim, length))
    v = b.emit("reshape", [v], None, (heads, head_dim, length),
               shape=(heads, head_dim, length))
    scores = b.emit("matmul", [q, k], None, (heads, length, length),
                    transpose_a=True, transpose_b=False)
    scores = b.emit("scale", [scores], None, (heads, length, length),
                    factor=1.0 / math.sqrt(head_dim))
    attn = b.emit("softmax", [scores], None, (heads, length, length), axis=-1)
    ctx = b.emit("matmul", [v, attn], None, (heads, head_dim, length),
                 transpose_a=False, transpose_b=True)
    ctx = b.emit("reshape", [ctx], None, (hd, hs, ws), shape=(hd, hs, ws))
    proj = b.conv(ctx, hd, cin, 1)
    return b.emit("add", [src, proj], None, b.shape(src))


def build_graph(genome, config, seed):
    """Instantiate a genome as an executable graph with seeded weights."""
    violations = validate(genome, config)
    if violations:
        raise InvalidGenomeError(violations)
    b = _Builder((config.input_channels, config.input_resolution,
                  config.input_resolution))
    # Fixed stem: two strided 3x3 convolutions (4x spatial reduction).
    stem_mid = max(1, config.stem_channels // 2)
    x = b.conv(INPUT, config.input_channels, stem_mid, 3, stride=2)
    x = b.conv(x, stem_mid, config.stem_channels, 3, stride=2)
    cur = config.stem_channels
    for si, stage in enumerate(genome.stages):
        if si > 0:
            # Fixed downsampler: strided 3x3 convolution, channel-preserving.
            x = b.conv(x, cur, cur, 3, stride=2)
        for gene in stage:
            if isinstance(gene, AttnGene):
                x = _append_mhsa(b, x, cur, gene.num_heads, gene.head_dim)
                x = _append_ffn(b, x, cur, gene.ffn_type, gene.out_channels,
                                3, gene.expansion_ratio)
            else:
                x = _append_ffn(b, x, cur, gene.ffn_type, gene.out_channels,
                                gene.kernel_size, gene.expansion_ratio)
            cur = gene.out_channels
    taps = [i for i, n in enumerate(b.nodes) if n.kind in ACTIVATION_KINDS]
    graph = Graph(nodes=b.nodes, input_shape=b.input_shape, output_id=x,
                  activation_taps=taps, out_shapes=b.shapes)
    return reinit(graph, seed)


# ---------------------------------------------------------------------------
# analytic counting

def count_graph_params(graph):
    return int(sum(p.size for _, _, p in graph.iter_params()))


def count_graph_macs(graph):
    total = 0
    for nid, node in enumerate(graph.nodes):
        shape = graph.out_shapes[nid]
        if node.kind == "conv2d":
            a = node.attrs
            total += (a["kernel"] ** 2 * (a["in_ch"] // a["groups"])
                      * a["out_ch"] * shape[1] * shape[2])
        elif node.kind == "linear":
            positions = 1
            for d in shape[:-1]:
                positions *= d
            total += node.attrs["in"] * node.attrs["out"] * positions
        elif node.kind == "matmul":
            a_shape = graph.out_shapes[node.inputs[0]] \
                if node.inputs[0] != INPUT else graph.input_shape
            inner = a_shape[-2] if node.attrs.get("transpose_a") else a_shape[-1]
            batch = 1
            for d in shape[:-2]:
                batch *= d
            total += batch * shape[-2] * shape[-1] * inner
    return int(total)


# ---------------------------------------------------------------------------
# hand-built node helpers (used by metrics tests and the CLI fixtures)

def linear_graph(weights, bias=None):
    """Single-linear-layer graph over a 1-D input; weights is (out, in)."""
    w = np.asarray(weights, dtype=float)
    params = [w]
    attrs = {"in": w.shape[1], "out": w.shape[0], "bias": bias is not None,
             "fan_in": w.shape[1]}
    if bias is not None:
        params.append(np.asarray(bias, dtype=float))
    node = OpNode("linear", [INPUT], params, attrs)
    return Graph(nodes=[node], input_shape=(w.shape[1],), output_id=0,
                 activation_taps=[], out_shapes=[(w.shape[0],)])

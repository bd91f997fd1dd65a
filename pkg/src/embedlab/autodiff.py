"""Minimal reverse-mode differentiation on an append-only tape.

A :class:`Graph` is built once from a fixed set of primitives, then evaluated
against named input vectors.  Forward values are cached on the tape, and a
single reverse sweep yields exact gradients of a scalar output with respect
to any named input (and, for affine nodes backed by :class:`Param`, with
respect to trainable weights).

The primitive set is deliberately small: affine map, elementwise tanh and
SiLU, softmax, log-sum-exp, dot product, L2 norm, cosine similarity,
quadratic form, and diagonal Gaussian log-density, plus the arithmetic and
packing operations needed to compose them.  Everything the lab
differentiates is expressed in these terms.
"""

from __future__ import annotations

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs, bad bindings, or non-finite values."""


class Param:
    """A trainable array with an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class _Node:
    __slots__ = ("op", "args", "payload")

    def __init__(self, op, args, payload=None):
        self.op = op
        self.args = args
        self.payload = payload


def _as_array(v):
    return np.asarray(v, dtype=np.float64)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Append-only computation tape with named inputs and one marked output.

    Nodes are identified by integer position; inputs always precede the
    nodes that consume them, so the insertion order is a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.input_ids: dict[str, int] = {}
        self.output: int | None = None
        self.values: list | None = None

    # -- construction -----------------------------------------------------

    def _append(self, op, args, payload=None):
        for a in args:
            if not (0 <= a < len(self.nodes)):
                raise GraphError(f"{op}: argument node {a} does not exist")
        self.nodes.append(_Node(op, tuple(args), payload))
        return len(self.nodes) - 1

    def placeholder(self, name):
        if name in self.input_ids:
            raise GraphError(f"duplicate placeholder {name!r}")
        nid = self._append("input", (), {"name": name})
        self.input_ids[name] = nid
        return nid

    def constant(self, value):
        return self._append("const", (), {"value": _as_array(value)})

    def add(self, a, b):
        return self._append("add", (a, b))

    def sub(self, a, b):
        return self._append("sub", (a, b))

    def neg(self, a):
        return self._append("neg", (a,))

    def scale(self, a, k):
        """Multiply a node by a fixed scalar constant k."""
        return self._append("scale", (a,), {"k": float(k)})

    def mul(self, a, b):
        """Elementwise product of two nodes with equal shapes."""
        return self._append("mul", (a, b))

    def smul(self, s, v):
        """Scalar node s times vector node v."""
        return self._append("smul", (s, v))

    def affine(self, x, weight, bias=None):
        """weight @ x + bias; weight/bias may be ndarrays or Params."""
        return self._append("affine", (x,), {"W": weight, "b": bias})

    def tanh(self, a):
        return self._append("tanh", (a,))

    def silu(self, a):
        return self._append("silu", (a,))

    def softmax(self, a):
        return self._append("softmax", (a,))

    def logsumexp(self, a):
        return self._append("logsumexp", (a,))

    def dot(self, a, b):
        return self._append("dot", (a, b))

    def norm(self, a):
        return self._append("norm", (a,))

    def cosine(self, a, b):
        return self._append("cosine", (a, b))

    def quadform(self, x, matrix):
        """x^T A x with a fixed matrix A."""
        return self._append("quadform", (x,), {"A": _as_array(matrix)})

    def gauss_logpdf(self, x, mu, var):
        """Log-density of N(mu, diag(var)) at x; var is a fixed vector."""
        return self._append("gauss_logpdf", (x, mu), {"var": _as_array(var)})

    def pack(self, scalars):
        """Stack scalar nodes into a vector node."""
        return self._append("pack", tuple(scalars))

    def pick(self, v, index):
        """Select one component of a vector node as a scalar node."""
        return self._append("pick", (v,), {"i": int(index)})

    def concat(self, parts):
        return self._append("concat", tuple(parts))

    def vsum(self, a):
        """Sum of the components of a vector node."""
        return self._append("vsum", (a,))

    def mark_output(self, nid):
        if not (0 <= nid < len(self.nodes)):
            raise GraphError(f"output node {nid} does not exist")
        self.output = nid
        return nid


def _pval(p):
    return p.value if isinstance(p, Param) else p


def evaluate(graph, bindings):
    """Run the forward pass with named inputs bound to vectors.

    Caches every node value on the graph and returns the output value.
    Non-finite intermediate values are rejected with the offending node
    named, which localises numerical blow-ups to a primitive.
    """
    if graph.output is None:
        raise GraphError("graph has no marked output")
    missing = set(graph.input_ids) - set(bindings)
    if missing:
        raise GraphError(f"unbound inputs: {sorted(missing)}")

    vals = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        op, args, pl = node.op, node.args, node.payload
        if op == "input":
            v = _as_array(bindings[pl["name"]])
        elif op == "const":
            v = pl["value"]
        elif op == "add":
            v = vals[args[0]] + vals[args[1]]
        elif op == "sub":
            v = vals[args[0]] - vals[args[1]]
        elif op == "neg":
            v = -vals[args[0]]
        elif op == "scale":
            v = pl["k"] * vals[args[0]]
        elif op == "mul":
            v = vals[args[0]] * vals[args[1]]
        elif op == "smul":
            v = vals[args[0]] * vals[args[1]]
        elif op == "affine":
            W = _pval(pl["W"])
            v = W @ vals[args[0]]
            if pl["b"] is not None:
                v = v + _pval(pl["b"])
        elif op == "tanh":
            v = np.tanh(vals[args[0]])
        elif op == "silu":
            x = vals[args[0]]
            v = x * _sigmoid(x)
        elif op == "softmax":
            x = vals[args[0]]
            e = np.exp(x - np.max(x))
            v = e / np.sum(e)
        elif op == "logsumexp":
            x = vals[args[0]]
            m = np.max(x)
            v = m + np.log(np.sum(np.exp(x - m)))
        elif op == "dot":
            v = np.dot(vals[args[0]], vals[args[1]])
        elif op == "norm":
            v = np.linalg.norm(vals[args[0]])
        elif op == "cosine":
            a, b = vals[args[0]], vals[args[1]]
            v = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        elif op == "quadform":
            x = vals[args[0]]
            v = x @ pl["A"] @ x
        elif op == "gauss_logpdf":
            x, mu = vals[args[0]], vals[args[1]]
            d = x - mu
            var = pl["var"]
            v = -0.5 * np.sum(d * d / var + np.log(2.0 * np.pi * var))
        elif op == "pack":
            v = np.array([vals[a] for a in args], dtype=np.float64)
        elif op == "pick":
            v = vals[args[0]][pl["i"]]
        elif op == "concat":
            v = np.concatenate([np.atleast_1d(vals[a]) for a in args])
        elif op == "vsum":
            v = np.sum(vals[args[0]])
        else:
            raise GraphError(f"unknown op {op!r}")
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise GraphError(f"non-finite value at node {i} ({op})")
        vals[i] = v

    graph.values = vals
    return vals[graph.output]


def _backward(graph, accumulate_params=False):
    """Reverse sweep from a scalar output; returns per-node adjoints."""
    if graph.values is None:
        raise GraphError("run evaluate() before taking gradients")
    vals = graph.values
    out_val = vals[graph.output]
    if out_val.ndim != 0:
        raise GraphError("gradient requires a scalar output")

    adj = [None] * len(graph.nodes)
    adj[graph.output] = np.array(1.0)

    def acc(i, g):
        if adj[i] is None:
            adj[i] = np.array(g, dtype=np.float64)
        else:
            adj[i] = adj[i] + g

    for i in range(len(graph.nodes) - 1, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = graph.nodes[i]
        op, args, pl = node.op, node.args, node.payload
        if op in ("input", "const"):
            continue
        if op == "add":
            acc(args[0], g)
            acc(args[1], g)
        elif op == "sub":
            acc(args[0], g)
            acc(args[1], -g)
        elif op == "neg":
            acc(args[0], -g)
        elif op == "scale":
            acc(args[0], pl["k"] * g)
        elif op == "mul":
            acc(args[0], g * vals[args[1]])
            acc(args[1], g * vals[args[0]])
        elif op == "smul":
            acc(args[0], np.sum(g * vals[args[1]]))
            acc(args[1], vals[args[0]] * g)
        elif op == "affine":
            W = pl["W"]
            acc(args[0], _pval(W).T @ g)
            if accumulate_params:
                if isinstance(W, Param):
                    W.grad += np.outer(g, vals[args[0]])
                b = pl["b"]
                if isinstance(b, Param):
                    b.grad += g
        elif op == "tanh":
            y = vals[i]
            acc(args[0], g * (1.0 - y * y))
        elif op == "silu":
            x = vals[args[0]]
            s = _sigmoid(x)
            acc(args[0], g * s * (1.0 + x * (1.0 - s)))
        elif op == "softmax":
            y = vals[i]
            acc(args[0], y * (g - np.dot(g, y)))
        elif op == "logsumexp":
            x = vals[args[0]]
            acc(args[0], g * np.exp(x - vals[i]))
        elif op == "dot":
            acc(args[0], g * vals[args[1]])
            acc(args[1], g * vals[args[0]])
        elif op == "norm":
            y = vals[i]
            if y == 0.0:
                raise GraphError(f"norm gradient undefined at zero (node {i})")
            acc(args[0], g * vals[args[0]] / y)
        elif op == "cosine":
            a, b = vals[args[0]], vals[args[1]]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            y = vals[i]
            acc(args[0], g * (b / (na * nb) - y * a / (na * na)))
            acc(args[1], g * (a / (na * nb) - y * b / (nb * nb)))
        elif op == "quadform":
            A = pl["A"]
            acc(args[0], g * ((A + A.T) @ vals[args[0]]))
        elif op == "gauss_logpdf":
            x, mu = vals[args[0]], vals[args[1]]
            d = (x - mu) / pl["var"]
            acc(args[0], -g * d)
            acc(args[1], g * d)
        elif op == "pack":
            for k, a in enumerate(args):
                acc(a, g[k])
        elif op == "pick":
            full = np.zeros_like(vals[args[0]])
            full[pl["i"]] = g
            acc(args[0], full)
        elif op == "concat":
            off = 0
            for a in args:
                n = np.atleast_1d(vals[a]).size
                piece = g[off:off + n]
                acc(a, piece if vals[a].ndim else piece[0])
                off += n
        elif op == "vsum":
            acc(args[0], g * np.ones_like(vals[args[0]]))
        else:
            raise GraphError(f"unknown op {op!r}")
    return adj


def gradient(graph, wrt):
    """Exact reverse-mode gradient of the scalar output w.r.t. input `wrt`."""
    if wrt not in graph.input_ids:
        raise GraphError(f"no input named {wrt!r}")
    adj = _backward(graph)
    g = adj[graph.input_ids[wrt]]
    if g is None:
        val = graph.values[graph.input_ids[wrt]]
        return np.zeros_like(val)
    return np.asarray(g, dtype=np.float64)


def param_gradients(graph):
    """Reverse sweep that accumulates into every Param used by the graph."""
    _backward(graph, accumulate_params=True)


def finite_diff_grad(f, x, step=1e-6, order=2):
    """Central-difference gradient of a scalar function, one coordinate at a
    time.  This is the independent oracle the autodiff tests compare against;
    it never calls into the tape machinery.

    order=2 is the standard two-point quotient; order=4 uses the five-point
    stencil, whose O(step^4) truncation lets a larger step suppress the
    cancellation noise floor when gradients are very small.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        def at(mult):
            xx = x.copy()
            xx[i] += mult * step
            return f(xx)
        if order == 2:
            g[i] = (at(1) - at(-1)) / (2.0 * step)
        elif order == 4:
            g[i] = (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * step)
        else:
            raise ValueError("order must be 2 or 4")
    return g


def grad_check(graph, wrt, probe_count=20, step=1e-6):
    """Max relative error between the tape gradient and central differences.

    Probes random coordinates of the bound input `wrt` (deterministically
    seeded).  Relative error uses |fd| + 1e-12 in the denominator so exact
    zeros compare cleanly.
    """
    if graph.values is None:
        raise GraphError("run evaluate() before grad_check")
    base = {name: np.array(graph.values[nid], copy=True)
            for name, nid in graph.input_ids.items()}
    x = base[wrt]
    auto = gradient(graph, wrt)

    rng = np.random.default_rng(0)
    dim = x.size
    if probe_count >= dim:
        idxs = np.arange(dim)
    else:
        idxs = rng.choice(dim, size=probe_count, replace=False)

    worst = 0.0
    flat = x.reshape(-1)
    for i in idxs:
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        b_hi = dict(base)
        b_lo = dict(base)
        b_hi[wrt] = hi.reshape(x.shape)
        b_lo[wrt] = lo.reshape(x.shape)
        f_hi = float(evaluate(graph, b_hi))
        f_lo = float(evaluate(graph, b_lo))
        fd = (f_hi - f_lo) / (2.0 * step)
        err = abs(float(auto.reshape(-1)[i]) - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    # restore the original forward cache
    evaluate(graph, base)
    return worst

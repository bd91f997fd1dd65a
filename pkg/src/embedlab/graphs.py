"""Tape builders shared by the update rule, guidance, and the theory checks.

Each builder returns a :class:`~embedlab.autodiff.Graph` with placeholders
named ``"x"`` (and usually ``"c"``), so one graph serves both the embedding
gradient (reverse sweep to ``c``) and the data-space gradient (reverse sweep
to ``x``).  Graphs are cheap to rebuild but caching one per timestep pays
off inside sampling loops; ``GraphCache`` provides that.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph


def tweedie_graph_nodes(g, model, x_ref, c_ref, t, sched):
    """Nodes for the Tweedie mean (x + (1 - ab) * score) / sqrt(ab)."""
    ab = sched.alpha_bar(t)
    s = model.emit_score(g, x_ref, c_ref, t, sched)
    return g.scale(g.add(x_ref, g.scale(s, 1.0 - ab)), 1.0 / np.sqrt(ab))


def h_t_graph(model, h, y, t, sched):
    """Graph for h_t(x, c) = h(tweedie_mean(x, c, t); y)."""
    g = Graph()
    x_ref = g.placeholder("x")
    c_ref = g.placeholder("c")
    x0_bar = tweedie_graph_nodes(g, model, x_ref, c_ref, t, sched)
    g.mark_output(h.emit(g, x0_bar, y))
    return g


def perturbed_h_graph(h, y):
    """Graph for h evaluated directly at the perturbed sample x_t.

    The perturbed sample carries no dependence on the current embedding, so
    the embedding gradient of this objective is identically zero; the graph
    still declares a "c" input so the reverse sweep states that fact rather
    than assuming it.
    """
    g = Graph()
    x_ref = g.placeholder("x")
    g.placeholder("c")
    g.mark_output(h.emit(g, x_ref, y))
    return g


def log_likelihood_graph(model, t, sched):
    """Graph for log p_t(x | c) with both x and c as inputs."""
    g = Graph()
    x_ref = g.placeholder("x")
    c_ref = g.placeholder("c")
    g.mark_output(model.emit_log_likelihood(g, x_ref, c_ref, t, sched))
    return g


def classifier_graph(conditionals, priors, y, t, sched):
    """Graph for log p(y | x) under the Bayes classifier over prompts."""
    g = Graph()
    x_ref = g.placeholder("x")
    terms = []
    for prior, (model, c) in zip(priors, conditionals):
        c_const = g.constant(np.asarray(c, dtype=np.float64))
        lp = model.emit_log_likelihood(g, x_ref, c_const, t, sched)
        terms.append(g.add(lp, g.constant(np.log(prior))))
    g.mark_output(g.sub(terms[int(y)], g.logsumexp(g.pack(terms))))
    return g


def directional_cgrad_graph(model, direction, c_org, t, sched):
    """Graph in x for  u . grad_c log p_t(x | c_org)  with u fixed.

    Expands the closed form of the embedding gradient of the mixture
    log-likelihood so that its data-space gradient (the guidance term of
    the score-expansion check) comes from a single reverse sweep.
    """
    u = np.asarray(direction, dtype=np.float64)
    c_org = np.asarray(c_org, dtype=np.float64)
    ab = sched.alpha_bar(t)
    means, variances = model.perturbed_params(c_org, t, sched)
    logits = model.weight_logits @ c_org
    logw = logits - (np.max(logits) + np.log(np.sum(np.exp(logits - np.max(logits)))))
    w = np.exp(logw)
    mean_logit = w @ model.weight_logits

    g = Graph()
    x_ref = g.placeholder("x")
    comps = []
    linear_terms = []
    for k in range(model.n_components):
        mu = g.constant(means[k])
        lp = g.gauss_logpdf(x_ref, mu, variances[k])
        comps.append(g.add(g.constant(logw[k]), lp))
        coeff = np.sqrt(ab) * (model.mean_maps[k] @ u) / variances[k]
        alpha_k = float(u @ (model.weight_logits[k] - mean_logit))
        lin = g.add(g.dot(g.sub(x_ref, mu), g.constant(coeff)), g.constant(alpha_k))
        linear_terms.append(lin)
    resp = g.softmax(g.pack(comps))
    out = None
    for k in range(model.n_components):
        term = g.mul(g.pick(resp, k), linear_terms[k])
        out = term if out is None else g.add(out, term)
    g.mark_output(out)
    return g


class GraphCache:
    """Reuse per-timestep graphs within a sampling run.

    Graphs carry their last forward values, so a cache must not be shared
    across threads; each trajectory loop owns one.
    """

    def __init__(self):
        self._graphs = {}

    def h_t(self, model, h, y, t, sched):
        key = ("h_t", id(model), id(h), int(y), int(t))
        if key not in self._graphs:
            self._graphs[key] = h_t_graph(model, h, y, t, sched)
        return self._graphs[key]

    def perturbed_h(self, h, y):
        key = ("perturbed_h", id(h), int(y))
        if key not in self._graphs:
            self._graphs[key] = perturbed_h_graph(h, y)
        return self._graphs[key]

"""Chaining TapeNodes into a reverse-mode graph.

A :class:`Var` wraps the output of one :class:`~lrpnet.ops.TapeNode` together
with the Vars it consumed and the names of the parameters it used.  ``backprop``
walks the graph in reverse creation order, so every Var is finished before its
parents see its gradient.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import ops
from .voxel import SparseTensor

_ids = itertools.count()


class Var:
    __slots__ = ("value", "node", "parents", "param_names", "grad", "uid")

    def __init__(self, value, node=None, parents=(), param_names=()):
        self.value = value
        self.node = node
        self.parents = tuple(parents)
        self.param_names = tuple(param_names)
        self.grad = None
        self.uid = next(_ids)

    @property
    def features(self) -> np.ndarray:
        return self.value.features

    def __repr__(self):
        return f"Var({self.value!r})"


def leaf(value: SparseTensor) -> Var:
    return Var(value)


def record(node: ops.TapeNode, parents: Sequence[Var], param_names: Sequence[str | None] = ()) -> Var:
    return Var(node.output, node, parents, param_names)


def backprop(root: Var, seed, param_grads: dict | None = None) -> dict:
    """Propagate ``seed`` (d loss / d root) to every Var and named parameter.

    Parameter gradients are accumulated into ``param_grads`` (created if None)
    and returned.  Var gradients end up in ``Var.grad``.
    """
    if param_grads is None:
        param_grads = {}
    order, stack, seen = [], [root], {root.uid}
    while stack:
        v = stack.pop()
        order.append(v)
        for p in v.parents:
            if p.uid not in seen:
                seen.add(p.uid)
                stack.append(p)
    order.sort(key=lambda v: v.uid, reverse=True)
    for v in order:
        v.grad = None
    root.grad = seed
    for v in order:
        if v.node is None or v.grad is None:
            continue
        grads = v.node.backward(v.grad)
        n_in = len(v.parents)
        for p, g in zip(v.parents, grads[:n_in]):
            p.grad = g if p.grad is None else p.grad + g
        for name, g in zip(v.param_names, grads[n_in:]):
            if name is None:
                continue
            if name in param_grads:
                param_grads[name] = param_grads[name] + g
            else:
                param_grads[name] = g
    return param_grads

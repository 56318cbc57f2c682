"""A small static computation graph over the layer primitives in :mod:`tensor`.

Nodes run in list order (builders append them topologically). Parameters
live in ``ModelGraph.params``; BatchNorm running statistics live in
``ModelGraph.buffers``. A parameter name may be referenced by several nodes,
which is how twin branches tie weights; gradients then accumulate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T

HEADS = ("regression_1", "softmax_2")


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class GraphError(ValueError):
    pass


@dataclass
class ModelGraph:
    arch: str
    nodes: list
    params: dict
    buffers: dict
    head: str
    input_keys: tuple
    output: str
    fingerprint_source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cache: dict = {}
        self._index = {n.name: i for i, n in enumerate(self.nodes)}
        self.validate()

    # ------------------------------------------------------------------ checks

    def validate(self) -> None:
        if self.head not in HEADS:
            raise GraphError(f"unknown head {self.head!r}")
        seen: set = set()
        for node in self.nodes:
            if node.name in seen:
                raise GraphError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.name!r} reads {src!r} before it is defined")
            for key in node.params.values():
                if key not in self.params and key not in self.buffers:
                    raise GraphError(f"node {node.name!r} references missing parameter {key!r}")
            seen.add(node.name)
        if self.output not in seen:
            raise GraphError(f"output node {self.output!r} missing")
        used = {k for n in self.nodes for k in n.params.values()}
        orphans = (set(self.params) | set(self.buffers)) - used
        if orphans:
            raise GraphError(f"parameters not referenced by any node: {sorted(orphans)}")

    def param_users(self) -> dict:
        users: dict = {}
        for n in self.nodes:
            for key in n.params.values():
                users.setdefault(key, []).append(n.name)
        return users

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.fingerprint_source.encode("utf-8")).digest()

    def count(self, op: str | None = None, branch: Any = ...) -> int:
        return sum(
            1 for n in self.nodes
            if (op is None or n.op == op) and (branch is ... or n.attrs.get("branch") == branch)
        )

    # ------------------------------------------------------------------ inputs

    def prepare_inputs(self, X) -> dict:
        if isinstance(X, dict):
            return {k: np.asarray(v, dtype=T.DTYPE) for k, v in X.items()}
        X = np.asarray(X, dtype=T.DTYPE)
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4:
            raise T.ShapeError(f"expected (N, H, W[, 1]) images, got {X.shape}")
        if self.input_keys == ("image",):
            return {"image": X}
        half = X.shape[2] // 2
        if X.shape[2] != 2 * half:
            raise T.ShapeError(f"pairwise input width {X.shape[2]} is odd")
        return {"left": X[:, :, :half], "right": X[:, :, half:]}

    # ------------------------------------------------------------------ forward

    def forward(self, X, mode: str = "infer", seed: int = 0) -> np.ndarray:
        inputs = self.prepare_inputs(X)
        vals: dict = {}
        cache: dict = {}
        for i, node in enumerate(self.nodes):
            vals[node.name], cache[node.name] = self._run(node, i, vals, inputs, mode, seed)
        self._cache = {"cache": cache, "vals_shapes": {k: v.shape for k, v in vals.items()}}
        return vals[self.output]

    def _run(self, node: Node, idx: int, vals: dict, inputs: dict, mode: str, seed: int):
        op, a, P = node.op, node.attrs, node.params
        xs = [vals[s] for s in node.inputs]
        if op == "input":
            x = inputs[a["key"]]
            expect = a.get("hw")
            if expect and tuple(x.shape[1:3]) != tuple(expect):
                raise T.ShapeError(f"input {a['key']!r} has extent {x.shape[1:3]}, graph expects {tuple(expect)}")
            return x, None
        if op == "conv":
            return T.conv2d(xs[0], self.params[P["W"]], a["spec"])
        if op == "bn":
            state = T.BatchNormState(
                self.params[P["gamma"]], self.params[P["beta"]],
                self.buffers[P["mean"]], self.buffers[P["var"]],
                a.get("momentum", 0.9), a.get("eps_bn", 1e-5),
            )
            return T.batchnorm(xs[0], state, mode)
        if op == "relu":
            return T.relu(xs[0])
        if op == "sigmoid":
            return T.sigmoid(xs[0])
        if op == "maxpool":
            x, caches = xs[0], []
            for _ in range(a.get("repeat", 1)):
                x, c = T.maxpool2d(x, a.get("window", 2), a.get("stride", 2))
                caches.append(c)
            return x, caches
        if op == "concat":
            return T.concat_channels(xs)
        if op == "dense":
            return T.dense(xs[0], self.params[P["W"]], self.params[P["b"]])
        if op == "dropout":
            return T.dropout(xs[0], a["rate"], mode, rng_seed=_mix(seed, idx))
        if op == "gap":
            return T.global_avg_pool(xs[0])
        if op == "gate":
            return T.channel_gate(xs[0], xs[1])
        if op == "noise":
            sigma = a.get("sigma", 0.0)
            if mode == "train" and sigma > 0:
                noise = np.random.default_rng(_mix(seed, idx)).normal(0.0, sigma, xs[0].shape)
                return xs[0] + noise, None
            return xs[0].copy(), None
        raise GraphError(f"unknown op {op!r}")

    # ------------------------------------------------------------------ backward

    def backward(self, dout: np.ndarray) -> dict:
        """Gradients of ``sum(dout * output)`` for every parameter."""
        if not self._cache:
            raise GraphError("backward called before forward")
        cache = self._cache["cache"]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        douts: dict = {self.output: dout}
        needs = self._needs_grad()
        for node in reversed(self.nodes):
            g = douts.pop(node.name, None)
            if g is None or node.op == "input":
                continue
            c = cache[node.name]
            op, P = node.op, node.params
            if op == "conv":
                dx, dk = T.conv2d_backward(g, c, need_dx=needs[node.inputs[0]])
                grads[P["W"]] += dk
                in_grads = [dx]
            elif op == "bn":
                dx, dg, db = T.batchnorm_backward(g, c)
                grads[P["gamma"]] += dg
                grads[P["beta"]] += db
                in_grads = [dx]
            elif op == "relu":
                in_grads = [T.relu_backward(g, c)]
            elif op == "sigmoid":
                in_grads = [T.sigmoid_backward(g, c)]
            elif op == "maxpool":
                for pc in reversed(c):
                    g = T.maxpool2d_backward(g, pc)
                in_grads = [g]
            elif op == "concat":
                in_grads = T.concat_channels_backward(g, c)
            elif op == "dense":
                dx, dw, db = T.dense_backward(g, c)
                grads[P["W"]] += dw
                grads[P["b"]] += db
                in_grads = [dx]
            elif op == "dropout":
                in_grads = [T.dropout_backward(g, c)]
            elif op == "gap":
                in_grads = [T.global_avg_pool_backward(g, c)]
            elif op == "gate":
                in_grads = list(T.channel_gate_backward(g, c))
            elif op == "noise":
                in_grads = [g]
            else:
                raise GraphError(f"no backward rule for {op!r}")
            for src, gi in zip(node.inputs, in_grads):
                if gi is None or not needs[src]:
                    continue
                if src in douts:
                    douts[src] = douts[src] + gi
                else:
                    douts[src] = gi
        return grads

    def _needs_grad(self) -> dict:
        cached = self.meta.get("_needs")
        if cached is not None:
            return cached
        needs: dict = {}
        for n in self.nodes:
            needs[n.name] = n.op != "input" and (
                bool(n.params) or any(needs[s] for s in n.inputs)
            )
        self.meta["_needs"] = needs
        return needs

    def branch_signature(self) -> bytes:
        """Digest of relu masks and pooling argmaxes from the last forward."""
        h = hashlib.sha256()
        for node in self.nodes:
            c = self._cache["cache"].get(node.name) if self._cache else None
            if node.op == "relu":
                h.update(np.packbits(c).tobytes())
            elif node.op == "maxpool":
                for pc in c:
                    h.update(pc[0].astype(np.int8).tobytes())
        return h.digest()

    # ------------------------------------------------------------------ state

    def state_arrays(self) -> dict:
        """All named arrays that define the model (parameters then buffers)."""
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, arrays: dict) -> None:
        for k, v in arrays.items():
            target = self.params.get(k)
            if target is None:
                target = self.buffers.get(k)
            if target is None:
                raise KeyError(f"unknown array {k!r}")
            if target.shape != v.shape:
                raise T.ShapeError(f"array {k!r} has shape {v.shape}, expected {target.shape}")
            target[...] = v


def _mix(seed: int, idx: int) -> int:
    return (int(seed) * 1_000_003 + idx * 7919) % (2 ** 63)

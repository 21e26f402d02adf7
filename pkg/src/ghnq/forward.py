"""Execute architecture graphs, in float or under simulated quantization.

The float path is differentiable end to end and is what finetuning uses.
The quantized path runs gradient-free and follows the folded-inference
recipe: for a convolution whose only consumer is a BatchNorm, the current
batch's statistics are taken from a float convolution pass, the weights are
folded (gamma / sqrt(var + eps)), the folded weights are fake-quantized,
the convolution is re-run, and the leftover affine shift
``beta - gamma * mean / sqrt(var + eps)`` is applied in float. Every
activation is fake-quantized with an encoding from its own values on this
batch, except the output of Concat nodes, which passes through unchanged.
Weights of convolutions and linear layers without a folded BatchNorm are
fake-quantized directly; biases and unfolded BatchNorm parameters stay in
float.

A convolution bias feeding a folded BatchNorm cancels out of the algebra
(the shift absorbs it), so the folded path simply omits it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import nn
from .errors import GraphError, ShapeError
from .graphs import (CONV_KINDS, ArchGraph, NodeSpec, OpKind, topological_order)
from .quant import QuantConfig, bn_fold, compute_encoding, fake_quantize
from .tensor import Tensor, concat, no_grad, relu

PredictedParams = dict[int, list[Tensor]]

DEFAULT_BN_EPS = 1e-5


def validate_params(g: ArchGraph, params: PredictedParams) -> None:
    """Check complete coverage and exact shape match per parameterized node."""
    for node in g.parameterized_nodes():
        if node.id not in params:
            raise GraphError(f"missing parameters for node {node.id} ({node.kind.value})")
        expected = node.param_shapes()
        got = [tuple(t.shape) for t in params[node.id]]
        if got != [tuple(s) for s in expected]:
            raise GraphError(
                f"node {node.id} ({node.kind.value}) expects tensors of shapes "
                f"{expected}, got {got}")


def init_params(g: ArchGraph, seed: int = 0) -> PredictedParams:
    """He-style random parameters matching the graph's declared shapes."""
    rng = np.random.default_rng(seed)
    params: PredictedParams = {}
    for node in g.parameterized_nodes():
        tensors = []
        for i, shape in enumerate(node.param_shapes()):
            if node.kind is OpKind.BATCHNORM:
                data = np.ones(shape) if i == 0 else np.zeros(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                data = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)
            tensors.append(Tensor(data))
        params[node.id] = tensors
    return params


def _node_params(params: PredictedParams, node: NodeSpec) -> list[Tensor]:
    if node.id not in params:
        raise GraphError(f"missing parameters for node {node.id} ({node.kind.value})")
    return params[node.id]


def _apply_conv(node: NodeSpec, x: Tensor, weight: Tensor,
                bias: Optional[Tensor]) -> Tensor:
    a = node.attrs
    return nn.conv2d(x, weight, bias, stride=a["stride"], padding=a["padding"],
                     dilation=a["dilation"], groups=a["groups"])


def _apply_plain(node: NodeSpec, ins: list[Tensor], params: PredictedParams,
                 bn_eps: float) -> Tensor:
    """Float semantics of one node (used by both pipelines)."""
    kind = node.kind
    a = node.attrs
    if kind in CONV_KINDS:
        p = _node_params(params, node)
        return _apply_conv(node, ins[0], p[0], p[1] if a.get("bias") else None)
    if kind is OpKind.BATCHNORM:
        gamma, beta = _node_params(params, node)
        out, _, _ = nn.batchnorm2d(ins[0], gamma, beta, eps=bn_eps)
        return out
    if kind is OpKind.RELU:
        return relu(ins[0])
    if kind is OpKind.MAX_POOL:
        return nn.max_pool2d(ins[0], a["kernel"], a["stride"], a["padding"])
    if kind is OpKind.AVG_POOL:
        return nn.avg_pool2d(ins[0], a["kernel"], a["stride"], a["padding"])
    if kind is OpKind.GLOBAL_AVG_POOL:
        return nn.global_avg_pool(ins[0])
    if kind is OpKind.LINEAR:
        p = _node_params(params, node)
        x = ins[0]
        if x.ndim == 4:
            x = x.reshape(x.shape[0], -1)
        return nn.linear(x, p[0], p[1] if a.get("bias") else None)
    if kind is OpKind.RESIDUAL_ADD:
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out
    if kind is OpKind.CONCAT:
        return concat(ins, axis=1)
    if kind is OpKind.OUTPUT:
        return ins[0]
    raise GraphError(f"node {node.id}: unsupported kind {kind}")


def float_forward(g: ArchGraph, params: PredictedParams, batch: Tensor,
                  bn_eps: float = DEFAULT_BN_EPS) -> Tensor:
    """Differentiable plain execution; returns logits [N, num_classes]."""
    if batch.ndim != 4:
        raise ShapeError(f"batch must be [N,C,H,W], got {batch.shape}")
    if tuple(batch.shape[1:]) != tuple(g.input_resolution):
        raise ShapeError(
            f"batch resolution {tuple(batch.shape[1:])} != graph input "
            f"{tuple(g.input_resolution)}")
    preds = g.predecessors()
    values: dict[int, Tensor] = {}
    for nid in topological_order(g):
        node = g.node_by_id(nid)
        if node.kind is OpKind.INPUT:
            values[nid] = batch
        else:
            values[nid] = _apply_plain(node, [values[p] for p in preds[nid]],
                                       params, bn_eps)
    return values[_output_id(g)]


def _output_id(g: ArchGraph) -> int:
    for node in g.nodes:
        if node.kind is OpKind.OUTPUT:
            return node.id
    raise GraphError("graph has no output node")


def _fold_pairs(g: ArchGraph) -> dict[int, int]:
    """conv node id -> following BatchNorm id, where folding is valid.

    Folding requires the BatchNorm to be the convolution's only consumer.
    """
    preds = g.predecessors()
    succs = g.successors()
    pairs: dict[int, int] = {}
    for node in g.nodes:
        if node.kind is not OpKind.BATCHNORM:
            continue
        parents = preds[node.id]
        if len(parents) != 1:
            continue
        parent = g.node_by_id(parents[0])
        if parent.kind in CONV_KINDS and len(succs[parent.id]) == 1:
            pairs[parent.id] = node.id
    return pairs


def _channel_stats(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = data.shape
    if n * h * w < 2:
        raise ShapeError(
            f"quantized inference with BatchNorm needs batch statistics over "
            f">= 2 values, got N*H*W = {n * h * w}")
    mean = data.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(data.astype(np.float64) - mean[None, :, None, None]).mean(axis=(0, 2, 3))
    return mean.astype(data.dtype), var.astype(data.dtype)


def quantized_forward(g: ArchGraph, params: PredictedParams, batch: Tensor,
                      qc: QuantConfig) -> Tensor:
    """Execute under simulated quantization; float bypass is bit-identical
    to :func:`float_forward`."""
    validate_params(g, params)
    if qc.is_bypass:
        with no_grad():
            return float_forward(g, params, batch, bn_eps=qc.eps_fold)

    def fq(t: Tensor) -> Tensor:
        return fake_quantize(t, compute_encoding(t, qc.bitwidth))

    folds = _fold_pairs(g)
    folded_bns = set(folds.values())
    preds = g.predecessors()
    with no_grad():
        values: dict[int, Tensor] = {}
        pending: dict[int, Tensor] = {}  # folded conv id -> its input
        for nid in topological_order(g):
            node = g.node_by_id(nid)
            kind = node.kind
            if kind is OpKind.INPUT:
                values[nid] = fq(batch)
            elif nid in folds:
                pending[nid] = values[preds[nid][0]]
            elif kind is OpKind.BATCHNORM and nid in folded_bns:
                conv_id = preds[nid][0]
                conv = g.node_by_id(conv_id)
                xin = pending.pop(conv_id)
                weight = _node_params(params, conv)[0]
                gamma, beta = _node_params(params, node)
                stats_pass = _apply_conv(conv, xin, weight, None)
                mean, var = _channel_stats(stats_pass.data)
                w_fold = bn_fold(weight, gamma, Tensor(var), qc.eps_fold)
                w_q = fq(w_fold)
                out = _apply_conv(conv, xin, w_q, None)
                inv_std = 1.0 / np.sqrt(var.astype(np.float64) + qc.eps_fold)
                shift = (beta.data.astype(np.float64) -
                         gamma.data.astype(np.float64) * mean.astype(np.float64) * inv_std)
                shifted = out.data + shift.astype(out.dtype)[None, :, None, None]
                values[nid] = fq(Tensor(shifted, dtype=out.dtype))
            elif kind in CONV_KINDS:
                p = _node_params(params, node)
                bias = p[1] if node.attrs.get("bias") else None
                out = _apply_conv(node, values[preds[nid][0]], fq(p[0]), bias)
                values[nid] = fq(out)
            elif kind is OpKind.LINEAR:
                p = _node_params(params, node)
                x = values[preds[nid][0]]
                if x.ndim == 4:
                    x = x.reshape(x.shape[0], -1)
                bias = p[1] if node.attrs.get("bias") else None
                values[nid] = fq(nn.linear(x, fq(p[0]), bias))
            elif kind is OpKind.CONCAT:
                values[nid] = concat([values[p] for p in preds[nid]], axis=1)
            elif kind is OpKind.OUTPUT:
                values[nid] = values[preds[nid][0]]
            else:
                out = _apply_plain(node, [values[p] for p in preds[nid]],
                                   params, qc.eps_fold)
                values[nid] = fq(out)
        return values[_output_id(g)]


def per_layer_weight_mse(g: ArchGraph, params: PredictedParams,
                         qc: QuantConfig) -> dict[int, float]:
    """MSE between each conv/linear weight tensor and its fake-quantized form."""
    validate_params(g, params)
    weight_nodes = [n for n in g.parameterized_nodes()
                    if n.kind in CONV_KINDS or n.kind is OpKind.LINEAR]
    if qc.is_bypass:
        return {n.id: 0.0 for n in weight_nodes}
    per_layer = {}
    for node in weight_nodes:
        w = params[node.id][0].data
        wq = fake_quantize(w, compute_encoding(w, qc.bitwidth))
        per_layer[node.id] = float(np.mean((w.astype(np.float64) - wq) ** 2))
    return per_layer


def quant_error_metrics(g: ArchGraph, params: PredictedParams, batch: Tensor,
                        qc: QuantConfig) -> dict:
    """Weight-quantization MSE per layer plus float-vs-quantized logit MSE."""
    per_layer = per_layer_weight_mse(g, params, qc)
    if qc.is_bypass:
        return {"per_layer_mse": per_layer, "output_mse": 0.0}
    with no_grad():
        float_logits = float_forward(g, params, batch, bn_eps=qc.eps_fold)
    q_logits = quantized_forward(g, params, batch, qc)
    diff = float_logits.data.astype(np.float64) - q_logits.data.astype(np.float64)
    return {"per_layer_mse": per_layer, "output_mse": float(np.mean(diff ** 2))}

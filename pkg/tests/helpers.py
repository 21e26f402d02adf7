"""Shared independent oracles used by unit and acceptance tests."""

import numpy as np

from ghnq import nn
from ghnq.forward import _apply_plain, _fold_pairs, _node_params
from ghnq.graphs import OpKind, topological_order
from ghnq.tensor import Tensor, no_grad


def folded_reference_forward(g, params, batch, eps=1e-5):
    """Float execution where every conv->BN pair runs in folded form.

    Independent route for the fold identity: per pair, take this batch's
    conv-output statistics, scale the weights by gamma / sqrt(var + eps),
    convolve, then add the affine remainder. No quantization anywhere.
    """
    folds = _fold_pairs(g)
    folded_bns = set(folds.values())
    preds = g.predecessors()
    output_id = next(n.id for n in g.nodes if n.kind is OpKind.OUTPUT)
    with no_grad():
        values = {}
        pending = {}
        for nid in topological_order(g):
            node = g.node_by_id(nid)
            if node.kind is OpKind.INPUT:
                values[nid] = batch
            elif nid in folds:
                pending[nid] = values[preds[nid][0]]
            elif node.kind is OpKind.BATCHNORM and nid in folded_bns:
                conv_id = preds[nid][0]
                conv = g.node_by_id(conv_id)
                xin = pending.pop(conv_id)
                w = _node_params(params, conv)[0].data
                gamma, beta = (t.data for t in _node_params(params, node))
                a = conv.attrs
                y = nn.conv2d(xin, Tensor(w), stride=a["stride"],
                              padding=a["padding"], dilation=a["dilation"],
                              groups=a["groups"]).data
                mean = y.mean(axis=(0, 2, 3), dtype=np.float64)
                var = np.square(y.astype(np.float64) -
                                mean[None, :, None, None]).mean(axis=(0, 2, 3))
                inv = 1.0 / np.sqrt(var + eps)
                w_fold = (w.astype(np.float64) *
                          (gamma * inv).reshape(-1, 1, 1, 1)).astype(w.dtype)
                y2 = nn.conv2d(xin, Tensor(w_fold), stride=a["stride"],
                               padding=a["padding"], dilation=a["dilation"],
                               groups=a["groups"]).data
                shift = (beta - gamma * mean * inv).astype(y2.dtype)
                values[nid] = Tensor(y2 + shift[None, :, None, None])
            else:
                values[nid] = _apply_plain(node, [values[p] for p in preds[nid]],
                                           params, eps)
        return values[output_id]


def single_network_accuracy(g, params, images, labels, batch_size):
    """Standalone float accuracy oracle: plain forwards, argmax, fraction."""
    correct = 0
    total = 0
    logits_all = []
    with no_grad():
        from ghnq.forward import float_forward
        for start in range(0, len(labels), batch_size):
            xb = Tensor(images[start:start + batch_size])
            yb = labels[start:start + batch_size]
            logits = float_forward(g, params, xb)
            logits_all.append(logits.data)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(yb)
    return 100.0 * correct / total, np.concatenate(logits_all, axis=0)

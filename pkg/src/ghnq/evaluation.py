"""Quantization-robustness evaluation and report aggregation.

For every network in a split, parameters are predicted once; each requested
precision then runs the (possibly quantized) forward over the test set in
fixed-size batches, recomputing BatchNorm statistics and folded weights per
batch. Per split and precision the report carries mean, standard error of
the mean (n-1 divisor), and max top-1 accuracy, in percent, plus the
per-network accuracy list. Networks in a split can be evaluated by a
process pool; aggregation preserves submission order, so results do not
depend on the worker count.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import GhnqError, QuantError
from .forward import per_layer_weight_mse, quantized_forward
from .graphs import (ArchGraph, canonical_hash, compute_virtual_edges,
                     deserialize_graph, has_batchnorm, serialize_graph)
from .hypernet import Hypernet, HypernetConfig, predict
from .quant import FLOAT_BITWIDTH, QuantConfig
from .tensor import Tensor, no_grad

FLOAT_TOKEN = "float32"
DEFAULT_PRECISIONS = (FLOAT_TOKEN, "quant8", "quant4")


def parse_precision(token: str, eps_fold: float = 1e-5) -> QuantConfig:
    """Map 'float32' or 'quantN' (2 <= N <= 8) to a QuantConfig."""
    token = token.strip().lower()
    if token == FLOAT_TOKEN:
        return QuantConfig(bitwidth=FLOAT_BITWIDTH, eps_fold=eps_fold)
    if token.startswith("quant"):
        try:
            bits = int(token[len("quant"):])
        except ValueError:
            raise QuantError(f"unknown precision token '{token}'") from None
        return QuantConfig(bitwidth=bits, eps_fold=eps_fold)
    raise QuantError(f"unknown precision token '{token}' "
                     f"(expected float32 or quantN)")


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean with the n-1 divisor; 0 for n < 2."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))


@dataclasses.dataclass
class EvalRow:
    split: str
    precision: str
    n: int
    mean_pct: float
    sem_pct: float
    max_pct: float
    per_network: list[float]
    per_network_mse: Optional[list[float]] = None

    def __post_init__(self):
        if self.per_network and not all(0.0 <= a <= 100.0 for a in self.per_network):
            raise GhnqError("accuracies must lie in [0, 100]")

    def cell(self) -> str:
        """Table cell in the (Mean%±SEM; Max%) shape."""
        return f"{self.mean_pct:.1f}±{self.sem_pct:.1f}; {self.max_pct:.1f}"


class EvalReport:
    """Per split x precision accuracy statistics plus per-network detail."""

    def __init__(self, rows: list[EvalRow],
                 network_hashes: Optional[dict[str, list[str]]] = None):
        self.rows = rows
        self.network_hashes = network_hashes or {}

    def row(self, split: str, precision: str) -> EvalRow:
        for r in self.rows:
            if r.split == split and r.precision == precision:
                return r
        raise KeyError((split, precision))

    def to_csv_text(self) -> str:
        lines = ["split,precision,n,mean_pct,sem_pct,max_pct"]
        for r in self.rows:
            lines.append(f"{r.split},{r.precision},{r.n},"
                         f"{r.mean_pct:.4f},{r.sem_pct:.4f},{r.max_pct:.4f}")
        return "\n".join(lines) + "\n"

    def to_detail_dict(self) -> dict:
        splits: dict = {}
        for r in self.rows:
            entry = splits.setdefault(r.split, {})
            hashes = self.network_hashes.get(r.split, [None] * r.n)
            networks = []
            for i, acc in enumerate(r.per_network):
                rec = {"graph_hash": hashes[i], "accuracy_pct": round(acc, 4)}
                if r.per_network_mse is not None:
                    rec["mean_weight_quant_mse"] = r.per_network_mse[i]
                networks.append(rec)
            entry[r.precision] = {
                "n": r.n, "mean_pct": round(r.mean_pct, 4),
                "sem_pct": round(r.sem_pct, 4), "max_pct": round(r.max_pct, 4),
                "per_network": networks,
            }
        return {"splits": splits}

    def format_table(self) -> str:
        """Readable summary: one row per precision, one column per split."""
        splits = list(dict.fromkeys(r.split for r in self.rows))
        precisions = list(dict.fromkeys(r.precision for r in self.rows))
        width = 22
        header = "precision".ljust(10) + "".join(s.ljust(width) for s in splits)
        lines = [header]
        for p in precisions:
            cells = []
            for s in splits:
                try:
                    cells.append(self.row(s, p).cell().ljust(width))
                except KeyError:
                    cells.append("-".ljust(width))
            lines.append(p.ljust(10) + "".join(cells))
        return "\n".join(lines)


def _iter_batches(data: Dataset, batch_size: int, drop_below_two: bool):
    for start in range(0, len(data), batch_size):
        labels = data.labels[start:start + batch_size]
        if drop_below_two and len(labels) < 2:
            continue
        yield data.images[start:start + batch_size], labels


def _network_accuracy(g: ArchGraph, params, data: Dataset, qc: QuantConfig,
                      batch_size: int) -> float:
    drop = has_batchnorm(g)
    correct = 0
    total = 0
    for images, labels in _iter_batches(data, batch_size, drop):
        logits = quantized_forward(g, params, Tensor(images), qc)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        total += len(labels)
    if total == 0:
        raise GhnqError("no evaluable batches (test set smaller than 2?)")
    return 100.0 * correct / total


def _evaluate_one(h: Hypernet, g: ArchGraph, data: Dataset,
                  precisions: list[tuple[str, QuantConfig]],
                  batch_size: int) -> dict[str, tuple[float, Optional[float]]]:
    if g.virtual_edges is None:
        g = compute_virtual_edges(g, h.cfg.s_max)
    with no_grad():
        params = predict(h, g)
    out = {}
    for token, qc in precisions:
        acc = _network_accuracy(g, params, data, qc, batch_size)
        mse = None
        if not qc.is_bypass:
            layer_mse = per_layer_weight_mse(g, params, qc)
            mse = float(np.mean(list(layer_mse.values()))) if layer_mse else 0.0
        out[token] = (acc, mse)
    return out


def _worker(payload) -> dict:
    cfg_kwargs, arrays, graph_text, data, tokens, eps_fold, batch_size = payload
    cfg = HypernetConfig(**cfg_kwargs)
    h = Hypernet(cfg, {name: Tensor(a) for name, a in arrays.items()})
    g = deserialize_graph(graph_text)
    precisions = [(t, parse_precision(t, eps_fold)) for t in tokens]
    return _evaluate_one(h, g, data, precisions, batch_size)


def evaluate(h: Hypernet, splits: dict[str, list[ArchGraph]], data: Dataset,
             precisions: Sequence[str] = DEFAULT_PRECISIONS,
             test_batch_size: int = 64, jobs: int = 1,
             eps_fold: float = 1e-5) -> EvalReport:
    """Aggregate accuracy statistics for every split and precision."""
    if test_batch_size < 2:
        raise GhnqError("test_batch_size must be >= 2")
    tokens = list(precisions)
    parsed = [(t, parse_precision(t, eps_fold)) for t in tokens]
    for name, members in splits.items():
        if not members:
            raise GhnqError(f"split '{name}' is empty")

    results: dict[str, list[dict]] = {}
    if jobs > 1:
        cfg_kwargs = dataclasses.asdict(h.cfg)
        cfg_kwargs["canonical_shape"] = tuple(cfg_kwargs["canonical_shape"])
        arrays = {name: t.data for name, t in h.params().items()}
        payloads = []
        order = []
        for name, members in splits.items():
            for g in members:
                gv = g if g.virtual_edges is not None else compute_virtual_edges(
                    g, h.cfg.s_max)
                payloads.append((cfg_kwargs, arrays, serialize_graph(gv), data,
                                 tokens, eps_fold, test_batch_size))
                order.append(name)
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_worker, payloads))
        for name, outcome in zip(order, outcomes):
            results.setdefault(name, []).append(outcome)
    else:
        for name, members in splits.items():
            results[name] = [_evaluate_one(h, g, data, parsed, test_batch_size)
                             for g in members]

    rows: list[EvalRow] = []
    hashes = {name: [canonical_hash(g) for g in members]
              for name, members in splits.items()}
    for name, members in splits.items():
        outcomes = results[name]
        for token, qc in parsed:
            accs = [o[token][0] for o in outcomes]
            mses = None
            if not qc.is_bypass:
                mses = [o[token][1] for o in outcomes]
            rows.append(EvalRow(
                split=name, precision=token, n=len(accs),
                mean_pct=float(np.mean(accs)), sem_pct=sem(accs),
                max_pct=float(np.max(accs)), per_network=accs,
                per_network_mse=mses))
    return EvalReport(rows, hashes)


def per_network_robustness(h: Hypernet, g: ArchGraph, data: Dataset,
                           qc: QuantConfig, test_batch_size: int = 64) -> dict:
    """Float-vs-quantized comparison for one network on identical batches."""
    if g.virtual_edges is None:
        g = compute_virtual_edges(g, h.cfg.s_max)
    with no_grad():
        params = predict(h, g)
    float_qc = QuantConfig(bitwidth=FLOAT_BITWIDTH, eps_fold=qc.eps_fold)
    drop = has_batchnorm(g)
    correct_f = correct_q = total = 0
    sq_sum = 0.0
    elements = 0
    for images, labels in _iter_batches(data, test_batch_size, drop):
        batch = Tensor(images)
        f_logits = quantized_forward(g, params, batch, float_qc)
        q_logits = quantized_forward(g, params, batch, qc)
        correct_f += int((f_logits.data.argmax(axis=1) == labels).sum())
        correct_q += int((q_logits.data.argmax(axis=1) == labels).sum())
        total += len(labels)
        diff = f_logits.data.astype(np.float64) - q_logits.data.astype(np.float64)
        sq_sum += float((diff ** 2).sum())
        elements += diff.size
    if total == 0:
        raise GhnqError("no evaluable batches")
    acc_f = 100.0 * correct_f / total
    acc_q = 100.0 * correct_q / total
    return {
        "accuracy_float": acc_f,
        "accuracy_quant": acc_q,
        "accuracy_delta": acc_f - acc_q,
        "output_mse": sq_sum / elements,
        "per_layer_mse": per_layer_weight_mse(g, params, qc),
    }


def layerwise_distribution_stats(params: dict[int, list]) -> dict[int, list[dict]]:
    """Min/max/std/excess-kurtosis per predicted tensor, keyed by node id."""
    if not params:
        raise GhnqError("no predicted parameters to summarize")
    stats: dict[int, list[dict]] = {}
    for nid in sorted(params):
        rows = []
        for t in params[nid]:
            x = np.asarray(t.data if hasattr(t, "data") else t, dtype=np.float64).ravel()
            mu = x.mean()
            m2 = ((x - mu) ** 2).mean()
            std = float(np.sqrt(m2))
            degenerate = m2 < 1e-24 or x.size < 2
            if degenerate:
                kurtosis = 0.0
            else:
                m4 = ((x - mu) ** 4).mean()
                kurtosis = float(m4 / (m2 * m2) - 3.0)
            rows.append({"min": float(x.min()), "max": float(x.max()),
                         "std": std, "kurtosis": kurtosis,
                         "degenerate": bool(degenerate)})
        stats[nid] = rows
    return stats

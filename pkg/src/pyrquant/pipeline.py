"""Glue between a :class:`RunConfig` and the training / retrieval modules.

Every function here is deterministic given the config seed, so the CLI
commands, the sweep runner and the tests all produce the same numbers for
the same inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .dataio import DatasetSplit, FeatureDataset, load_dataset, split_dataset
from .quantization import code_bits
from .retrieval import (RetrievalIndex, aqd_search_batch, encode_database, evaluate_rankings,
                        exact_search_batch)
from .training import (HyperParams, ModelParams, TrainConfig, TrainResult, apply_variant,
                       data_init, embed, train)

log = logging.getLogger(__name__)


def load_run_data(cfg: RunConfig):
    """Dataset from ``cfg.data_dir/manifest.tsv`` plus its protocol split."""
    manifest = Path(cfg.data_dir) / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}; run gen-data first")
    ds = load_dataset(manifest)
    return ds, make_split(cfg, ds)


def make_split(cfg: RunConfig, ds: FeatureDataset) -> DatasetSplit:
    return split_dataset(ds.labels, ds.splits, cfg.protocol, cfg.holdout, cfg.seed)


def build_hyper(cfg: RunConfig, ds: FeatureDataset, M: int) -> HyperParams:
    hyper = HyperParams(
        c2=ds.stage2.shape[-1], c3=ds.stage3.shape[-1], c4=ds.stage4.shape[-1],
        D=cfg.D, M=M, K=cfg.K, num_classes=ds.num_classes, rho=tuple(cfg.rho),
        alpha=cfg.alpha, kappa=cfg.kappa, tau=cfg.tau, m_plus=cfg.m_plus,
        m_minus=cfg.m_minus, gamma=cfg.gamma,
    )
    return apply_variant(hyper, cfg.variant)


def bit_budget(M: int, K: int) -> int:
    return M * code_bits(K)


def _validation_split(cfg: RunConfig, ds: FeatureDataset, train_idx: np.ndarray):
    """Carve a per-class validation query set out of the training items."""
    labels = ds.labels[train_idx]
    per_class = np.bincount(labels).max()
    holdout = max(1, min(cfg.holdout, int(per_class) // 5))
    rng = np.random.default_rng(cfg.seed + 1)
    val = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) > holdout:
            val.extend(rng.permutation(members)[:holdout].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    fit = np.setdiff1d(np.arange(len(train_idx)), val)
    return train_idx[fit], train_idx[val]


@dataclass
class TrainedModel:
    params: ModelParams
    result: TrainResult
    initial: ModelParams


def train_model(cfg: RunConfig, ds: FeatureDataset, split: DatasetSplit, M: int) -> TrainedModel:
    """Initialise, optionally warm-start, then train one model with ``M`` codebooks."""
    hyper = build_hyper(cfg, ds, M)
    pooled = ds.pooled(hyper.rhos)
    fit_idx, val_idx = split.train, None
    if cfg.validate:
        fit_idx, val_idx = _validation_split(cfg, ds, split.train)
    params = ModelParams.init(hyper, cfg.seed)
    if cfg.data_init:
        data_init(params, pooled.take(fit_idx), kmeans=cfg.kmeans_init, seed=cfg.seed)
    initial = params.copy()
    val_fn = None
    if val_idx is not None:
        def validation_map(p: ModelParams) -> float:
            index = encode_database(embed(p, pooled.take(fit_idx)), p.codebook, ds.labels[fit_idx])
            rows, _ = aqd_search_batch(embed(p, pooled.take(val_idx)), index, len(index))
            return evaluate_rankings(rows, ds.labels[val_idx], index.labels,
                                     np.full(len(val_idx), -1))["map"]
        val_fn = validation_map
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    result = train(params, pooled.take(fit_idx), ds.labels[fit_idx], tcfg, val_fn)
    if cfg.select == "best" and result.best_params is not None:
        params = result.best_params
    return TrainedModel(params, result, initial)


def build_index(params: ModelParams, ds: FeatureDataset, split: DatasetSplit) -> RetrievalIndex:
    """Encoded database; codewords are rounded to float32 exactly as the index file stores them,
    so in-memory and reloaded indexes rank identically."""
    pooled = ds.pooled(params.hyper.rhos)
    db = split.database
    index = encode_database(embed(params, pooled.take(db)), params.codebook, ds.labels[db],
                            [ds.ids[i] for i in db])
    return RetrievalIndex(index.codewords.astype(np.float32), index.codes, index.labels, index.ids)


def query_embeddings(params: ModelParams, ds: FeatureDataset, idx: np.ndarray) -> np.ndarray:
    return embed(params, ds.pooled(params.hyper.rhos).take(idx))


def _exclusions(index: RetrievalIndex, ids: Sequence[str]) -> np.ndarray:
    return np.array([index.position(i) for i in ids], dtype=np.int64)


def evaluate_model(cfg: RunConfig, params: ModelParams, index: RetrievalIndex,
                   ds: FeatureDataset, split: DatasetSplit) -> dict:
    """Quantized (AQD) and exact-embedding MAP plus P@N on the query set."""
    q_ids = [ds.ids[i] for i in split.query]
    q_labels = ds.labels[split.query]
    zq = query_embeddings(params, ds, split.query)
    exclude = _exclusions(index, q_ids)
    top = len(index) - int(np.any(exclude >= 0))
    dtype = np.dtype(cfg.search_dtype).type
    rows, _ = aqd_search_batch(zq, index, top, query_ids=q_ids, dtype=dtype)
    quant = evaluate_rankings(rows, q_labels, index.labels, exclude, cfg.p_at_n)
    zdb = embed(params, ds.pooled(params.hyper.rhos).take(split.database))
    erows, _ = exact_search_batch(zq, zdb, top, exclude=exclude)
    exact = evaluate_rankings(erows, q_labels, index.labels, exclude, cfg.p_at_n)
    h = params.hyper
    return {
        "M": h.M, "K": h.K, "bits": bit_budget(h.M, h.K), "kappa": h.effective_kappa,
        "queries": len(q_ids), "items": len(index),
        "map": quant["map"], "exact_map": exact["map"],
        "p_at_n": {str(k): v for k, v in quant.get("p_at_n", {}).items()},
    }


def run_single(cfg: RunConfig, ds: FeatureDataset, split: DatasetSplit, M: int) -> dict:
    """Train, encode and evaluate in memory for one codebook count."""
    model = train_model(cfg, ds, split, M)
    index = build_index(model.params, ds, split)
    report = evaluate_model(cfg, model.params, index, ds, split)
    report["final_loss"] = model.result.history[-1]["loss"] if model.result.history else None
    return report


def run_experiment(cfg: RunConfig, ds: FeatureDataset, split: Optional[DatasetSplit] = None,
                   m_values: Optional[Sequence[int]] = None) -> List[dict]:
    split = split if split is not None else make_split(cfg, ds)
    return [run_single(cfg, ds, split, M) for M in (m_values or cfg.m_values)]


# ---------------------------------------------------------------- reports

def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.4f}"
    return str(v)


def metrics_tables(reports: Sequence[dict]) -> Dict[str, List[List[str]]]:
    """MAP per bit budget and a P@N table, as lists of string rows."""
    reports = sorted(reports, key=lambda r: r["bits"])
    cols = [f"{r['bits']} bits" for r in reports]
    map_rows = [["metric"] + cols,
                ["MAP (AQD)"] + [_fmt(r["map"]) for r in reports],
                ["MAP (exact)"] + [_fmt(r["exact_map"]) for r in reports]]
    ns = sorted({int(n) for r in reports for n in r.get("p_at_n", {})})
    pn_rows = [["N"] + cols]
    for n in ns:
        pn_rows.append([f"P@{n}"] + [_fmt(r["p_at_n"].get(str(n))) for r in reports])
    return {"map": map_rows, "p_at_n": pn_rows}


def render_tsv(rows: Sequence[Sequence[str]]) -> str:
    return "".join("\t".join(r) + "\n" for r in rows)


def render_markdown(rows: Sequence[Sequence[str]]) -> str:
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(out) + "\n"


def write_metrics(out_dir: Path, reports: Sequence[dict]) -> Dict[str, Path]:
    """``metrics.json`` (machine), ``metrics.tsv`` and ``metrics.md`` (human)."""
    out_dir = Path(out_dir)
    tables = metrics_tables(reports)
    paths = {"json": out_dir / "metrics.json", "tsv": out_dir / "metrics.tsv",
             "md": out_dir / "metrics.md"}
    ordered = sorted(reports, key=lambda r: r["bits"])
    paths["json"].write_text(json.dumps(ordered, indent=2, sort_keys=True) + "\n")
    paths["tsv"].write_text(render_tsv(tables["map"]) + "\n" + render_tsv(tables["p_at_n"]))
    paths["md"].write_text("## Retrieval MAP\n\n" + render_markdown(tables["map"])
                           + "\n## Precision at N (AQD)\n\n" + render_markdown(tables["p_at_n"]))
    return paths


# ----------------------------------------------------------------- sweeps

SWEEP_PARAMS = ("alpha", "tau", "kappa", "rho_order")
RHO_ORDERS = {"default": "3/2/1", "descending": "3/2/1", "ascending": "1/2/3",
              "gap": "1/1/1", "gmp": "inf/inf/inf"}


def sweep_config(base: RunConfig, param: str, value: str, seed: int) -> RunConfig:
    """Config for one sweep point; ``value`` is the raw command-line token."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    changes = {"seed": seed}
    if param == "alpha":
        changes["alpha"] = float(value)
    elif param == "tau":
        changes["tau"] = float(value)
    elif param == "kappa":
        changes["kappa"] = base.K if value == "K" else int(value)
    else:
        triple = RHO_ORDERS.get(value, value)
        changes["rho"] = [float(v) for v in triple.split("/")]
        if len(changes["rho"]) != 3:
            raise ValueError(f"rho_order value {value!r}: expected a name or a/b/c")
    cfg = replace(base, **changes)
    cfg.validate_values()
    return cfg


@dataclass
class SweepCell:
    value: str
    seed: int
    reports: List[dict]
    error: Optional[str] = None


def sweep_table(param: str, values: Sequence[str], cells: Sequence[SweepCell],
                budgets: Sequence[int]) -> List[List[str]]:
    """Rows are values, columns bit budgets, cells the MAP mean over successful seeds."""
    rows = [[param] + [f"{b} bits" for b in budgets] + ["failed"]]
    for v in values:
        mine = [c for c in cells if c.value == v]
        row = [v]
        for b in budgets:
            maps = [r["map"] for c in mine if c.error is None for r in c.reports if r["bits"] == b]
            row.append(_fmt(float(np.mean(maps))) if maps else "-")
        row.append(str(sum(c.error is not None for c in mine)))
        rows.append(row)
    return rows

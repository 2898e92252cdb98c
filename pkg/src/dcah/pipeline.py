"""End-to-end runs: one (model, enhancement, seed) at a time, or the whole method matrix."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Dataset, query_features
from .evaluation import PARTS, EvalProtocol, aggregate_runs, format_table, mad
from .model import DcahModel, ModelConfig
from .train import TrainConfig, evaluate_model, pretrain_ssl, train_link_prediction

log = logging.getLogger(__name__)

MODELS = {"gcn": "gcn_only", "hypergcn": "hyper_only", "dcah": "dcah"}
ENHANCEMENTS = ("plain", "dropedge", "ssl", "ssl+dropedge")
DISPLAY = {"gcn": "GCN", "hypergcn": "HyperGCN", "dcah": "DCAH"}


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    """A row of the method matrix, e.g. ``dcah+ssl+dropedge``."""

    model: str
    enhancement: str = "plain"

    def __post_init__(self):
        if self.model not in MODELS:
            raise VariantError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.enhancement not in ENHANCEMENTS:
            raise VariantError(f"unknown enhancement {self.enhancement!r}")

    @classmethod
    def parse(cls, text: str) -> "Variant":
        head, _, rest = text.strip().lower().partition("+")
        aliases = {"gcn_only": "gcn", "hyper_only": "hypergcn", "hypergraph": "hypergcn"}
        head = aliases.get(head, head)
        if not rest:
            return cls(head)
        parts = set(rest.split("+"))
        if not parts <= {"ssl", "dropedge"}:
            raise VariantError(f"cannot parse variant {text!r}")
        return cls(head, "+".join(p for p in ("ssl", "dropedge") if p in parts))

    @property
    def name(self) -> str:
        return self.model if self.enhancement == "plain" else f"{self.model}+{self.enhancement}"

    @property
    def label(self) -> str:
        base = DISPLAY[self.model]
        return base if self.enhancement == "plain" else base + "".join(
            "+SSL" if p == "ssl" else "+DropEdge" for p in self.enhancement.split("+"))

    @property
    def mode(self) -> str:
        return MODELS[self.model]

    @property
    def uses_ssl(self) -> bool:
        return "ssl" in self.enhancement

    @property
    def uses_dropedge(self) -> bool:
        return "dropedge" in self.enhancement


def all_variants() -> list[Variant]:
    return [Variant(m, e) for m in MODELS for e in ENHANCEMENTS]


def variant_config(base: TrainConfig, variant: Variant, seed: int) -> TrainConfig:
    """Switch SSL and DropEdge on or off; the base config supplies their strengths."""
    return replace(
        base,
        ssl_epochs=base.ssl_epochs if variant.uses_ssl else 0,
        dropedge_rate=base.dropedge_rate if variant.uses_dropedge else 0.0,
        dropedge_rate_bipartite=base.dropedge_rate_bipartite if variant.uses_dropedge else None,
        dropedge_rate_hypergraph=base.dropedge_rate_hypergraph if variant.uses_dropedge else None,
        seed=seed,
    )


@dataclass
class RunResult:
    variant: str
    seed: int
    parts: dict[str, dict[str, float]]
    beta: list[float]
    mad_query: float
    mad_item: float
    log_rows: list[dict] = field(default_factory=list)
    model: DcahModel | None = None

    def summary(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "parts": self.parts, "beta": self.beta,
                "mad_query": self.mad_query, "mad_item": self.mad_item}


def init_model(dataset: Dataset, mode: str, cfg: TrainConfig) -> DcahModel:
    qf = query_features(dataset, cfg.hidden_dim)
    mcfg = ModelConfig(dataset.bipartite.num_queries, dataset.bipartite.num_items,
                       hidden_dim=cfg.hidden_dim, num_layers=cfg.num_layers, mode=mode, dropout=cfg.dropout)
    return DcahModel.init(mcfg, qf, np.random.default_rng([cfg.seed, 0]))


def pretrain_stage(dataset: Dataset, protocol: EvalProtocol, variant: Variant, base: TrainConfig, seed: int,
                   rows: list | None = None) -> DcahModel:
    """Fresh model for ``seed``, contrastively pretrained when the variant uses SSL."""
    cfg = variant_config(base, variant, seed)
    model = init_model(dataset, variant.mode, cfg)
    pretrain_ssl(model, protocol.train_graph(), dataset.hypergraph, cfg, np.random.default_rng([seed, 1]), rows)
    return model


def train_stage(model: DcahModel, dataset: Dataset, protocol: EvalProtocol, variant: Variant, base: TrainConfig,
                seed: int, rows: list | None = None) -> DcahModel:
    # separate streams so that switching SSL on does not shift the training draws
    cfg = variant_config(base, variant, seed)
    return train_link_prediction(model, dataset.hypergraph, protocol, cfg, np.random.default_rng([seed, 2]), rows)


def evaluate_stage(model: DcahModel, dataset: Dataset, protocol: EvalProtocol, variant: Variant, seed: int,
                   rows: list | None = None) -> RunResult:
    res = evaluate_model(model, protocol, dataset.hypergraph)
    q, i = res["embeddings"]
    with warnings.catch_warnings():
        # hypergraph-isolated items embed to zero in HyperGCN; MAD skips them by design
        warnings.simplefilter("ignore")
        mq, mi = mad(q), mad(i)
    return RunResult(variant.name, seed, res["parts"], res["beta"], mq, mi, rows or [], model)


def run_single(dataset: Dataset, protocol: EvalProtocol, variant: Variant, base: TrainConfig, seed: int,
               keep_model: bool = False) -> RunResult:
    """Pretrain (if SSL), train, and evaluate one variant with one seed."""
    rows: list[dict] = []
    model = pretrain_stage(dataset, protocol, variant, base, seed, rows)
    train_stage(model, dataset, protocol, variant, base, seed, rows)
    res = evaluate_stage(model, dataset, protocol, variant, seed, rows)
    if not keep_model:
        res.model = None
    return res


def run_matrix(dataset: Dataset, protocol: EvalProtocol, variants: list[Variant], base: TrainConfig,
               seeds: list[int], progress=None, log_rows: list | None = None) -> dict:
    """Every variant under every seed; returns the aggregated report dict.

    ``log_rows`` collects every training log row tagged with variant and seed.
    """
    runs = []
    for v in variants:
        for s in seeds:
            r = run_single(dataset, protocol, v, base, s)
            runs.append(r.summary())
            if log_rows is not None:
                log_rows.extend({"variant": v.name, "seed": s, **row} for row in r.log_rows)
            if progress:
                progress(r)
    return build_report(runs, variants, base, seeds)


def build_report(runs: list[dict], variants: list[Variant], base: TrainConfig, seeds: list[int]) -> dict:
    rows = {}
    for v in variants:
        mine = [r for r in runs if r["variant"] == v.name]
        agg = aggregate_runs([r["parts"] for r in mine])
        rows[v.name] = {
            "label": v.label,
            "parts": agg,
            "mad_query": _mean_std([r["mad_query"] for r in mine]),
            "mad_item": _mean_std([r["mad_item"] for r in mine]),
            "beta": np.mean([r["beta"] for r in mine], axis=0).tolist(),
        }
    # "order" keeps the row layout, since canonical JSON sorts the variant keys
    return {"train_config": base.to_dict(), "seeds": list(seeds), "parts": list(PARTS),
            "order": [v.name for v in variants], "variants": rows, "runs": runs}


def _mean_std(vals) -> dict:
    a = np.asarray(vals, dtype=np.float64)
    return {"mean": float(np.nanmean(a)), "std": float(np.nanstd(a))}


def report_text(report: dict, title: str = "") -> str:
    rows = [report["variants"][name] for name in report["order"]]
    table = format_table({r["label"]: r["parts"] for r in rows}, title)
    lines = [table, f"{'Model':<28}{'MAD query':>14}{'MAD item':>14}{'beta BG':>10}{'beta HG':>10}"]
    for r in rows:
        lines.append(f"{r['label']:<28}{r['mad_query']['mean']:>14.4f}{r['mad_item']['mean']:>14.4f}"
                     f"{r['beta'][0]:>10.3f}{r['beta'][1]:>10.3f}")
    return "\n".join(lines) + "\n"


def dumps(obj) -> str:
    """Canonical JSON used for every report so reruns compare byte for byte."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"

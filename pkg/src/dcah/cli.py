"""Command-line front end: generate, split, pretrain, train, evaluate, analyze, matrix.

Every subcommand reads an optional JSON config (validated against ``CONFIG_SCHEMA``);
each flag overrides the config key of the same name. Outputs go to a run directory
and always include ``manifest.json`` with the resolved config and file digests.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .datagen import Dataset, GenSpec, generate, load_dataset, load_edges, load_hyperedges, save_dataset
from .evaluation import (
    PARTS,
    EvalProtocol,
    ProtocolError,
    degree_assortativity,
    degree_histogram,
    mad,
    relative_degree,
    split_four_parts,
)
from .graph import GraphInputError, Hypergraph, bipartite_operator, hypergraph_operator
from .model import DcahModel, ModelConfigError, embed, load_checkpoint_embeddings
from .pipeline import (
    Variant,
    VariantError,
    all_variants,
    build_report,
    dumps,
    evaluate_stage,
    pretrain_stage,
    report_text,
    run_matrix,
    train_stage,
)
from .train import NumericalError, TrainConfig, TrainConfigError, write_log

log = logging.getLogger("dcah")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4, 5
CHECKPOINT, SPLIT_FILE, MANIFEST = "checkpoint.json", "split.json", "manifest.json"
DEFAULT_SEEDS = list(range(10))


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# config schema and flags, both derived from the dataclasses
# --------------------------------------------------------------------------


def _field_schema(f: dataclasses.Field) -> dict:
    d = f.default
    if isinstance(d, bool):
        return {"type": "boolean"}
    if isinstance(d, int):
        return {"type": "integer"}
    if isinstance(d, float):
        return {"type": "number"}
    if isinstance(d, tuple):
        return {"type": "array", "items": {"type": "integer"}, "minItems": len(d), "maxItems": len(d)}
    return {"type": ["number", "null"]}


def _section_schema(cls, skip=()) -> dict:
    props = {f.name: _field_schema(f) for f in dataclasses.fields(cls) if f.name not in skip}
    return {"type": "object", "properties": props, "additionalProperties": False}


PATH_KEYS = ("data", "split", "out", "checkpoint", "init", "edges", "hyperedges")
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **{k: {"type": "string"} for k in PATH_KEYS},
        "generate": _section_schema(GenSpec),
        "train": _section_schema(TrainConfig, skip=("seed",)),
        "variant": {"type": "string"},
        "variants": {"anyOf": [{"const": "all"}, {"type": "array", "items": {"type": "string"}, "minItems": 1}]},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "split_seed": {"type": "integer", "minimum": 0},
        "train_on_excluded": {"type": "boolean"},
        "mad": {"type": "boolean"},
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_section_flags(p: argparse.ArgumentParser, cls, section: str, skip=()) -> None:
    g = p.add_argument_group(f"{section} settings (override config '{section}' keys)")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        dest = f"{section}.{f.name}"
        kind = _field_schema(f)["type"]
        if kind == "boolean":
            g.add_argument(_flag(f.name), dest=dest, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif kind == "array":
            g.add_argument(_flag(f.name), dest=dest, type=int, nargs=len(f.default), default=argparse.SUPPRESS)
        else:
            g.add_argument(_flag(f.name), dest=dest, type=int if kind == "integer" else float,
                           default=argparse.SUPPRESS)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcah", description="Dual-channel query-item link prediction toolkit.")
    ap.add_argument("--version", action="version", version=f"dcah {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--out", default=argparse.SUPPRESS, help="run directory for outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    def data_args(p, split=True):
        p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
        if split:
            p.add_argument("--split", default=argparse.SUPPRESS, help="split.json from the split subcommand")

    p = cmd("generate", "write a synthetic dataset directory")
    _add_section_flags(p, GenSpec, "generate")

    p = cmd("split", "four-part train/val/test split with fixed negatives")
    data_args(p, split=False)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--train-on-excluded", dest="train_on_excluded", action=argparse.BooleanOptionalAction,
                   default=argparse.SUPPRESS)

    for name, text in (("pretrain", "contrastive pretraining only"),
                       ("train", "pretrain (for SSL variants), train, and evaluate one run")):
        p = cmd(name, text)
        data_args(p)
        p.add_argument("--variant", default=argparse.SUPPRESS, help="e.g. dcah, gcn+dropedge, dcah+ssl+dropedge")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        if name == "train":
            p.add_argument("--init", default=argparse.SUPPRESS, help="checkpoint from pretrain to start from")
        _add_section_flags(p, TrainConfig, "train", skip=("seed",))

    p = cmd("evaluate", "score a checkpoint on the split's test edges")
    data_args(p)
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)

    p = cmd("analyze", "graph diagnostics, plus MAD when a checkpoint is given")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--edges", default=argparse.SUPPRESS, help="edge file (instead of --data)")
    p.add_argument("--hyperedges", default=argparse.SUPPRESS, help="hyperedge file (with --edges)")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--mad", action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                   help="require MAD (fails without a checkpoint)")

    p = cmd("matrix", "every variant under every seed, aggregated")
    data_args(p)
    p.add_argument("--variants", default=argparse.SUPPRESS, help="'all' or comma-separated variant names")
    p.add_argument("--seeds", type=_seeds, default=argparse.SUPPRESS)
    _add_section_flags(p, TrainConfig, "train", skip=("seed",))
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    """Config file, then flags on top; validated against the schema."""
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON: {e}")
    for key, val in vars(args).items():
        if key in ("command", "config", "verbose"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            cfg.setdefault(section, {})[name] = list(val) if isinstance(val, tuple) else val
        elif key == "variants" and isinstance(val, str):
            cfg[key] = "all" if val == "all" else [v for v in val.split(",") if v]
        else:
            cfg[key] = val
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {e.message}")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(_flag(k) for k in missing))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _variant(cfg: dict, default: str = "dcah") -> Variant:
    return Variant.parse(cfg.get("variant", default))


# --------------------------------------------------------------------------
# I/O helpers
# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(cfg: dict) -> dict:
    out = {}
    for key in PATH_KEYS:
        if key == "out" or key not in cfg:
            continue
        p = Path(cfg[key])
        files = sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
        for f in files:
            out[f"{key}/{f.name}" if p.is_dir() else key] = _sha256(f)
    return out


def _out_dir(cfg: dict) -> Path:
    _require(cfg, "out")
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(out: Path, command: str, cfg: dict, inputs: dict, extra: dict | None = None) -> None:
    outputs = {f.name: _sha256(f) for f in sorted(out.iterdir()) if f.is_file() and f.name != MANIFEST}
    doc = {"command": command, "version": __version__, "config": cfg, "inputs": inputs, "outputs": outputs}
    if extra:
        doc.update(extra)
    (out / MANIFEST).write_text(dumps(doc))


def _load_data(cfg: dict) -> Dataset:
    _require(cfg, "data")
    d = Path(cfg["data"])
    if not d.is_dir():
        raise InputError(f"dataset directory not found: {d}")
    return load_dataset(d)


def _load_split(cfg: dict, ds: Dataset) -> EvalProtocol:
    _require(cfg, "split")
    p = Path(cfg["split"])
    if p.is_dir():
        p = p / SPLIT_FILE
    if not p.is_file():
        raise InputError(f"split file not found: {p}")
    try:
        proto = EvalProtocol.load(p)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise InputError(f"{p}: not a valid split file ({e})")
    if (proto.num_queries, proto.num_items) != (ds.bipartite.num_queries, ds.bipartite.num_items):
        raise InputError(f"{p}: split sizes do not match the dataset")
    return proto


def _load_checkpoint(path: str) -> tuple[DcahModel, dict]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    try:
        doc = json.loads(p.read_text())
        return DcahModel.from_doc(doc), doc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"{p}: not a valid checkpoint ({e})")


def _save_checkpoint(out: Path, model: DcahModel, ds: Dataset, proto: EvalProtocol, variant: Variant,
                     seed: int, tcfg: TrainConfig, stage: str) -> None:
    q, i, _ = embed(model, bipartite_operator(proto.train_graph()), hypergraph_operator(ds.hypergraph))
    model.save(out / CHECKPOINT, embeddings=(q, i), variant=variant.name, seed=seed, stage=stage,
               train_config=tcfg.to_dict())


def _write_run_report(out: Path, result, variant: Variant, tcfg: TrainConfig, seed: int) -> None:
    report = build_report([result.summary()], [variant], tcfg, [seed])
    (out / "report.json").write_text(dumps(report))
    (out / "report.txt").write_text(report_text(report, f"{variant.label}, seed {seed}"))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> None:
    try:
        spec = GenSpec.from_dict(cfg.get("generate", {}))
    except GraphInputError as e:
        raise ConfigError(f"generate: {e}")
    out = _out_dir(cfg)
    ds = generate(spec)
    save_dataset(out, ds)
    log.info("wrote %d edges, %d hyperedges to %s", ds.bipartite.num_edges, ds.hypergraph.num_hyperedges, out)


def cmd_split(cfg: dict) -> None:
    ds = _load_data(cfg)
    out = _out_dir(cfg)
    if out.resolve() == Path(cfg["data"]).resolve():
        raise InputError("split output must not be the dataset directory")
    proto = split_four_parts(ds.bipartite, ds.hypergraph, np.random.default_rng(cfg.get("split_seed", 0)),
                             train_on_excluded=cfg.get("train_on_excluded", False))
    proto.save(out / SPLIT_FILE)
    counts = {"train": len(proto.train), "held_out": len(proto.held_out), "excluded": len(proto.excluded),
              **{f"test_{p}": len(proto.test[p]) for p in PARTS}, **{f"val_{p}": len(proto.val[p]) for p in PARTS}}
    _write_manifest(out, "split", cfg, _digest_inputs(cfg), {"counts": counts})


def cmd_pretrain(cfg: dict) -> None:
    ds = _load_data(cfg)
    proto = _load_split(cfg, ds)
    variant, tcfg, seed = _variant(cfg, "dcah+ssl"), _train_config(cfg), cfg.get("seed", 0)
    out = _out_dir(cfg)
    rows: list[dict] = []
    model = pretrain_stage(ds, proto, variant, tcfg, seed, rows)
    write_log(out / "training_log.csv", rows)
    _save_checkpoint(out, model, ds, proto, variant, seed, tcfg, "pretrain")
    _write_manifest(out, "pretrain", cfg, _digest_inputs(cfg))


def cmd_train(cfg: dict) -> None:
    ds = _load_data(cfg)
    proto = _load_split(cfg, ds)
    variant, tcfg, seed = _variant(cfg), _train_config(cfg), cfg.get("seed", 0)
    out = _out_dir(cfg)
    rows: list[dict] = []
    if "init" in cfg:
        model, doc = _load_checkpoint(cfg["init"])
        if model.config.mode != variant.mode or model.config.hidden_dim != tcfg.hidden_dim \
                or model.config.num_layers != tcfg.num_layers:
            raise ConfigError(f"--init checkpoint ({model.config.mode}, d={model.config.hidden_dim}) "
                              f"does not match variant {variant.name} with hidden_dim {tcfg.hidden_dim}")
        if model.config.num_queries != ds.bipartite.num_queries or model.config.num_items != ds.bipartite.num_items:
            raise InputError("--init checkpoint was built for a different dataset")
    else:
        model = pretrain_stage(ds, proto, variant, tcfg, seed, rows)
    train_stage(model, ds, proto, variant, tcfg, seed, rows)
    result = evaluate_stage(model, ds, proto, variant, seed, rows)
    write_log(out / "training_log.csv", rows)
    _save_checkpoint(out, model, ds, proto, variant, seed, tcfg, "train")
    _write_run_report(out, result, variant, tcfg, seed)
    _write_manifest(out, "train", cfg, _digest_inputs(cfg))


def cmd_evaluate(cfg: dict) -> None:
    ds = _load_data(cfg)
    proto = _load_split(cfg, ds)
    _require(cfg, "checkpoint")
    model, doc = _load_checkpoint(cfg["checkpoint"])
    if model.config.num_queries != ds.bipartite.num_queries or model.config.num_items != ds.bipartite.num_items:
        raise InputError("checkpoint was built for a different dataset")
    variant = Variant.parse(doc.get("variant", model.config.mode))
    tcfg = TrainConfig(**doc["train_config"]) if "train_config" in doc else TrainConfig()
    seed = int(doc.get("seed", 0))
    out = _out_dir(cfg)
    result = evaluate_stage(model, ds, proto, variant, seed)
    _write_run_report(out, result, variant, tcfg, seed)
    _write_manifest(out, "evaluate", cfg, _digest_inputs(cfg))


def _analytics(ds: Dataset) -> tuple[dict, list[list]]:
    g, h = ds.bipartite, ds.hypergraph
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assort = degree_assortativity(g)
        _, rel = relative_degree(g)
    hdeg = h.node_degrees()
    doc = {
        "bipartite": {
            "num_queries": g.num_queries, "num_items": g.num_items, "num_edges": g.num_edges,
            "density": g.density(), "assortativity": assort, "relative_degree": rel,
            "mean_query_degree": float(g.query_degrees().mean()), "mean_item_degree": float(g.item_degrees().mean()),
            "max_query_degree": int(g.query_degrees().max(initial=0)),
            "max_item_degree": int(g.item_degrees().max(initial=0)),
        },
        "hypergraph": {
            "num_hyperedges": h.num_hyperedges,
            "mean_hyperedge_size": float(h.edge_degrees().mean()) if h.num_hyperedges else 0.0,
            "isolated_items": int((hdeg == 0).sum()),
        },
    }
    hist = [["bipartite", side, d, c] for side, deg in (("query", g.query_degrees()), ("item", g.item_degrees()))
            for d, c in degree_histogram(deg)]
    hist += [["hypergraph", "item", d, c] for d, c in degree_histogram(hdeg)]
    return doc, hist


def _neighbor_degree_series(g) -> list[list]:
    """(degree, nodes, mean neighbour degree) over the bipartite graph; the assortativity curve."""
    deg = g.node_degrees().astype(np.float64)
    u, v = g.edges[:, 0], g.edges[:, 1] + g.num_queries
    nbr = np.bincount(u, weights=deg[v], minlength=len(deg)) + np.bincount(v, weights=deg[u], minlength=len(deg))
    rows = []
    for d in np.unique(deg[deg > 0]):
        sel = deg == d
        rows.append([int(d), int(sel.sum()), float((nbr[sel] / d).mean())])
    return rows


def cmd_analyze(cfg: dict) -> None:
    if "edges" in cfg:
        p = Path(cfg["edges"])
        if not p.is_file():
            raise InputError(f"edge file not found: {p}")
        g = load_edges(p)
        if "hyperedges" in cfg:
            hp = Path(cfg["hyperedges"])
            if not hp.is_file():
                raise InputError(f"hyperedge file not found: {hp}")
            h = load_hyperedges(hp, g.num_items)
        else:
            h = Hypergraph(g.num_items, ())
        ds = Dataset(g, h)
    else:
        ds = _load_data(cfg)
    if cfg.get("mad") and "checkpoint" not in cfg:
        raise InputError("MAD requested but no --checkpoint given")
    out = _out_dir(cfg)
    doc, hist = _analytics(ds)
    if "checkpoint" in cfg:
        cp = Path(cfg["checkpoint"])
        if not cp.is_file():
            raise InputError(f"checkpoint not found: {cp}")
        emb = load_checkpoint_embeddings(cp)
        if emb is None:
            raise InputError(f"{cp}: checkpoint holds no embeddings")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            doc["mad"] = {"query": mad(emb[0]), "item": mad(emb[1])}
    (out / "report.json").write_text(dumps(doc))
    lines = [f"{sec}.{k}: {v}" for sec in ("bipartite", "hypergraph") for k, v in doc[sec].items()]
    if "mad" in doc:
        lines += [f"mad.{k}: {v}" for k, v in doc["mad"].items()]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "degree_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph", "side", "degree", "count"])
        w.writerows(hist)
    with open(out / "neighbor_degree.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["degree", "nodes", "mean_neighbor_degree"])
        w.writerows(_neighbor_degree_series(ds.bipartite))
    _write_manifest(out, "analyze", cfg, _digest_inputs(cfg))


def cmd_matrix(cfg: dict) -> None:
    ds = _load_data(cfg)
    proto = _load_split(cfg, ds)
    tcfg = _train_config(cfg)
    chosen = cfg.get("variants", "all")
    variants = all_variants() if chosen == "all" else [Variant.parse(v) for v in chosen]
    seeds = cfg.get("seeds", DEFAULT_SEEDS)
    out = _out_dir(cfg)
    rows: list[dict] = []

    def progress(r):
        log.info("%-22s seed %d  %s", r.variant, r.seed,
                 "  ".join(f"{p} {r.parts[p]['mrr']:.4f}" for p in PARTS))

    report = run_matrix(ds, proto, variants, tcfg, seeds, progress, rows)
    (out / "report.json").write_text(dumps(report))
    (out / "report.txt").write_text(report_text(report, "MRR / Recall@N (%) mean +- std over seeds"))
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "stage", "epoch", "loss", "val_mrr"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _write_manifest(out, "matrix", cfg, _digest_inputs(cfg))


COMMANDS = {"generate": cmd_generate, "split": cmd_split, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze, "matrix": cmd_matrix}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
        COMMANDS[stage](cfg)
    except (ConfigError, TrainConfigError, ModelConfigError, VariantError) as e:
        print(f"dcah {stage}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, GraphInputError, ProtocolError, FileNotFoundError) as e:
        print(f"dcah {stage}: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError) as e:
        print(f"dcah {stage}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

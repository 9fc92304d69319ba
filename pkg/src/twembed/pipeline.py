"""End-to-end orchestration with content-hashed, resumable stages.

Layout under the output directory::

    data/         synthetic time-series + phenotype.csv (only when generated)
    graphs/       one ``<subject>.graph`` per subject
    walks/        walks.txt (+ walks.txt.stats.json)
    ckpt/         model.ckpt, loss_trace.csv
    embeddings/   embeddings.csv
    reports/      report.json, summary.txt, plots
    manifest.json stage -> input fingerprint + output hashes

A stage is skipped when its recorded fingerprint (config section plus the
hashes of everything it reads) matches and its outputs still hash the same.
"""

from __future__ import annotations

import copy
import glob
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .connectome import (WindowSpec, build_dynamic_graph, read_graph, read_phenotype, read_timeseries_csv,
                         write_graph, write_phenotype, write_timeseries_csv)
from .encoder import EncoderConfig, Vocabulary, load_checkpoint, save_checkpoint
from .errors import ConfigError, StageError, TwembedError, ValidationError
from .evalkit import EvalConfig, run_cv
from .report import emit_report
from .synth import RegimeSpec, generate_synthetic_corpus
from .tempwalk import WalkConfig, read_walks, sample_corpus, write_walks
from .trainer import (Heads, TrainConfig, extract_embeddings, read_embeddings, read_loss_trace, train,
                      write_embeddings, write_loss_trace)

log = logging.getLogger(__name__)

STAGES = ("synth", "build-connectome", "sample-walks", "train", "embed", "evaluate", "report")


@dataclass
class PipelineConfig:
    out: str = "out"
    seed: int = 0
    input_dir: str | None = None
    phenotype: str | None = None
    synthetic: dict | None = None
    window: dict = field(default_factory=dict)
    walk: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    plots: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(doc))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = cls.from_dict(doc)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("input_dir", "phenotype"):
            val = getattr(cfg, key)
            if val and not os.path.isabs(val):
                setattr(cfg, key, os.path.join(base, val))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    # typed views; each raises on invalid values before any stage runs

    def window_spec(self) -> WindowSpec:
        return WindowSpec(**self.window)

    def walk_config(self) -> WalkConfig:
        return WalkConfig(**{"seed": self.seed, **self.walk})

    def train_config(self) -> TrainConfig:
        doc = {"seed": self.seed, **self.train}
        for key in ("betas", "mask_probs"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return TrainConfig(**doc)

    def eval_config(self) -> EvalConfig:
        doc = dict(self.eval)
        proto = doc.get("protocol", "stratified-k")
        if proto.startswith("stratified") and proto != "stratified-k":
            doc["protocol"], doc["k"] = parse_protocol(proto)
        elif proto in ("loso", "site"):
            doc["protocol"] = "leave-one-site-out"
        return EvalConfig(**{"seed": self.seed, **doc})

    def encoder_config(self, n_nodes: int) -> EncoderConfig:
        wc = self.walk_config()
        doc = dict(self.encoder)
        max_seq = doc.pop("max_seq", wc.l_max + 1)
        if max_seq != wc.l_max + 1:
            raise ConfigError(f"encoder max_seq={max_seq} must equal walk l_max + 1 = {wc.l_max + 1}")
        vocab_size = doc.pop("vocab_size", n_nodes + 3)
        if vocab_size != n_nodes + 3:
            raise ConfigError(f"encoder vocab_size={vocab_size} must equal regions + 3 = {n_nodes + 3}")
        return EncoderConfig(vocab_size=vocab_size, max_seq=max_seq, **doc)

    def validate(self, n_nodes: int | None = None):
        if not self.input_dir and not self.synthetic:
            raise ConfigError("config needs either input_dir or a synthetic section")
        if self.input_dir and not self.phenotype:
            raise ConfigError("input_dir requires a phenotype file")
        self.window_spec()
        self.walk_config()
        self.train_config()
        self.eval_config()
        if self.synthetic:
            regimes = self.synthetic.get("regimes", {})
            RegimeSpec(**{k: tuple(v) if k == "kinds" else v for k, v in regimes.items()})
        R = n_nodes
        if R is None and self.synthetic:
            R = int(self.synthetic.get("R", 20))
        self.encoder_config(R if R is not None else 2)


def parse_protocol(text: str) -> tuple[str, int]:
    """``stratified10`` -> ``("stratified-k", 10)``; ``loso`` -> leave-one-site-out."""
    if text in ("loso", "leave-one-site-out", "site"):
        return "leave-one-site-out", 0
    if text.startswith("stratified"):
        rest = text[len("stratified"):].lstrip("-")
        if rest in ("", "k"):
            return "stratified-k", 10
        if rest.isdigit():
            return "stratified-k", int(rest)
    raise ValidationError(f"unknown protocol {text!r}; use stratifiedK (e.g. stratified10) or loso")


# --- hashing / manifest ------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(section, input_hashes) -> str:
    doc = json.dumps({"config": section, "inputs": input_hashes}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


class Manifest:
    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, "manifest.json")
        self.out_dir = out_dir
        self.doc = {"version": 1, "stages": {}}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                self.doc = json.load(fh)

    def is_current(self, stage, fingerprint) -> bool:
        entry = self.doc["stages"].get(stage)
        if not entry or entry.get("fingerprint") != fingerprint:
            return False
        for rel, digest in entry["outputs"].items():
            p = os.path.join(self.out_dir, rel)
            if not os.path.exists(p) or file_hash(p) != digest:
                return False
        return True

    def outputs(self, stage) -> dict:
        return self.doc["stages"][stage]["outputs"]

    def record(self, stage, fingerprint, paths, config_echo):
        outs = {os.path.relpath(p, self.out_dir): file_hash(p) for p in sorted(paths)}
        self.doc["stages"][stage] = {"fingerprint": fingerprint, "outputs": outs, "config": config_echo}
        self.save()

    def save(self):
        with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- stage helpers shared with the CLI --------------------------------------------

def build_connectomes(input_dir, spec: WindowSpec, out_dir, subject_ids=None) -> list:
    """Every ``*.csv`` in ``input_dir`` except ``phenotype.csv`` -> ``out_dir/<id>.graph``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = sorted(p for p in glob.glob(os.path.join(input_dir, "*.csv"))
                   if os.path.basename(p) != "phenotype.csv")
    if subject_ids is not None:
        wanted = set(subject_ids)
        paths = [p for p in paths if os.path.splitext(os.path.basename(p))[0] in wanted]
    if not paths:
        raise ValidationError(f"no time-series CSV files in {input_dir}")
    written = []
    width = None
    for p in paths:
        ts = read_timeseries_csv(p)
        if width is not None and ts.n_regions != width:
            raise ValidationError(f"{p}: {ts.n_regions} regions, other subjects have {width}")
        width = ts.n_regions
        g = build_dynamic_graph(ts, spec)
        dest = os.path.join(out_dir, f"{ts.subject_id}.graph")
        write_graph(g, dest)
        written.append(dest)
    return written


def load_graphs(graph_dir) -> list:
    paths = sorted(glob.glob(os.path.join(graph_dir, "*.graph")))
    if not paths:
        raise ValidationError(f"no .graph files in {graph_dir}")
    graphs = [read_graph(p) for p in paths]
    sizes = {g.node_count for g in graphs}
    if len(sizes) != 1:
        raise ValidationError(f"graphs disagree on node count: {sorted(sizes)}")
    return graphs


def sample_walks_to_file(graphs, cfg: WalkConfig, path) -> dict:
    walks, stats = sample_corpus(graphs, cfg)
    stats_doc = asdict(stats)
    write_walks(walks, path, stats, cfg)
    # node count travels in the sidecar so `train` can size the vocabulary
    side = str(path) + ".stats.json"
    with open(side, encoding="utf-8") as fh:
        doc = json.load(fh)
    doc["node_count"] = graphs[0].node_count
    doc["graph_ids"] = [g.graph_id for g in graphs]
    with open(side, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats_doc


def walks_sidecar(path) -> dict:
    side = str(path) + ".stats.json"
    if not os.path.exists(side):
        return {}
    with open(side, encoding="utf-8") as fh:
        return json.load(fh)


def train_to_dir(walks_path, enc_overrides: dict, train_cfg: TrainConfig, out_dir, n_nodes=None,
                 config_echo=None) -> dict:
    walks = read_walks(walks_path)
    side = walks_sidecar(walks_path)
    if n_nodes is None:
        n_nodes = side.get("node_count")
    if n_nodes is None:
        n_nodes = max(max(w.nodes) for w in walks) + 1
        log.warning("node count not recorded; inferred %d from the walks", n_nodes)
    top = max(max(w.nodes) for w in walks)
    if top >= n_nodes:
        raise ValidationError(f"walk visits node {top} but the corpus has {n_nodes} nodes")
    vocab = Vocabulary(n_nodes)
    doc = dict(enc_overrides)
    doc.setdefault("max_seq", max(len(w) for w in walks) + 1)
    enc_cfg = EncoderConfig(vocab_size=vocab.size, **doc)
    graph_ids = side.get("graph_ids") or sorted({w.graph_id for w in walks})
    present = {w.graph_id for w in walks}
    missing = [g for g in graph_ids if g not in present]
    if missing:
        log.warning("%d graph(s) produced no walks; their embeddings stay at initialization", len(missing))
    result = train(walks, vocab, enc_cfg, train_cfg, graph_ids=graph_ids)
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "model.ckpt")
    meta = {"graph_ids": result.heads.graph_ids, "train_config": asdict(train_cfg),
            "config_echo": config_echo or {}}
    save_checkpoint(ckpt, result.state, {"W_TD": result.heads.W_TD, "W_GS": result.heads.W_GS}, meta)
    trace = os.path.join(out_dir, "loss_trace.csv")
    write_loss_trace(trace, result.trace)
    return {"checkpoint": ckpt, "loss_trace": trace, "result": result}


def embed_from_checkpoint(ckpt_path, out_path) -> list:
    state, extra, meta = load_checkpoint(ckpt_path)
    heads = Heads(extra["W_TD"], extra["W_GS"], meta["graph_ids"])
    emb = extract_embeddings(heads)
    write_embeddings(out_path, heads.graph_ids, emb)
    return heads.graph_ids


def evaluate_to_file(emb_path, phenotype_path, cfg: EvalConfig, out_path, config_echo=None) -> dict:
    ids, X = read_embeddings(emb_path)
    pheno = read_phenotype(phenotype_path)
    missing = [g for g in ids if g not in pheno]
    if missing:
        raise ValidationError(f"{len(missing)} embedded graph(s) lack phenotype rows, e.g. {missing[0]!r}")
    labels = [pheno[g][0] for g in ids]
    sites = [pheno[g][1] for g in ids]
    report = run_cv(ids, X, labels, sites, cfg)
    if config_echo:
        report.config = {**report.config, "pipeline": config_echo}
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    return report.to_dict()


# --- pipeline ----------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, force: bool = False) -> dict:
    """Run every stage in order; returns ``{stage: "ran" | "skipped"}`` plus paths."""
    cfg.validate()
    out = cfg.out
    dirs = {k: os.path.join(out, k) for k in ("data", "graphs", "walks", "ckpt", "embeddings", "reports")}
    os.makedirs(out, exist_ok=True)
    manifest = Manifest(out)
    status = {}
    # destination is not part of the experiment; leaving it out keeps artifacts comparable across runs
    echo = {k: v for k, v in cfg.to_dict().items() if k != "out"}

    def stage(name, section, inputs, fn):
        input_hashes = {os.path.relpath(p, out) if p.startswith(out) else p: file_hash(p) for p in sorted(inputs)}
        fp = _fingerprint(section, input_hashes)
        if not force and manifest.is_current(name, fp):
            log.info("stage %s up to date, skipping", name)
            status[name] = "skipped"
            return [os.path.join(out, rel) for rel in manifest.outputs(name)]
        log.info("running stage %s", name)
        try:
            paths = fn()
        except TwembedError as exc:
            raise StageError(name, exc) from exc
        except (OSError, ValueError, KeyError) as exc:
            raise StageError(name, exc) from exc
        manifest.record(name, fp, paths, section)
        status[name] = "ran"
        return paths

    # 1. data
    if cfg.synthetic:
        syn = dict(cfg.synthetic)

        def do_synth():
            os.makedirs(dirs["data"], exist_ok=True)
            regimes = syn.get("regimes", {})
            spec = RegimeSpec(**{k: tuple(v) if k == "kinds" else v for k, v in regimes.items()})
            corpus = generate_synthetic_corpus(
                int(syn.get("n_subjects", 40)), int(syn.get("R", 20)), int(syn.get("T", 200)),
                spec, int(syn.get("seed", cfg.seed)), int(syn.get("n_sites", 4)))
            paths = []
            for ts in corpus.subjects:
                p = os.path.join(dirs["data"], f"{ts.subject_id}.csv")
                write_timeseries_csv(ts, p)
                paths.append(p)
            pheno = os.path.join(dirs["data"], "phenotype.csv")
            write_phenotype(zip([s.subject_id for s in corpus.subjects], corpus.labels, corpus.sites), pheno)
            meta = os.path.join(dirs["data"], "synthetic_meta.json")
            with open(meta, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(corpus.meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
            return paths + [pheno, meta]

        data_files = stage("synth", {"synthetic": syn, "seed": cfg.seed}, [], do_synth)
        input_dir = dirs["data"]
        phenotype = os.path.join(dirs["data"], "phenotype.csv")
        ts_files = [p for p in data_files if p.endswith(".csv") and not p.endswith("phenotype.csv")]
    else:
        input_dir, phenotype = cfg.input_dir, cfg.phenotype
        if not os.path.isdir(input_dir):
            raise StageError("build-connectome", ValidationError(f"input directory {input_dir} not found"))
        if not os.path.exists(phenotype):
            raise StageError("evaluate", ValidationError(f"phenotype file {phenotype} not found"))
        ts_files = sorted(p for p in glob.glob(os.path.join(input_dir, "*.csv"))
                          if os.path.basename(p) != "phenotype.csv")
    subject_ids = [os.path.splitext(os.path.basename(p))[0] for p in ts_files]

    # 2. graphs
    spec = cfg.window_spec()
    graph_files = stage("build-connectome", asdict(spec), ts_files,
                        lambda: build_connectomes(input_dir, spec, dirs["graphs"], subject_ids))

    # 3. walks
    wcfg = cfg.walk_config()
    walks_path = os.path.join(dirs["walks"], "walks.txt")

    def do_walks():
        os.makedirs(dirs["walks"], exist_ok=True)
        graphs = [read_graph(p) for p in sorted(graph_files)]
        sample_walks_to_file(graphs, wcfg, walks_path)
        return [walks_path, walks_path + ".stats.json"]

    stage("sample-walks", asdict(wcfg), graph_files, do_walks)

    # 4. train
    n_nodes = walks_sidecar(walks_path)["node_count"]
    enc_cfg = cfg.encoder_config(n_nodes)
    tcfg = cfg.train_config()
    enc_doc = {k: v for k, v in asdict(enc_cfg).items() if k != "vocab_size"}
    stage("train", {"encoder": asdict(enc_cfg), "train": asdict(tcfg)},
          [walks_path, walks_path + ".stats.json"],
          lambda: list(v for k, v in train_to_dir(walks_path, enc_doc, tcfg, dirs["ckpt"], n_nodes, echo).items()
                       if k != "result"))
    ckpt = os.path.join(dirs["ckpt"], "model.ckpt")
    trace_path = os.path.join(dirs["ckpt"], "loss_trace.csv")

    # 5. embed
    emb_path = os.path.join(dirs["embeddings"], "embeddings.csv")

    def do_embed():
        os.makedirs(dirs["embeddings"], exist_ok=True)
        embed_from_checkpoint(ckpt, emb_path)
        return [emb_path]

    stage("embed", {}, [ckpt], do_embed)

    # 6. evaluate
    ecfg = cfg.eval_config()
    report_path = os.path.join(dirs["reports"], "report.json")

    def do_eval():
        os.makedirs(dirs["reports"], exist_ok=True)
        evaluate_to_file(emb_path, phenotype, ecfg, report_path, echo)
        return [report_path]

    stage("evaluate", asdict(ecfg), [emb_path, phenotype], do_eval)

    # 7. human-readable report (plots are not hashed: image encoders may embed versions)
    def do_report():
        with open(report_path, encoding="utf-8") as fh:
            report = json.load(fh)
        written = emit_report(report, dirs["reports"], read_loss_trace(trace_path), plots=cfg.plots)
        return [written["summary"]]

    stage("report", {"plots": cfg.plots}, [report_path, trace_path], do_report)

    return {"status": status, "out": out, "report": report_path, "embeddings": emb_path,
            "checkpoint": ckpt, "walks": walks_path, "loss_trace": trace_path}


def bundled_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "configs", "synthetic.yaml")


def load_bundled_config(**overrides) -> PipelineConfig:
    cfg = PipelineConfig.load(bundled_config_path())
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


"""Command-line interface.

Every subcommand resolves its settings from built-in defaults, then the
``common`` and per-subcommand sections of an optional JSON config file, then
explicit flags. Artifacts go to ``<output root>/<subcommand>-<config hash>``.
Exit codes: 0 success, 1 usage, 2 I/O, 3 data validation, 4 numeric.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from refdx import evalharness as eh
from refdx import report as rpt
from refdx.corpus import AnchorSet, Corpus, ReferenceCase, SyntheticSpec, generate_synthetic, load_corpus, save_index
from refdx.encoder import EncoderConfig, ToyDualEncoder, pairs_from_corpus, train_contrastive
from refdx.errors import ConfigError, RefdxError, UsageError
from refdx.evidence import VARIANT_NAMES, AblationMask, EvidenceModel, HeadConfig, predict_query, train_head
from refdx.evidence import predict_examples, prepare_examples
from refdx.labels import TASK_ARITY, TASK_CLASSES, Task, parse_task
from refdx.numerics import softmax
from refdx.retrieval import top_k
from refdx.zeroshot import binary_from_abnormality, classify, predict_all

log = logging.getLogger("refdx")

OUTPUT_ENV = "REMEMBER_OUTPUT_DIR"
DEFAULT_OUTPUT_ROOT = "runs"

# defaults shared by the subcommands that use them
DEFAULTS = {
    "seed": 0, "dim": 512, "tau": 0.07, "k": 3, "task": "abnormality",
    "lr": 5e-5, "head_batch": 4, "patience": 5, "max_epochs": 100, "hidden": 256,
    "encoder_batch": 16, "encoder_epochs": 10, "weight_decay": 0.2,
}


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _names(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _fractions(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


# option tables: (flag, type, default, help); default None means optional/absent
_CORPUS = [("--manifest", str, None, "corpus manifest (JSON)"),
           ("--blob", str, None, "embedding blob (default: manifest path with .bin suffix)")]
_HEAD_OPTS = [("--lr", float, DEFAULTS["lr"], "Adam learning rate"),
              ("--batch-size", int, DEFAULTS["head_batch"], "head mini-batch size"),
              ("--max-epochs", int, DEFAULTS["max_epochs"], "maximum training epochs"),
              ("--patience", int, DEFAULTS["patience"], "early-stopping patience in epochs"),
              ("--hidden", int, DEFAULTS["hidden"], "MLP hidden width"),
              ("--k", int, DEFAULTS["k"], "references retrieved per query")]
_TASK = [("--task", str, DEFAULTS["task"], "task: abnormality, binary, type or severity")]
_SEED = [("--seed", int, DEFAULTS["seed"], "random seed")]

COMMANDS = {
    "gen-synth": ("write a clustered synthetic corpus", _SEED + [
        ("--classes", int, 4, "number of clusters"),
        ("--per-class", int, 50, "cases per cluster"),
        ("--dim", int, DEFAULTS["dim"], "embedding dimension"),
        ("--separation", float, 6.0, "cluster separation in noise standard deviations"),
        ("--sigma", float, 1.0, "noise standard deviation"),
        ("--prefix", str, "syn", "case id prefix"),
    ]),
    "build-index": ("build a corpus index from a JSON case list", [
        ("--cases", str, None, "JSON document with cases (and optional anchors)"),
        ("--encoder", str, None, "encoder checkpoint; embeds raw_image features and template texts"),
    ]),
    "train-encoder": ("train the toy dual encoder on corpus image/pseudo-text pairs", _CORPUS + _SEED + [
        ("--dim", int, DEFAULTS["dim"], "latent dimension"),
        ("--tau", float, DEFAULTS["tau"], "contrastive temperature"),
        ("--lr", float, DEFAULTS["lr"], "AdamW learning rate"),
        ("--batch-size", int, DEFAULTS["encoder_batch"], "contrastive batch size"),
        ("--epochs", int, DEFAULTS["encoder_epochs"], "training epochs"),
        ("--weight-decay", float, DEFAULTS["weight_decay"], "decoupled weight decay"),
        ("--modalities", _names, "abnormality", "comma list of text modalities paired with images"),
        ("--feat-dim", int, 64, "hashed text feature dimension"),
        ("--encode", bool, False, "also write the corpus re-embedded by the trained encoder"),
    ]),
    "train-head": ("train the evidence-guided head on a corpus split", _CORPUS + _TASK + _SEED + _HEAD_OPTS + [
        ("--val-fraction", float, 0.2, "fraction of cases held out for early stopping"),
        ("--variant", str, "full", "ablation preset: " + ", ".join(VARIANT_NAMES)),
    ]),
    "zeroshot": ("anchor-matching predictions for one case or the whole corpus", _CORPUS + [
        ("--query", str, None, "case id (default: every case)"),
    ]),
    "infer": ("diagnose one case and write report.txt and report.json", _CORPUS + [
        ("--query", str, None, "case id to diagnose"),
        ("--queries", str, None, "manifest holding the query case (default: the reference corpus)"),
        ("--k", int, DEFAULTS["k"], "references retrieved"),
        ("--head", _names, None, "comma list of head checkpoints (one per task)"),
        ("--max-description", int, None, "truncate descriptions in the text report"),
    ]),
    "report": ("re-render a report.json as text after validation", [
        ("--input", str, None, "report JSON document"),
        ("--max-description", int, None, "truncate descriptions in the text report"),
    ]),
    "eval": ("split, train and score; write metrics, consistency and similarity data", _CORPUS + _TASK + _SEED
             + _HEAD_OPTS + [
        ("--fractions", _fractions, "0.6,0.2,0.2", "train,val,test fractions"),
        ("--head", str, None, "score this head checkpoint instead of training one"),
        ("--k-max", int, 10, "largest k of the retrieval-consistency curve"),
    ]),
    "fewshot": ("few-shot protocol over several shot counts", _CORPUS + _TASK + _SEED + _HEAD_OPTS + [
        ("--fractions", _fractions, "0.6,0.2,0.2", "pool,val,test fractions"),
        ("--ks", _ints, "5,10,20,50,100", "comma list of shots per class"),
        ("--runs", int, 10, "independent runs per shot count"),
    ]),
    "ablate": ("retrain the head under ablation masks", _CORPUS + _TASK + _SEED + _HEAD_OPTS + [
        ("--fractions", _fractions, "0.6,0.2,0.2", "train,val,test fractions"),
        ("--variants", _names, ",".join(v for v in VARIANT_NAMES if v != "full"), "comma list of presets"),
        ("--runs", int, 1, "runs (seeds) per variant"),
        ("--context-task", bool, False, "use the constructed context-dependent task instead of a corpus"),
        ("--per-class", int, 50, "training cases per class for the context task"),
    ]),
    "export-embeddings": ("dump corpus (and query) embeddings as CSV", _CORPUS + [
        ("--queries", str, None, "optional query manifest exported alongside"),
    ]),
}

_REQUIRED = {
    "build-index": ["cases"], "train-encoder": ["manifest"], "train-head": ["manifest"],
    "zeroshot": ["manifest"], "infer": ["manifest", "query"], "report": ["input"],
    "eval": ["manifest"], "fewshot": ["manifest"], "export-embeddings": ["manifest"],
}


def _key(flag):
    return flag.lstrip("-").replace("-", "_")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="refdx", description="Retrieval-guided evidence-based diagnosis engine.")
    parser.add_argument("--config", default=argparse.SUPPRESS, help="JSON config with per-subcommand sections")
    parser.add_argument("--output-dir", default=argparse.SUPPRESS,
                        help=f"output root (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT_ROOT})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (helptext, options) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config with per-subcommand sections")
        p.add_argument("--output-dir", default=argparse.SUPPRESS,
                       help=f"output root (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT_ROOT})")
        for flag, typ, default, helpline in options:
            shown = "" if default is None else f" (default: {default})"
            if typ is bool:
                p.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=helpline + shown)
            else:
                p.add_argument(flag, type=typ, default=argparse.SUPPRESS, help=helpline + shown)
    return parser


def _coerce(typ, value):
    if typ is bool:
        return bool(value)
    if typ in (_ints, _names, _fractions) and isinstance(value, list):
        return [typ(str(v))[0] for v in value]
    return typ(value)


def resolve_config(command, namespace):
    """Defaults < config ``common`` < config ``<command>`` < explicit flags."""
    options = {_key(f): (typ, default) for f, typ, default, _ in COMMANDS[command][1]}
    resolved = {k: (_coerce(typ, d) if d is not None else None) for k, (typ, d) in options.items()}
    flags = vars(namespace)
    cfg_path = flags.get("config")
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {cfg_path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object of sections")
        unknown_sections = set(doc) - set(COMMANDS) - {"common"}
        if unknown_sections:
            raise UsageError(f"config has unknown sections {sorted(unknown_sections)}")
        for key, value in (doc.get("common") or {}).items():
            if key in options:
                resolved[key] = _coerce(options[key][0], value)
        for key, value in (doc.get(command) or {}).items():
            if key not in options:
                raise UsageError(f"config section {command!r} has unknown key {key!r}")
            resolved[key] = _coerce(options[key][0], value)
    for key, value in flags.items():
        if key in options:
            resolved[key] = value
    for key in _REQUIRED.get(command, []):
        if resolved.get(key) is None and not (command == "ablate" and resolved.get("context_task")):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    if command == "ablate" and not resolved.get("context_task") and resolved.get("manifest") is None:
        raise UsageError("ablate: --manifest or --context-task is required")
    return resolved


def config_hash(command, config):
    text = json.dumps({"command": command, "config": config}, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def run_dir(command, config, root=None):
    root = root or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT
    path = Path(root) / f"{command}-{config_hash(command, config)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _load(cfg, manifest_key="manifest", blob_key="blob"):
    manifest = cfg[manifest_key]
    blob = cfg.get(blob_key) or str(Path(manifest).with_suffix(".bin"))
    return load_corpus(manifest, blob)


def _head_config(cfg):
    return HeadConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                      patience=cfg["patience"], hidden=cfg["hidden"], k=cfg["k"], seed=cfg["seed"])


# --- subcommands -------------------------------------------------------------

def cmd_gen_synth(cfg, out):
    spec = SyntheticSpec(cfg["classes"], cfg["per_class"], cfg["dim"], cfg["separation"], cfg["sigma"],
                         cfg["seed"], cfg["prefix"])
    corpus = generate_synthetic(spec)
    save_index(corpus, out / "corpus.json", out / "corpus.bin")
    return {"cases": len(corpus)}


def cmd_build_index(cfg, out):
    doc = json.loads(Path(cfg["cases"]).read_text(encoding="utf-8"))
    encoder = ToyDualEncoder.load(cfg["encoder"]) if cfg.get("encoder") else None
    entries = doc.get("cases") or []
    if not entries:
        raise ConfigError("case list is empty")
    cases = []
    for e in entries:
        if encoder is not None:
            if "raw_image" not in e:
                raise ConfigError(f"case {e.get('id')!r} has no raw_image")
            raw = np.asarray(e["raw_image"], dtype=np.float64)
            # text rows are placeholders; the encoder re-embeds them from templates
            vecs = [raw, raw, raw, raw]
        else:
            try:
                vecs = [e["image"], e["abn"], e["dx"], e["desc"]]
            except KeyError as exc:
                raise ConfigError(f"case {e.get('id')!r} lacks embedding {exc}") from None
        cases.append(ReferenceCase(str(e["id"]), *vecs, abnormality=e["abnormality"], dementia=e["dementia"],
                                   description=e.get("description", ""), severity=e.get("severity")))
    dim = len(cases[0].image)
    anchors = {}
    for task, entry in (doc.get("anchors") or {}).items():
        a = AnchorSet(task, entry["classes"], np.asarray(entry["embeddings"], dtype=np.float64))
        anchors[a.task] = a
    corpus = Corpus(cases, dim, anchors, doc.get("provenance", ""))
    if encoder is not None:
        corpus = encoder.encode_corpus(corpus)
    save_index(corpus, out / "corpus.json", out / "corpus.bin")
    return {"cases": len(corpus), "dim": corpus.dim}


def cmd_train_encoder(cfg, out):
    corpus = _load(cfg)
    X_img, X_txt = pairs_from_corpus(corpus, tuple(cfg["modalities"]), cfg["feat_dim"])
    config = EncoderConfig(dim=cfg["dim"], tau=cfg["tau"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                           epochs=cfg["epochs"], weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    encoder, history = train_contrastive(X_img, X_txt, config)
    encoder.save(out / "encoder.json")
    _write(out / "history.json", eh.dumps(history))
    if cfg["encode"]:
        save_index(encoder.encode_corpus(corpus), out / "corpus.json", out / "corpus.bin")
    return {"initial_loss": history["initial_loss"], "final_loss": history["epoch_losses"][-1]}


def cmd_train_head(cfg, out):
    corpus = _load(cfg)
    task = parse_task(cfg["task"])
    f = cfg["val_fraction"]
    train, val = eh.split_corpus(corpus, (1.0 - f, f), cfg["seed"], task)
    config = _head_config(cfg)
    tr = prepare_examples(train, train, task, config.k, leave_one_out=True)
    va = prepare_examples(val, train, task, config.k)
    model, history = train_head(tr, va, task, config, AblationMask.named(cfg["variant"]))
    model.save(out / "head.json")
    _write(out / "history.json", eh.dumps(history))
    _write(out / "train_ids.json", eh.dumps([c.id for c in train.cases]))
    return {"best_epoch": history["best_epoch"], "epochs_run": history["epochs_run"]}


def _zs_entry(case_id, results):
    entry = {"id": case_id}
    for task in (Task.ABNORMALITY, Task.DEMENTIA_TYPE, Task.SEVERITY):
        r = results[task]
        entry[task.value] = {"label": r.predicted.value, "probs": r.probs.tolist(), "sims": r.sims.tolist()}
    b = results[Task.BINARY]
    entry["binary"] = {"label": b.predicted.value, "p_dementia": b.p_dementia, "raw_p_dementia": b.raw_p_dementia}
    return entry


def _require_anchors(corpus):
    missing = [t.value for t in (Task.ABNORMALITY, Task.DEMENTIA_TYPE, Task.SEVERITY) if t not in corpus.anchors]
    if missing:
        raise ConfigError(f"corpus has no anchors for {missing}")


def cmd_zeroshot(cfg, out):
    corpus = _load(cfg)
    _require_anchors(corpus)
    if cfg.get("query"):
        entry = _zs_entry(cfg["query"], predict_all(corpus.get(cfg["query"]).image, corpus.anchors))
        _write(out / "zeroshot.json", eh.dumps(entry))
        return {"abnormality": entry["abnormality"]["label"]}
    entries, preds = [], {t: [] for t in Task}
    for case in corpus.cases:
        res = predict_all(case.image, corpus.anchors)
        entries.append(_zs_entry(case.id, res))
        for t in Task:
            preds[t].append(TASK_CLASSES[t].index(res[t].predicted))
    metrics = {}
    for t in Task:
        if t is Task.SEVERITY and any(c.severity is None for c in corpus.cases):
            continue
        metrics[t.value] = eh.task_metrics(preds[t], corpus.labels(t), t).to_dict()
    _write(out / "zeroshot.json", eh.dumps({"metrics": metrics, "predictions": entries}))
    _write(out / "zeroshot.txt", eh.metrics_table({k: eh.MetricsBundle(**v) for k, v in metrics.items()}))
    return {"cases": len(corpus)}


@dataclass
class _HeadResult:
    predicted: object
    probs: np.ndarray


def diagnose(query_case, corpus, k=3, heads=(), exclude=(), metadata=None):
    """Zero-shot predictions, optionally replaced per task by evidence-guided heads, as a report."""
    _require_anchors(corpus)
    results = predict_all(query_case.image, corpus.anchors)
    sources = {}
    alpha, hits = None, None
    for head in heads:
        if head.task is None or head.task is Task.BINARY:
            raise ConfigError("infer heads must target abnormality, type or severity")
        if head.k != k:
            raise ConfigError(f"head for {head.task.value} was trained with k={head.k}, run uses k={k}")
        h, logits, probs, a = predict_query(query_case.image, corpus, head, exclude)
        idx = int(np.argmax(logits))
        results[head.task] = _HeadResult(TASK_CLASSES[head.task][idx], probs)
        key = "dementia_type" if head.task is Task.DEMENTIA_TYPE else head.task.value
        sources[key] = "evidence-guided"
        if alpha is None or head.task is Task.ABNORMALITY:
            alpha, hits = a, h
    meta = dict(metadata or {})
    if alpha is None:
        hits = top_k(query_case.image, corpus, k, exclude=exclude)
        alpha = softmax(np.array([h.sim for h in hits]))
        meta["alpha_source"] = "softmax-of-similarities"
    else:
        meta["alpha_source"] = "attention"
    meta["k"] = k
    meta["query_id"] = query_case.id
    return rpt.assemble(results, hits, alpha, corpus, meta, sources)


def cmd_infer(cfg, out):
    corpus = _load(cfg)
    if cfg.get("queries"):
        queries = load_corpus(cfg["queries"], str(Path(cfg["queries"]).with_suffix(".bin")))
        case, exclude = queries.get(cfg["query"]), ()
    else:
        case, exclude = corpus.get(cfg["query"]), (cfg["query"],)
    heads = [EvidenceModel.load(p) for p in (cfg.get("head") or [])]
    digest = hashlib.sha256(Path(cfg["manifest"]).read_bytes()).hexdigest()[:12]
    meta = {"corpus_id": f"{Path(cfg['manifest']).name}#{digest}",
            "encoder_id": corpus.provenance or None}
    report = diagnose(case, corpus, cfg["k"], heads, exclude, meta)
    _write(out / "report.txt", rpt.render_text(report, cfg.get("max_description")))
    _write(out / "report.json", rpt.render_json(report))
    return {"abnormality": report.abnormality.label.value}


def cmd_report(cfg, out):
    report = rpt.parse_json(Path(cfg["input"]).read_text(encoding="utf-8"))
    _write(out / "report.txt", rpt.render_text(report, cfg.get("max_description")))
    _write(out / "report.json", rpt.render_json(report))
    return {"rows": len(report.evidence_rows)}


def cmd_eval(cfg, out):
    corpus = _load(cfg)
    task = parse_task(cfg["task"])
    fr = cfg["fractions"]
    if len(fr) != 3:
        raise ConfigError("eval needs three fractions: train,val,test")
    train, val, test = eh.split_corpus(corpus, fr, cfg["seed"], task)
    config = _head_config(cfg)
    results = {}
    if cfg.get("head"):
        model = EvidenceModel.load(cfg["head"])
        te = prepare_examples(test, train, task, model.k)
        pred, _, _ = predict_examples(model, te)
        results["evidence-guided"] = eh.task_metrics(pred, te.y, task)
    else:
        results["evidence-guided"], history = eh.train_and_score(train, val, test, task, config)
        _write(out / "history.json", eh.dumps(history))
    if task is not Task.BINARY and task in corpus.anchors:
        preds = [classify(c.image, corpus.anchors[task]).index for c in test.cases]
        results["zero-shot"] = eh.task_metrics(preds, test.labels(task), task)
    elif task is Task.BINARY and Task.ABNORMALITY in corpus.anchors:
        binary = TASK_CLASSES[Task.BINARY]
        preds = [binary.index(binary_from_abnormality(classify(c.image, corpus.anchors[Task.ABNORMALITY])).predicted)
                 for c in test.cases]
        results["zero-shot"] = eh.task_metrics(preds, test.labels(task), task)
    _write(out / "metrics.json", eh.dumps({name: b.to_dict() for name, b in results.items()}))
    _write(out / "metrics.txt", eh.metrics_table(results))
    curve = eh.retrieval_consistency(train, test, min(cfg["k_max"], len(train)))
    _write(out / "consistency.json", eh.dumps(curve.to_dict()))
    _write(out / "consistency.txt", curve.to_table())
    dist = eh.similarity_distribution(train, test, 1, task if task is not Task.BINARY else Task.ABNORMALITY)
    _write(out / "similarity.json", eh.dumps(dist.to_dict()))
    _write(out / "similarity.csv", dist.to_csv())
    return {name: b.macro_f1 for name, b in results.items()}


def cmd_fewshot(cfg, out):
    corpus = _load(cfg)
    task = parse_task(cfg["task"])
    pool, val, test = eh.split_corpus(corpus, cfg["fractions"], cfg["seed"], task)
    rep = eh.few_shot(pool, val, test, task, cfg["ks"], cfg["runs"], cfg["seed"], _head_config(cfg))
    _write(out / "fewshot.json", eh.dumps(rep.to_dict()))
    _write(out / "fewshot.txt", rep.to_table())
    return {str(k): rep.mean[k]["macro_f1"] for k in rep.ks}


def cmd_ablate(cfg, out):
    task = parse_task(cfg["task"])
    if cfg["context_task"]:
        n = cfg["per_class"]
        train = eh.make_context_task(n, seed=cfg["seed"] * 3 + 1, id_prefix="tr")
        val = eh.make_context_task(max(1, n // 2), seed=cfg["seed"] * 3 + 2, id_prefix="va")
        test = eh.make_context_task(max(1, n // 2), seed=cfg["seed"] * 3 + 3, id_prefix="te")
    else:
        train, val, test = eh.split_corpus(_load(cfg), cfg["fractions"], cfg["seed"], task)
    for v in cfg["variants"]:
        AblationMask.named(v)
    rep = eh.run_ablation(train, val, test, task, cfg["variants"], cfg["seed"], cfg["runs"], _head_config(cfg))
    _write(out / "ablation.json", eh.dumps(rep.to_dict()))
    _write(out / "ablation.txt", rep.to_table())
    return {v: rep.delta[v]["macro_f1"] for v in rep.variants}


def _embedding_rows(corpus, split):
    names = ("image", "abnormality", "dementia", "description")
    for case in corpus.cases:
        sev = case.severity.value if case.severity is not None else ""
        for name, vec in zip(names, case.modalities()):
            yield [split, case.id, name, case.abnormality.value, case.dementia.value, sev, *map(repr, vec.tolist())]
    for task, a in corpus.anchors.items():
        for cls, vec in zip(a.classes, a.embeddings):
            yield ["anchor", f"{task.value}:{cls.value}", "anchor", "", "", "", *map(repr, vec.tolist())]


def cmd_export_embeddings(cfg, out):
    corpus = _load(cfg)
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "id", "modality", "abnormality", "dementia", "severity",
                    *(f"e{i}" for i in range(corpus.dim))])
        w.writerows(_embedding_rows(corpus, "reference"))
        if cfg.get("queries"):
            queries = load_corpus(cfg["queries"], str(Path(cfg["queries"]).with_suffix(".bin")))
            if queries.dim != corpus.dim:
                raise ConfigError("query and reference embeddings differ in dimension")
            w.writerows(_embedding_rows(queries, "query"))
    return {"rows": 4 * len(corpus)}


HANDLERS = {
    "gen-synth": cmd_gen_synth, "build-index": cmd_build_index, "train-encoder": cmd_train_encoder,
    "train-head": cmd_train_head, "zeroshot": cmd_zeroshot, "infer": cmd_infer, "report": cmd_report,
    "eval": cmd_eval, "fewshot": cmd_fewshot, "ablate": cmd_ablate, "export-embeddings": cmd_export_embeddings,
}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.command
    flags = argparse.Namespace(**{k: v for k, v in vars(ns).items() if k not in ("command", "verbose")})
    try:
        cfg = resolve_config(command, flags)
        out = run_dir(command, cfg, getattr(ns, "output_dir", None))
        _write(out / "config.json", eh.dumps({"command": command, "config": cfg}))
        summary = HANDLERS[command](cfg, out)
    except UsageError as exc:
        print(f"refdx {command}: error: {exc}", file=sys.stderr)
        return UsageError.exit_code
    except RefdxError as exc:
        print(f"refdx {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"refdx {command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, TypeError, ValueError) as exc:
        print(f"refdx {command}: invalid input: {exc!r}", file=sys.stderr)
        return 3
    print(json.dumps({"output_dir": str(out), **(summary or {})}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

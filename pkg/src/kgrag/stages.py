"""Pipeline stages: ingest, label, import-labels, embed, train, retrieve,
reason, eval, synth.

Stages communicate only through files under paths.out_dir, written
atomically (temp file + rename). manifest.json records, per artifact, a
fingerprint of the config subset that shaped it plus upstream fingerprints;
a consuming stage refuses to run when an upstream artifact was produced
under a different configuration.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import evalkit
from .config import config_subset
from .embed import EmbeddingStore, build_store, store_load, store_save
from .engine import Engine, feature_dim_for, make_query_encoder, struct_dim_for
from .errors import ConfigError, FingerprintError, PrerequisiteError
from .kg import KnowledgeGraph, QuerySample, Triple, extract_candidate_subgraph, load_dataset, load_triples
from .mlp import TrainConfig, save_params, train
from .reasoner import LlmClient, build_qa_prompt, parse_answers
from .scorer import StoreBackedDataset
from .supervision import import_relevance_labels, save_labels, shortest_path_labels
from .synth import SyntheticGenerator, SyntheticKgSpec

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "ingest": ["ingest.json"],
    "label": ["labels_train.jsonl", "labels_test.jsonl"],
    "import-labels": ["imported_labels.jsonl"],
    "embed": ["store.embs"],
    "train": ["params.mlps"],
    "retrieve": ["retrieval.jsonl"],
    "reason": ["answers.jsonl"],
    "eval": ["report.json", "report.txt"],
}

# Config keys that shape each stage's outputs; unrelated keys must not
# perturb the fingerprint.
FINGERPRINT_KEYS = {
    "synth": ["synth", "paths.kg", "paths.train_dataset", "paths.test_dataset"],
    "ingest": ["paths.kg", "paths.train_dataset", "paths.test_dataset"],
    "label": ["paths.kg", "paths.train_dataset", "paths.test_dataset"],
    "import-labels": ["paths.kg", "paths.relevance_labels"],
    "embed": ["paths.kg", "embeddings"],
    "train": [
        "paths.kg",
        "paths.train_dataset",
        "embeddings",
        "retriever.hops",
        "retriever.dde_rounds",
        "retriever.feature_variant",
        "retriever.ppr",
        "retriever.graphsage",
        "training",
    ],
    "retrieve": [
        "paths.kg",
        "paths.test_dataset",
        "embeddings",
        "retriever.hops",
        "retriever.dde_rounds",
        "retriever.feature_variant",
        "retriever.retriever",
        "retriever.ppr",
        "retriever.graphsage",
        "retriever.k",
        "training",
    ],
    "reason": ["reasoner.model", "reasoner.endpoint", "reasoner.refusal_tokens"],
    "eval": ["eval"],
}

UPSTREAM = {
    "train": {"labels_train.jsonl": "label", "store.embs": "embed"},
    "retrieve": {"store.embs": "embed"},
    "reason": {"retrieval.jsonl": "retrieve"},
    "eval": {"retrieval.jsonl": "retrieve", "labels_test.jsonl": "label"},
}


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_writer(path: Path, write_fn: Callable[[Path], None]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write_fn(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Manifest:
    def __init__(self, out_dir: Path):
        self.path = out_dir / "manifest.json"
        self.entries: dict[str, dict[str, str]] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def record(self, artifact: str, stage: str, fingerprint: str) -> None:
        self.entries[artifact] = {"stage": stage, "fingerprint": fingerprint}
        atomic_write_text(
            self.path, json.dumps(self.entries, indent=2, sort_keys=True) + "\n"
        )

    def fingerprint_of(self, artifact: str) -> str | None:
        entry = self.entries.get(artifact)
        return entry["fingerprint"] if entry else None


def stage_fingerprint(config: dict[str, Any], stage: str, manifest: Manifest) -> str:
    subset = config_subset(config, FINGERPRINT_KEYS[stage])
    payload = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    upstream = UPSTREAM.get(stage, {})
    parts = [payload]
    for artifact in sorted(upstream):
        parts.append(f"{artifact}={manifest.fingerprint_of(artifact)}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def _out_dir(config: dict[str, Any]) -> Path:
    out = Path(config["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_artifact(out: Path, artifact: str, producer: str) -> Path:
    path = out / artifact
    if not path.exists():
        raise PrerequisiteError(f"missing {path}; run the `{producer}` stage first")
    return path


def _check_upstream(config: dict[str, Any], stage: str, manifest: Manifest) -> None:
    for artifact, producer in UPSTREAM.get(stage, {}).items():
        recorded = manifest.fingerprint_of(artifact)
        if recorded is None:
            continue  # existence is checked separately; legacy artifact tolerated
        expected = stage_fingerprint(config, producer, manifest)
        if recorded != expected:
            raise FingerprintError(
                f"{artifact} was produced under a different configuration "
                f"(stage `{producer}`); re-run it or restore the matching config"
            )


def _load_label_file(path: Path, kg: KnowledgeGraph) -> dict[str, set[Triple]]:
    return import_relevance_labels(path, kg)


def stage_synth(config: dict[str, Any]) -> list[Path]:
    synth_cfg = config["synth"]
    mix = {int(k): float(v) for k, v in synth_cfg["template_mix"].items()}
    spec = SyntheticKgSpec(
        entity_count=synth_cfg["entities"],
        relation_count=synth_cfg["relations"],
        layer_count=synth_cfg["layers"],
        total_edges=synth_cfg["total_edges"],
        train_questions=synth_cfg["train_questions"],
        test_questions=synth_cfg["test_questions"],
        template_mix=mix,
        seed=synth_cfg["seed"],
    )
    paths = config["paths"]
    written = SyntheticGenerator(spec).write(
        paths["kg"], paths["train_dataset"], paths["test_dataset"]
    )
    out = _out_dir(config)
    manifest = Manifest(out)
    manifest.record("kg.tsv", "synth", stage_fingerprint(config, "synth", manifest))
    return list(written.values())


def stage_ingest(config: dict[str, Any]) -> list[Path]:
    paths = config["paths"]
    kg = load_triples(paths["kg"])
    stats: dict[str, Any] = {
        "entities": kg.entity_count,
        "relations": kg.relation_count,
        "triples": len(kg.triples),
        "datasets": {},
    }
    for name in ("train_dataset", "test_dataset"):
        if paths.get(name) and Path(paths[name]).exists():
            samples = load_dataset(paths[name], kg)
            stats["datasets"][name] = {
                "samples": len(samples),
                "with_topics": sum(1 for s in samples if s.topic_entities),
                "with_answer_entities": sum(1 for s in samples if s.answer_entities),
            }
    out = _out_dir(config)
    target = out / "ingest.json"
    atomic_write_text(target, json.dumps(stats, indent=2, sort_keys=True) + "\n")
    manifest = Manifest(out)
    manifest.record("ingest.json", "ingest", stage_fingerprint(config, "ingest", manifest))
    return [target]


def stage_label(config: dict[str, Any]) -> list[Path]:
    paths = config["paths"]
    kg = load_triples(paths["kg"])
    out = _out_dir(config)
    manifest = Manifest(out)
    written = []
    for name, artifact in (("train_dataset", "labels_train.jsonl"), ("test_dataset", "labels_test.jsonl")):
        if not paths.get(name) or not Path(paths[name]).exists():
            continue
        samples = load_dataset(paths[name], kg)
        labels = [
            shortest_path_labels(kg, s.id, s.topic_entities, s.answer_entities)
            for s in samples
        ]
        target = out / artifact
        atomic_writer(target, lambda tmp: save_labels(tmp, labels, kg))
        manifest.record(artifact, "label", stage_fingerprint(config, "label", manifest))
        written.append(target)
    if not written:
        raise PrerequisiteError("no dataset files found; run the `synth` stage or point paths at data")
    return written


def stage_import_labels(config: dict[str, Any]) -> list[Path]:
    paths = config["paths"]
    source = paths.get("relevance_labels")
    if not source:
        raise ConfigError("paths.relevance_labels must point at a label file")
    if not Path(source).exists():
        raise PrerequisiteError(f"missing {source}; produce relevance labels first")
    kg = load_triples(paths["kg"])
    resolved = import_relevance_labels(source, kg)
    out = _out_dir(config)
    target = out / "imported_labels.jsonl"

    def write(tmp: Path):
        with open(tmp, "w", encoding="utf-8") as f:
            for sample_id, triples in resolved.items():
                rows = sorted(
                    [list(kg.surface(t)) for t in triples]
                )
                f.write(json.dumps({"id": sample_id, "triples": rows}) + "\n")

    atomic_writer(target, write)
    manifest = Manifest(out)
    manifest.record(
        "imported_labels.jsonl", "import-labels",
        stage_fingerprint(config, "import-labels", manifest),
    )
    return [target]


def stage_embed(config: dict[str, Any]) -> list[Path]:
    kg = load_triples(config["paths"]["kg"])
    encoder = make_query_encoder(config)
    texts = list(kg.entity_texts) + list(kg.relation_texts)
    if not texts:
        raise PrerequisiteError("knowledge graph is empty; nothing to embed")
    store = build_store(encoder, texts)
    if store.dim != config["embeddings"]["dim"] and config["embeddings"]["encoder"] == "hash":
        raise ConfigError("hash encoder produced an unexpected dimension")
    out = _out_dir(config)
    target = out / "store.embs"
    atomic_writer(target, lambda tmp: store_save(store, tmp))
    manifest = Manifest(out)
    manifest.record("store.embs", "embed", stage_fingerprint(config, "embed", manifest))
    return [target]


def _sample_training_arrays(
    kg: KnowledgeGraph, store: EmbeddingStore, sample: QuerySample,
    positives: set[Triple], hops: int,
) -> tuple[np.ndarray, np.ndarray, list[Triple]] | None:
    candidates = extract_candidate_subgraph(kg, sample.topic_entities, hops)
    if not candidates:
        return None
    labels = np.array([1.0 if t in positives else 0.0 for t in candidates])
    if labels.sum() == 0:
        return None
    hrt = np.array(
        [
            [
                store.row_index(kg.entity_texts[t.head]),
                store.row_index(kg.relation_texts[t.relation]),
                store.row_index(kg.entity_texts[t.tail]),
            ]
            for t in candidates
        ],
        dtype=np.int64,
    )
    return hrt, labels, candidates


def stage_train(config: dict[str, Any]) -> list[Path]:
    paths = config["paths"]
    out = _out_dir(config)
    manifest = Manifest(out)
    _check_upstream(config, "train", manifest)
    labels_path = _require_artifact(out, "labels_train.jsonl", "label")
    store_path = _require_artifact(out, "store.embs", "embed")

    kg = load_triples(paths["kg"])
    store = store_load(store_path)
    samples = load_dataset(paths["train_dataset"], kg)
    label_map = _load_label_file(labels_path, kg)
    retriever = config["retriever"]
    variant = retriever["feature_variant"]
    hops = retriever["hops"]
    encoder = make_query_encoder(config)

    engine = Engine(config, kg, store)
    struct_dim = struct_dim_for(config)
    query_vecs = encoder.encode([s.question for s in samples])

    used = 0
    if variant == "graphsage":
        dataset: Any = []
        for sample, qvec in zip(samples, query_vecs):
            positives = label_map.get(sample.id, set())
            candidates = extract_candidate_subgraph(kg, sample.topic_entities, hops)
            if not candidates:
                continue
            labels = np.array([1.0 if t in positives else 0.0 for t in candidates])
            if labels.sum() == 0:
                continue
            feats = engine.features_for(np.asarray(qvec, dtype=np.float64), candidates, sample.topic_entities)
            dataset.append((feats.astype(np.float32), labels))
            used += 1
    else:
        dataset = StoreBackedDataset(store, struct_dim)
        for sample, qvec in zip(samples, query_vecs):
            positives = label_map.get(sample.id, set())
            arrays = _sample_training_arrays(kg, store, sample, positives, hops)
            if arrays is None:
                continue
            hrt, labels, candidates = arrays
            if struct_dim:
                ctx = engine.structural_context(candidates, sample.topic_entities)
                encodings = ctx.get("encodings")
                ppr = ctx.get("ppr")
                struct = np.empty((len(candidates), struct_dim))
                for i, t in enumerate(candidates):
                    parts = [encodings[t.head], encodings[t.tail]]
                    if ppr is not None:
                        parts.append(np.array([ppr.get(t.head, 0.0), ppr.get(t.tail, 0.0)]))
                    struct[i] = np.concatenate(parts)
            else:
                struct = np.zeros((len(candidates), 0))
            dataset.add_sample(np.asarray(qvec, dtype=np.float64), hrt, struct, labels)
            used += 1
    if not used:
        raise PrerequisiteError("no trainable samples (no candidates overlap the labels)")
    logger.info("training on %d samples", used)

    tcfg = config["training"]
    params = train(
        dataset,
        TrainConfig(
            epochs=tcfg["epochs"],
            batch_size=tcfg["batch_size"],
            learning_rate=tcfg["learning_rate"],
            seed=tcfg["seed"],
            positive_weight=tcfg["positive_weight"],
            hidden_sizes=tuple(tcfg["hidden_sizes"]),
            val_fraction=tcfg["val_fraction"],
            parallel_shards=tcfg["parallel_shards"],
        ),
    )
    target = out / "params.mlps"
    atomic_writer(
        target,
        lambda tmp: save_params(
            params, tmp, feature_dim_for(config), retriever["dde_rounds"]
        ),
    )
    manifest.record("params.mlps", "train", stage_fingerprint(config, "train", manifest))
    return [target]


def stage_retrieve(config: dict[str, Any]) -> list[Path]:
    out = _out_dir(config)
    manifest = Manifest(out)
    _check_upstream(config, "retrieve", manifest)
    _require_artifact(out, "store.embs", "embed")
    if config["retriever"]["retriever"] == "mlp":
        _require_artifact(out, "params.mlps", "train")
        recorded = manifest.fingerprint_of("params.mlps")
        if recorded is not None and recorded != stage_fingerprint(config, "train", manifest):
            raise FingerprintError(
                "params.mlps was trained under a different configuration; re-run `train`"
            )
    engine = Engine.load(config)
    samples = load_dataset(config["paths"]["test_dataset"], engine.kg)

    rows = []
    for sample in samples:
        result = engine.retrieve(
            sample.question,
            [engine.kg.entity_texts[e] for e in sample.topic_entities],
            sample_id=sample.id,
        )
        rows.append(
            {
                "id": sample.id,
                "triples": [
                    [*engine.kg.surface(t), score] for t, score in result.ranked
                ],
            }
        )
    target = out / "retrieval.jsonl"
    atomic_write_text(target, "".join(json.dumps(r) + "\n" for r in rows))
    manifest.record("retrieval.jsonl", "retrieve", stage_fingerprint(config, "retrieve", manifest))
    return [target]


def _load_retrieval(path: Path) -> dict[str, list[tuple[str, str, str, float]]]:
    rows = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                record = json.loads(line)
                rows[record["id"]] = [tuple(t) for t in record["triples"]]
    return rows


def stage_reason(config: dict[str, Any]) -> list[Path]:
    out = _out_dir(config)
    manifest = Manifest(out)
    _check_upstream(config, "reason", manifest)
    retrieval_path = _require_artifact(out, "retrieval.jsonl", "retrieve")
    reasoner_cfg = config["reasoner"]
    if not reasoner_cfg.get("endpoint"):
        raise ConfigError("reasoner.endpoint is required for the `reason` stage")
    kg = load_triples(config["paths"]["kg"])
    samples = load_dataset(config["paths"]["test_dataset"], kg)
    retrieval = _load_retrieval(retrieval_path)
    client = LlmClient(
        endpoint=reasoner_cfg["endpoint"],
        model=reasoner_cfg["model"],
        retries=reasoner_cfg["retries"],
        timeout=reasoner_cfg["timeout"],
    )
    refusal_tokens = frozenset(reasoner_cfg["refusal_tokens"])

    def ask(sample: QuerySample) -> dict[str, Any]:
        ranked = retrieval.get(sample.id, [])
        surfaces = [(h, r, t) for h, r, t, _ in ranked]
        bundle = build_qa_prompt(sample.question, surfaces, allow_empty=True)
        raw = client.call(bundle)
        parsed = parse_answers(raw, refusal_tokens)
        return {
            "id": sample.id,
            "raw": raw,
            "answers": parsed.answers,
            "refusal": parsed.refusal,
        }

    parallelism = max(1, int(reasoner_cfg["parallelism"]))
    if parallelism > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(ask, samples))
    else:
        results = [ask(s) for s in samples]
    target = out / "answers.jsonl"
    atomic_write_text(target, "".join(json.dumps(r) + "\n" for r in results))
    manifest.record("answers.jsonl", "reason", stage_fingerprint(config, "reason", manifest))
    return [target]


def retrieval_recall_report(
    samples: Sequence[QuerySample],
    retrieval: dict[str, list[tuple[str, str, str, float]]],
    kg: KnowledgeGraph,
    gold_triples: dict[str, set[Triple]],
    k_values: Sequence[int],
    imported: dict[str, set[Triple]] | None = None,
) -> dict[str, Any]:
    def resolve(rows: list[tuple[str, str, str, float]]) -> list[Triple]:
        out = []
        for h, r, t, _ in rows:
            he, re_, te = kg.entity_id(h), kg.relation_ids.get(r), kg.entity_id(t)
            if he is not None and re_ is not None and te is not None:
                out.append(Triple(he, re_, te))
        return out

    metrics: dict[str, Any] = {"k_values": list(k_values)}
    for name, gold_map in (
        ("shortest_path_triple_recall", gold_triples),
        ("imported_triple_recall", imported),
    ):
        if gold_map is None:
            continue
        per_k = {}
        for k in k_values:
            values = []
            for s in samples:
                retrieved = resolve(retrieval.get(s.id, [])[:k])
                values.append(evalkit.triple_recall(retrieved, gold_map.get(s.id, set())))
            per_k[str(k)] = evalkit.mean_excluding_none(values)
        metrics[name] = per_k
    per_k = {}
    for k in k_values:
        values = []
        for s in samples:
            retrieved = resolve(retrieval.get(s.id, [])[:k])
            values.append(evalkit.answer_entity_recall(retrieved, s.answer_entities))
        per_k[str(k)] = evalkit.mean_excluding_none(values)
    metrics["answer_entity_recall"] = per_k
    return metrics


def stage_eval(config: dict[str, Any]) -> list[Path]:
    out = _out_dir(config)
    manifest = Manifest(out)
    _check_upstream(config, "eval", manifest)
    retrieval_path = _require_artifact(out, "retrieval.jsonl", "retrieve")
    labels_path = _require_artifact(out, "labels_test.jsonl", "label")

    kg = load_triples(config["paths"]["kg"])
    samples = load_dataset(config["paths"]["test_dataset"], kg)
    retrieval = _load_retrieval(retrieval_path)
    gold_triples = _load_label_file(labels_path, kg)
    imported_path = out / "imported_labels.jsonl"
    imported = _load_label_file(imported_path, kg) if imported_path.exists() else None

    k_values = [k for k in config["eval"]["recall_at"] if k <= config["retriever"]["k"]]
    report: dict[str, Any] = {
        "samples": len(samples),
        "retrieval": retrieval_recall_report(
            samples, retrieval, kg, gold_triples, k_values, imported
        ),
    }

    answers_path = out / "answers.jsonl"
    judgments = []
    if answers_path.exists():
        responses = {}
        with open(answers_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    responses[record["id"]] = record
        for s in samples:
            response = responses.get(s.id)
            if response is None:
                continue
            surfaces = set()
            for h, _, t, _ in retrieval.get(s.id, []):
                surfaces.add(h)
                surfaces.add(t)
            judgments.append(
                evalkit.judge_sample(
                    s.id,
                    response["answers"],
                    list(s.answers),
                    gold_in_kg=bool(s.answer_entities),
                    retrieved_surfaces=surfaces,
                    refusal=response["refusal"],
                    raw_response=response["raw"],
                    hops=s.hops,
                    topic_count=s.topic_count,
                )
            )
        if judgments:
            qa = evalkit.qa_metrics(judgments)
            if all(j.hops is not None for j in judgments):
                qa.buckets = evalkit.breakdown(judgments, "hop-count")
            report["qa"] = qa.as_dict()
            if config["eval"]["dump_judgments"]:
                judgments_path = out / "judgments.jsonl"
                atomic_writer(judgments_path, lambda tmp: evalkit.dump_judgments(tmp, judgments))

    report_path = out / "report.json"
    atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")

    text_rows = []
    retrieval_metrics = report["retrieval"]
    for metric_name in ("shortest_path_triple_recall", "imported_triple_recall", "answer_entity_recall"):
        if metric_name in retrieval_metrics:
            row = {
                f"@{k}": (retrieval_metrics[metric_name][str(k)] or 0.0) for k in k_values
            }
            text_rows.append((metric_name, row))
    if "qa" in report:
        qa_dict = report["qa"]
        text_rows.append(
            (
                "qa",
                {
                    "macro_f1": qa_dict["macro_f1"],
                    "micro_f1": qa_dict["micro_f1"],
                    "hit": qa_dict["hit"],
                    "hit@1": qa_dict["hit_at_1"],
                    "score_h": qa_dict["score_h"],
                },
            )
        )
    text_path = out / "report.txt"
    atomic_write_text(text_path, evalkit.render_text_table(text_rows))
    manifest.record("report.json", "eval", stage_fingerprint(config, "eval", manifest))
    return [report_path, text_path]


STAGES: dict[str, Callable[[dict[str, Any]], list[Path]]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "label": stage_label,
    "import-labels": stage_import_labels,
    "embed": stage_embed,
    "train": stage_train,
    "retrieve": stage_retrieve,
    "reason": stage_reason,
    "eval": stage_eval,
}


def run_stage(stage: str, config: dict[str, Any]) -> list[Path]:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    return STAGES[stage](config)

"""Staged orchestration with resumable checkpoints.

Stages run strictly in order (ingest -> graph -> singlehop -> sample ->
merge -> verify -> assemble); each writes JSON Lines outputs plus a manifest
entry carrying content hashes, counts, per-stage token usage, and wall-clock.
Re-running with an identical config resumes from the last complete
checkpoint, and under the mock backend the emitted dataset is byte-identical
whether or not the run was interrupted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import merging, sampling, singlehop, verification
from .config import PipelineConfig
from .corpus import Chunk, Corpus, load_corpus, save_corpus, truncate_to_budget
from .gateway import (
    ChatRequest,
    Gateway,
    HttpChatBackend,
    HttpEmbeddingBackend,
    UsageLedger,
)
from .mockllm import BehaviorTable, MockChatBackend, MockEmbeddingBackend
from .prompts import judge_prompt

logger = logging.getLogger(__name__)

STAGES = ("ingest", "graph", "singlehop", "sample", "merge", "verify", "assemble")

FILES = {
    "corpus": "corpus.jsonl",
    "chunks": "chunks.jsonl",
    "graph": "graph.json",
    "singlehop": "singlehop.jsonl",
    "groups": "groups.jsonl",
    "merged": "merged.jsonl",
    "verdicts": "verdicts.jsonl",
    "dataset": "dataset.jsonl",
    "report": "report.json",
}


class StageError(RuntimeError):
    """A stage failed; carries the stage name (exit code 3)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


class MissingPrerequisiteError(StageError):
    def __init__(self, stage: str, required: str):
        super().__init__(stage, f"missing prerequisite checkpoint; run {required!r} first")
        self.required = required


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Checkpoint ledger: per-stage completion, output hashes, counts, usage."""

    def __init__(self, workdir: Path, config_hash: str):
        self.path = workdir / "manifest.json"
        self.workdir = workdir
        if self.path.is_file():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
            if self.data.get("config_hash") != config_hash:
                logger.info("config changed; discarding previous checkpoints")
                self.data = {"config_hash": config_hash, "stages": {}}
        else:
            self.data = {"config_hash": config_hash, "stages": {}}

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True), encoding="utf-8")

    def stage_complete(self, name: str) -> bool:
        entry = self.data["stages"].get(name)
        if not entry or not entry.get("completed"):
            return False
        for fname, digest in entry.get("outputs", {}).items():
            fpath = self.workdir / fname
            if not fpath.is_file() or _sha256_file(fpath) != digest:
                return False
        return True

    def record(
        self,
        name: str,
        outputs: Sequence[str],
        counts: dict,
        ledger_delta: dict,
        wall_clock: float,
    ) -> None:
        self.data["stages"][name] = {
            "completed": True,
            "outputs": {fname: _sha256_file(self.workdir / fname) for fname in outputs},
            "counts": counts,
            "ledger": ledger_delta,
            "wall_clock": wall_clock,
        }
        self.save()

    def counts(self) -> dict:
        merged: dict = {}
        for entry in self.data["stages"].values():
            merged.update(entry.get("counts", {}))
        return merged

    def ledger_tags(self) -> dict:
        tags: dict = {}
        for entry in self.data["stages"].values():
            for tag, row in entry.get("ledger", {}).items():
                acc = tags.setdefault(tag, {"calls": 0, "input_tokens": 0, "output_tokens": 0})
                for key in acc:
                    acc[key] += row[key]
        return {t: tags[t] for t in sorted(tags)}

    def wall_clock(self) -> dict:
        return {
            name: entry.get("wall_clock", 0.0) for name, entry in self.data["stages"].items()
        }


def build_gateway(config: PipelineConfig) -> Gateway:
    if config.backend.mock:
        table = (
            BehaviorTable.from_file(config.backend.behavior_table)
            if config.backend.behavior_table
            else None
        )
        chat = MockChatBackend(seed=config.backend_seed, behavior_table=table)
        embed = MockEmbeddingBackend(
            seed=config.backend_seed, dimension=config.backend.embedding.dimension
        )
    else:
        chat = HttpChatBackend(
            base_url=config.backend.chat.base_url, model_name=config.backend.chat.model
        )
        embed = HttpEmbeddingBackend(
            base_url=config.backend.embedding.base_url,
            model_name=config.backend.embedding.model,
            dimension=config.backend.embedding.dimension,
        )
    return Gateway(
        chat_backend=chat,
        embedding_backend=embed,
        ledger=UsageLedger(),
        max_retries=config.backend.max_retries,
        backoff_base=config.backend.backoff_base,
        max_in_flight=config.backend.concurrency,
    )


def _load_chunks(workdir: Path) -> list[Chunk]:
    out = []
    with (workdir / FILES["chunks"]).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(
                    Chunk(
                        doc_id=rec["doc_id"],
                        text=rec["text"],
                        token_estimate=rec["token_estimate"],
                        offset=rec.get("offset", 0),
                    )
                )
    return out


def _save_chunks(chunks: Sequence[Chunk], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for c in chunks:
            fh.write(
                json.dumps(
                    {
                        "doc_id": c.doc_id,
                        "text": c.text,
                        "token_estimate": c.token_estimate,
                        "offset": c.offset,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def _stage_ingest(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    corpus = load_corpus(config.corpus.path)
    save_corpus(corpus, workdir / FILES["corpus"])
    chunks = [truncate_to_budget(doc, config.corpus.chunk_tokens) for doc in corpus]
    _save_chunks(chunks, workdir / FILES["chunks"])
    return {"docs": len(corpus), "chunks": len(chunks)}


def _stage_graph(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    corpus = load_corpus(workdir / FILES["corpus"])
    chunks = {c.doc_id: c for c in _load_chunks(workdir)}
    # Paths stay language-homogeneous: one graph per language partition.
    partitions: dict[str, list[str]] = {}
    for doc in corpus:
        partitions.setdefault(doc.language, []).append(doc.id)
    merged_graph = sampling.DocumentGraph(nodes=[], neighbors={})
    all_paths: list[sampling.DocPath] = []
    for language in sorted(partitions):
        ids = partitions[language]
        merged_graph.nodes.extend(ids)
        if len(ids) == 1:
            merged_graph.neighbors[ids[0]] = []
            all_paths.append(sampling.DocPath(path_id=len(all_paths), doc_ids=(ids[0],)))
            continue
        vectors = [v.values for v in gateway.embed([chunks[i].text for i in ids], "graph.embed")]
        graph = sampling.build_doc_graph(ids, vectors, k=config.sampling.knn_k)
        merged_graph.neighbors.update(graph.neighbors)
        for path in sampling.circular_paths(
            graph, max_len=config.sampling.max_path_len, seed=config.seed
        ):
            all_paths.append(sampling.DocPath(path_id=len(all_paths), doc_ids=path.doc_ids))
    sampling.save_graph(merged_graph, all_paths, workdir / FILES["graph"])
    return {"graph_nodes": len(merged_graph.nodes), "paths": len(all_paths)}


def _language_of(corpus: Corpus, doc_id: str) -> str:
    return corpus.get(doc_id).language


def _stage_singlehop(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    corpus = load_corpus(workdir / FILES["corpus"])
    chunks = _load_chunks(workdir)
    strategy = singlehop.GenerationStrategy(
        ordering=config.generation.ordering,
        want_rationale=config.generation.want_rationale,
        max_questions=config.generation.max_questions,
    )

    def work(chunk: Chunk) -> singlehop.ChunkGeneration:
        return singlehop.generate_for_chunk(
            chunk,
            strategy,
            gateway,
            language=_language_of(corpus, chunk.doc_id),
            temperature=config.backend.chat.temperature_generation,
            override_dir=config.prompt_dir,
        )

    with ThreadPoolExecutor(max_workers=config.backend.concurrency) as pool:
        results = list(pool.map(work, chunks))

    qas: list[singlehop.SingleHopQA] = []
    failures = 0
    for outcome in results:
        if outcome.failure:
            failures += 1
        qas.extend(outcome.qas)

    rejected_singlehop = 0
    if config.verification.verify_singlehop:
        chunk_text = {c.doc_id: c.text for c in chunks}
        kept = []
        for qa in qas:
            verdict = _verify_one(
                verification.VerificationSample(
                    sample_id=qa.id,
                    question=qa.question,
                    answer=qa.answer,
                    context_text=chunk_text[qa.doc_id],
                    language=_language_of(corpus, qa.doc_id),
                ),
                config,
                gateway,
            )
            if verdict.approved:
                kept.append(
                    singlehop.SingleHopQA(
                        id=qa.id,
                        doc_id=qa.doc_id,
                        question=qa.question,
                        answer=qa.answer,
                        rationale=qa.rationale,
                        strategy=qa.strategy,
                        verdict=verdict.to_record(),
                    )
                )
            else:
                rejected_singlehop += 1
        qas = kept
    singlehop.save_single_hop(qas, workdir / FILES["singlehop"])
    return {
        "singlehop": len(qas),
        "generation_failures": failures,
        "singlehop_rejected": rejected_singlehop,
    }


def _build_relevance(
    config: PipelineConfig,
    gateway: Gateway,
    qas: Sequence[singlehop.SingleHopQA],
    chunks: Sequence[Chunk],
) -> sampling.RelevanceMatrix:
    qa_ids = [qa.id for qa in qas]
    questions = [qa.question for qa in qas]
    doc_ids = [c.doc_id for c in chunks]
    doc_texts = [c.text for c in chunks]
    question_based = config.sampling.basis == sampling.QUESTION_BASED

    if config.sampling.method == sampling.EMBEDDING:
        matrix = sampling.embedding_matrix(
            questions,
            questions if question_based else doc_texts,
            gateway,
            query_ids=qa_ids,
            candidate_ids=qa_ids if question_based else doc_ids,
            request_tag="sample.embed",
        )
    elif config.sampling.method == sampling.BM25:
        matrix = sampling.bm25_matrix(
            [sampling.tokenize(q) for q in questions],
            [sampling.tokenize(t) for t in (questions if question_based else doc_texts)],
            query_ids=qa_ids,
            doc_ids=qa_ids if question_based else doc_ids,
        )
    else:
        model = sampling.lda_fit(
            [sampling.tokenize(t) for t in doc_texts],
            topics=config.sampling.lda_topics,
            iterations=config.sampling.lda_iterations,
            seed=config.seed,
        )
        matrix = sampling.lda_similarity(
            model,
            [sampling.tokenize(q) for q in questions],
            [sampling.tokenize(t) for t in (questions if question_based else doc_texts)],
            query_ids=qa_ids,
            candidate_ids=qa_ids if question_based else doc_ids,
        )
    matrix.basis = config.sampling.basis
    return matrix


def _stage_sample(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    _, paths = sampling.load_graph(workdir / FILES["graph"])
    qas = singlehop.load_single_hop(workdir / FILES["singlehop"])
    chunks = _load_chunks(workdir)
    groups: list[sampling.QuestionGroup] = []
    skipped = 0
    if qas:
        matrix = _build_relevance(config, gateway, qas, chunks)
        for path in paths:
            mode_rng = random.Random(
                int.from_bytes(
                    hashlib.sha256(f"{config.seed}|mode|{path.path_id}".encode()).digest()[:8],
                    "big",
                )
            )
            mode = (
                sampling.INTRA_DOCUMENT
                if mode_rng.random() < config.sampling.intra_ratio
                else sampling.INTER_DOCUMENT
            )
            group = sampling.sample_question_group(
                path, qas, mode, config.sampling.n_hops, matrix, seed=config.seed
            )
            if group is None:
                skipped += 1
            else:
                groups.append(group)
    else:
        skipped = len(paths)
    with (workdir / FILES["groups"]).open("w", encoding="utf-8") as fh:
        for group in groups:
            fh.write(json.dumps(group.to_record(), ensure_ascii=False) + "\n")
    return {"groups": len(groups), "skipped_paths": skipped}


def _load_groups(workdir: Path) -> list[sampling.QuestionGroup]:
    out = []
    with (workdir / FILES["groups"]).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(sampling.QuestionGroup.from_record(json.loads(line)))
    return out


def _stage_merge(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    groups = _load_groups(workdir)
    qas_by_id = {qa.id: qa for qa in singlehop.load_single_hop(workdir / FILES["singlehop"])}
    corpus = load_corpus(workdir / FILES["corpus"])
    chunks_by_doc = {c.doc_id: c.text for c in _load_chunks(workdir)}

    def work(group: sampling.QuestionGroup) -> merging.MultiHopQA | None:
        language = _language_of(corpus, group.doc_ids[0])
        opts = merging.MergeOptions(
            with_documents=config.merging.with_documents,
            with_rationale=config.merging.with_rationale,
            language=language,
        )
        try:
            return merging.merge_chain(
                group,
                qas_by_id,
                opts,
                gateway,
                chunks_by_doc=chunks_by_doc,
                temperature=config.backend.chat.temperature_generation,
                override_dir=config.prompt_dir,
            )
        except merging.MergeError as exc:
            logger.warning("group %s dropped: %s", group.group_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=config.backend.concurrency) as pool:
        results = list(pool.map(work, groups))
    merged = [m for m in results if m is not None]
    merging.save_multihop(merged, workdir / FILES["merged"])
    return {"merged": len(merged), "merge_failed": len(results) - len(merged)}


def _verify_one(
    sample: verification.VerificationSample, config: PipelineConfig, gateway: Gateway
) -> verification.Verdict:
    conditions = verification.VerificationConditions(
        criteria=tuple(config.verification.criteria),
        guidelines=config.verification.guidelines,
        want_rationale=config.verification.want_rationale,
    )
    if config.verification.strategy == "classification":
        return verification.verify_classification(
            sample,
            conditions,
            gateway,
            temperature=config.backend.chat.temperature_verification,
            override_dir=config.prompt_dir,
        )
    return verification.verify_scoring(
        sample,
        conditions,
        config.verification.threshold,
        gateway,
        temperature=config.backend.chat.temperature_verification,
        override_dir=config.prompt_dir,
    )


def _stage_verify(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    merged = merging.load_multihop(workdir / FILES["merged"])
    corpus = load_corpus(workdir / FILES["corpus"])
    chunks_by_doc = {c.doc_id: c.text for c in _load_chunks(workdir)}

    def work(mhqa: merging.MultiHopQA) -> verification.Verdict:
        gold = sorted(mhqa.source_doc_ids)
        context = "\n\n".join(chunks_by_doc[d] for d in gold)
        return _verify_one(
            verification.VerificationSample(
                sample_id=mhqa.id,
                question=mhqa.question,
                answer=mhqa.answer,
                context_text=context,
                language=_language_of(corpus, gold[0]),
            ),
            config,
            gateway,
        )

    with ThreadPoolExecutor(max_workers=config.backend.concurrency) as pool:
        verdicts = list(pool.map(work, merged))
    verification.save_verdicts(verdicts, workdir / FILES["verdicts"])
    approved = sum(1 for v in verdicts if v.approved)
    return {
        "approved": approved,
        "rejected": len(verdicts) - approved,
        "verdict_parse_failures": sum(1 for v in verdicts if v.parse_failure),
    }


def _stage_assemble(config: PipelineConfig, workdir: Path, gateway: Gateway) -> dict:
    merged = merging.load_multihop(workdir / FILES["merged"])
    verdicts = {v.sample_id: v for v in verification.load_verdicts(workdir / FILES["verdicts"])}
    corpus = load_corpus(workdir / FILES["corpus"])
    gold_chunks = {c.doc_id: c for c in _load_chunks(workdir)}
    samples = []
    failed = 0
    for mhqa in merged:
        verdict = verdicts.get(mhqa.id)
        if verdict is None or not verdict.approved:
            continue
        try:
            samples.append(
                merging.assemble_sample(
                    mhqa,
                    corpus,
                    config.assembly.target_tokens,
                    seed=config.seed,
                    gold_chunks=gold_chunks,
                )
            )
        except ValueError as exc:
            logger.warning("sample %s not assembled: %s", mhqa.id, exc)
            failed += 1
    merging.save_samples(samples, workdir / FILES["dataset"])
    return {"emitted": len(samples), "assembly_failed": failed}


_STAGE_FUNCS: dict[str, Callable[[PipelineConfig, Path, Gateway], dict]] = {
    "ingest": _stage_ingest,
    "graph": _stage_graph,
    "singlehop": _stage_singlehop,
    "sample": _stage_sample,
    "merge": _stage_merge,
    "verify": _stage_verify,
    "assemble": _stage_assemble,
}

_STAGE_OUTPUTS: dict[str, tuple[str, ...]] = {
    "ingest": (FILES["corpus"], FILES["chunks"]),
    "graph": (FILES["graph"],),
    "singlehop": (FILES["singlehop"],),
    "sample": (FILES["groups"],),
    "merge": (FILES["merged"],),
    "verify": (FILES["verdicts"],),
    "assemble": (FILES["dataset"],),
}


def _ledger_delta(before: dict, after: dict) -> dict:
    delta = {}
    for tag, row in after.items():
        prev = before.get(tag, {"calls": 0, "input_tokens": 0, "output_tokens": 0})
        diff = {key: row[key] - prev[key] for key in row}
        if any(diff.values()):
            delta[tag] = diff
    return delta


def run_stage(
    name: str, config: PipelineConfig, gateway: Gateway | None = None, force: bool = False
) -> dict:
    """Run one stage (honoring checkpoints); returns its counts."""
    if name not in _STAGE_FUNCS:
        raise StageError(name, "unknown stage")
    workdir = Path(config.output_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(workdir, config.content_hash())
    for prior in STAGES[: STAGES.index(name)]:
        if not manifest.stage_complete(prior):
            raise MissingPrerequisiteError(name, prior)
    if not force and manifest.stage_complete(name):
        logger.info("stage %s already complete; reusing checkpoint", name)
        return manifest.data["stages"][name]["counts"]
    gateway = gateway if gateway is not None else build_gateway(config)
    before = gateway.ledger.snapshot()
    started = time.perf_counter()
    try:
        counts = _STAGE_FUNCS[name](config, workdir, gateway)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, str(exc)) from exc
    manifest.record(
        name,
        _STAGE_OUTPUTS[name],
        counts,
        _ledger_delta(before, gateway.ledger.snapshot()),
        time.perf_counter() - started,
    )
    return counts


def build_report(config: PipelineConfig) -> dict:
    """Assemble the run report from the manifest plus emitted artifacts."""
    workdir = Path(config.output_dir)
    manifest = Manifest(workdir, config.content_hash())
    counts = manifest.counts()
    report: dict = {
        "counts": counts,
        "retention": None,
        "avg_quality": None,
        "quality_histogram": {},
        "hop_histogram": {},
        "ledger": {"tags": manifest.ledger_tags(), "totals": {}},
        "wall_clock": manifest.wall_clock(),
    }
    tags = report["ledger"]["tags"]
    report["ledger"]["totals"] = {
        "calls": sum(r["calls"] for r in tags.values()),
        "input_tokens": sum(r["input_tokens"] for r in tags.values()),
        "output_tokens": sum(r["output_tokens"] for r in tags.values()),
    }
    verdict_path = workdir / FILES["verdicts"]
    if verdict_path.is_file():
        fragment = quality_report(workdir / FILES["dataset"], verdict_path)
        report.update(
            {
                key: fragment[key]
                for key in ("retention", "avg_quality", "quality_histogram", "hop_histogram")
            }
        )
    return report


def run_pipeline(config: PipelineConfig) -> tuple[Path, dict]:
    """Execute every stage in order and return (dataset path, run report)."""
    gateway = build_gateway(config)
    for name in STAGES:
        run_stage(name, config, gateway=gateway)
    workdir = Path(config.output_dir)
    report = build_report(config)
    (workdir / FILES["report"]).write_text(
        json.dumps(report, indent=1, sort_keys=True), encoding="utf-8"
    )
    return workdir / FILES["dataset"], report


def quality_report(dataset_path, verdicts_path) -> dict:
    """Retention, mean quality, and histograms for emitted artifacts."""
    dataset_path, verdicts_path = Path(dataset_path), Path(verdicts_path)
    if not verdicts_path.is_file():
        raise FileNotFoundError(f"verdicts file not found: {verdicts_path}")
    verdicts = verification.load_verdicts(verdicts_path)
    report: dict = {
        "retention": None,
        "avg_quality": None,
        "quality_histogram": {},
        "hop_histogram": {},
        "verdicts": len(verdicts),
    }
    if verdicts:
        report["retention"] = verification.retention_rate(verdicts)
        report["avg_quality"] = sum(v.quality for v in verdicts) / len(verdicts)
        hist: dict[str, int] = {}
        for v in verdicts:
            bin_key = str(min(int(v.quality), 10))
            hist[bin_key] = hist.get(bin_key, 0) + 1
        report["quality_histogram"] = {k: hist[k] for k in sorted(hist, key=int)}
    if dataset_path.is_file():
        samples = merging.load_samples(dataset_path)
        hops: dict[str, int] = {}
        for s in samples:
            key = str(s.meta["hop_count"])
            hops[key] = hops.get(key, 0) + 1
        report["hop_histogram"] = {k: hops[k] for k in sorted(hops, key=int)}
        report["samples"] = len(samples)
    return report


class JudgeParseError(ValueError):
    """Consistency-judge output stayed unparseable after retries."""


def judge_consistency(
    question: str,
    prediction: str,
    reference: str,
    gateway: Gateway,
    temperature: float = 0.0,
    override_dir: str | None = None,
) -> tuple[str, bool]:
    """LLM-as-judge consistency check between a prediction and a reference.

    Returns (short_pred_answer, predict_consistency); unlike the pipeline
    verifiers there is no silent default verdict, a parse failure raises.
    """
    if not question or not prediction or not reference:
        raise ValueError("question, prediction, and reference must be non-empty")
    prompt = judge_prompt(question, prediction, reference, override_dir)
    decoder = json.JSONDecoder()
    for _ in range(3):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag="judge")
        ).text
        text = raw.replace("```json", " ").replace("```", " ")
        i = 0
        while True:
            start = text.find("{", i)
            if start < 0:
                break
            try:
                obj, end = decoder.raw_decode(text, start)
            except json.JSONDecodeError:
                i = start + 1
                continue
            if (
                isinstance(obj, dict)
                and "short_pred_answer" in obj
                and isinstance(obj.get("predict_consistency"), bool)
            ):
                return str(obj["short_pred_answer"]), obj["predict_consistency"]
            i = start + max(end - start, 1)
    raise JudgeParseError("judge output unparseable after retries")

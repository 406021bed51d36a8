"""Pipeline configuration: YAML file <-> validated dataclasses.

Every strategy axis is one named key, so a full strategy variant is a small
config file rather than a code edit. serialize -> parse -> serialize is a
fixed point, which the resume machinery relies on for config hashing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .verification import DEFAULT_CRITERIA, DEFAULT_THRESHOLD

TARGET_TOKEN_TIERS = {"4k": 4_096, "8k": 8_192, "16k": 16_384, "32k": 32_768, "128k": 131_072}


class ConfigError(ValueError):
    """Invalid or unreadable pipeline configuration (exit code 2)."""


@dataclass
class CorpusConfig:
    path: str = "corpus.jsonl"
    chunk_tokens: int = 3000


@dataclass
class ChatBackendConfig:
    base_url: str = "http://localhost:8000"
    model: str = "qwen2-72b-instruct"
    temperature_generation: float = 0.7
    temperature_verification: float = 0.0
    max_output_tokens: int = 1024


@dataclass
class EmbeddingBackendConfig:
    base_url: str = "http://localhost:8001"
    model: str = "bge-1.5"
    dimension: int = 768


@dataclass
class BackendConfig:
    mock: bool = True
    seed: int | None = None
    concurrency: int = 8
    max_retries: int = 3
    backoff_base: float = 1.0
    behavior_table: str | None = None
    chat: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    embedding: EmbeddingBackendConfig = field(default_factory=EmbeddingBackendConfig)


@dataclass
class VerificationConfig:
    strategy: str = "scoring"  # scoring | classification
    threshold: float = DEFAULT_THRESHOLD
    criteria: list[str] = field(default_factory=lambda: list(DEFAULT_CRITERIA))
    guidelines: str = ""
    want_rationale: bool = False
    verify_singlehop: bool = False


@dataclass
class GenerationConfig:
    ordering: str = "question_then_answer"  # question_then_answer | unified
    want_rationale: bool = False
    max_questions: int = 3


@dataclass
class SamplingConfig:
    method: str = "embedding"  # bm25 | lda | embedding
    basis: str = "question_based"  # question_based | document_based
    intra_ratio: float = 0.0
    n_hops: int = 2
    knn_k: int = 10
    max_path_len: int = 20
    lda_topics: int = 8
    lda_iterations: int = 200


@dataclass
class MergingConfig:
    with_documents: bool = False
    with_rationale: bool = False


@dataclass
class AssemblyConfig:
    target_tokens: int = TARGET_TOKEN_TIERS["8k"]


@dataclass
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    merging: MergingConfig = field(default_factory=MergingConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    output_dir: str = "out"
    seed: int = 0
    prompt_dir: str | None = None

    def validate(self) -> "PipelineConfig":
        if not 0 <= self.verification.threshold <= 10:
            raise ConfigError("verification.threshold must be in [0, 10]")
        if self.verification.strategy not in ("scoring", "classification"):
            raise ConfigError(f"unknown verification.strategy {self.verification.strategy!r}")
        if not self.verification.criteria:
            raise ConfigError("verification.criteria must be non-empty")
        if self.generation.ordering not in ("question_then_answer", "unified"):
            raise ConfigError(f"unknown generation.ordering {self.generation.ordering!r}")
        if self.generation.max_questions < 1:
            raise ConfigError("generation.max_questions must be >= 1")
        if self.sampling.method not in ("bm25", "lda", "embedding"):
            raise ConfigError(f"unknown sampling.method {self.sampling.method!r}")
        if self.sampling.basis not in ("question_based", "document_based"):
            raise ConfigError(f"unknown sampling.basis {self.sampling.basis!r}")
        if not 0 <= self.sampling.intra_ratio <= 1:
            raise ConfigError("sampling.intra_ratio must be in [0, 1]")
        if self.sampling.n_hops < 2:
            raise ConfigError("sampling.n_hops must be >= 2")
        if self.assembly.target_tokens <= 0:
            raise ConfigError("assembly.target_tokens must be > 0")
        if self.corpus.chunk_tokens <= 0:
            raise ConfigError("corpus.chunk_tokens must be > 0")
        if self.backend.concurrency < 1:
            raise ConfigError("backend.concurrency must be >= 1")
        return self

    @property
    def backend_seed(self) -> int:
        return self.backend.seed if self.backend.seed is not None else self.seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        def build(section_cls, key):
            raw = dict(data.get(key) or {})
            known = {f for f in section_cls.__dataclass_fields__}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            return section_cls(**raw)

        backend_raw = dict(data.get("backend") or {})
        chat_raw = backend_raw.pop("chat", {}) or {}
        embed_raw = backend_raw.pop("embedding", {}) or {}
        try:
            backend = BackendConfig(
                **backend_raw,
                chat=ChatBackendConfig(**chat_raw),
                embedding=EmbeddingBackendConfig(**embed_raw),
            )
            cfg = cls(
                corpus=build(CorpusConfig, "corpus"),
                backend=backend,
                verification=build(VerificationConfig, "verification"),
                generation=build(GenerationConfig, "generation"),
                sampling=build(SamplingConfig, "sampling"),
                merging=build(MergingConfig, "merging"),
                assembly=build(AssemblyConfig, "assembly"),
                output_dir=data.get("output_dir", "out"),
                seed=data.get("seed", 0),
                prompt_dir=data.get("prompt_dir"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config structure: {exc}") from exc
        return cfg.validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_yaml(path.read_text(encoding="utf-8"))

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

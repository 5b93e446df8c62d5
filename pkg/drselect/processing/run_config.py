"""
Typed run configuration.

A run config is a JSON file such as

    {
      "corpus": "data/scifact/corpus.jsonl",
      "pool": "pools/scifact.json",
      "output_dir": "runs/scifact",
      "llm": {"kind": "http", "base_url": "http://localhost:8000"},
      "pipeline": {"k": 100, "l": 10, "m": 100, "domain": "scientific"},
      "qpp": {"top_k": 100, "normalize": false}
    }

Every key is optional; command line flags override the file.
"""
from __future__ import annotations

import json
from typing import Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field

from drselect.core.baselines import QppConfig
from drselect.core.errors import ParseError, ValidationError
from drselect.core.larmor import PipelineConfig
from drselect.processing import config


class LlmSpec(BaseModel):
    """Which LLM backend to use; ``mock`` needs no service."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["mock", "http"] = "mock"
    base_url: str = ""
    api_key_env: str = config.llm_api_key_env
    model_name: str = ""
    concurrency_cap: int = Field(config.llm_concurrency_cap, ge=1)

    @classmethod
    def from_flag(cls, value: str) -> LlmSpec:
        """``--llm mock`` or ``--llm http://host:port``."""
        if value == "mock":
            return cls()
        return cls(kind="http", base_url=value)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    corpus: Optional[str] = None
    collection: Optional[str] = None
    pool: Optional[str] = None
    output_dir: str = "run"
    llm: LlmSpec = LlmSpec()
    pipeline: PipelineConfig = PipelineConfig()
    qpp: QppConfig = QppConfig()
    queries: Optional[str] = None
    gt_qrels: Optional[str] = None
    msmarco_perf: Optional[str] = None
    workers: Optional[int] = Field(None, ge=1)
    log_level: str = config.log_level

    @classmethod
    def load(cls, path: str) -> RunConfig:
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid run config: {e.msg}",
                                 e.lineno) from None
        return cls.parse(data)

    @classmethod
    def parse(cls, data: dict) -> RunConfig:
        try:
            return cls.model_validate(data)
        except pydantic.ValidationError as e:
            raise ValidationError(f"invalid run config: {e}") from None

    def with_overrides(self, seed=None, normalize=None, llm=None,
                       **fields) -> RunConfig:
        """Copy with every non-None override applied (and validated)."""
        data = self.model_dump()
        data.update({k: v for k, v in fields.items() if v is not None})
        if seed is not None:
            data["pipeline"]["seed"] = seed
            data["qpp"]["seed"] = seed
        if normalize:
            data["qpp"]["normalize"] = True
        if llm is not None:
            data["llm"] = LlmSpec.from_flag(llm).model_dump()
        return self.parse(data)

    @property
    def seed(self) -> int:
        return self.pipeline.seed

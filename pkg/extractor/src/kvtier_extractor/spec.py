"""What to extract: model, prompt, step count, lane subsets, output path."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ExtractorError(Exception):
    """Operational failure (exit code 1 on the command line)."""


class ModelLoadError(ExtractorError):
    """Model or tokenizer could not be loaded."""


class ContextOverflowError(ExtractorError):
    """Requested context (plus decode steps) exceeds the model's maximum."""


def _check_subset(name: str, subset: tuple[int, ...] | None) -> None:
    if subset is None:
        return
    if len(subset) == 0:
        raise ValueError(f"{name} subset must not be empty")
    if any(not isinstance(i, int) or i < 0 for i in subset):
        raise ValueError(f"{name} subset must contain non-negative integers, got {subset}")
    if len(set(subset)) != len(subset):
        raise ValueError(f"{name} subset has duplicates: {subset}")


@dataclass(frozen=True)
class ExtractionSpec:
    """One extraction job.

    Exactly one of ``prompt`` / ``prompt_file`` supplies the text.  ``layers``
    and ``heads`` keep their given order; ``None`` means all.  ``max_context``
    caps how many leading prompt tokens become the trace context (the decoded
    continuation must still fit inside the model's position budget).
    """

    model: str
    prompt: str | None = None
    prompt_file: str | None = None
    steps: int = 64
    max_context: int | None = None
    layers: tuple[int, ...] | None = None
    heads: tuple[int, ...] | None = None
    include_values: bool = False
    out: str = "trace.kvtr"

    def __post_init__(self):
        if (self.prompt is None) == (self.prompt_file is None):
            raise ValueError("exactly one of prompt / prompt_file is required")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.max_context is not None and self.max_context < 1:
            raise ValueError(f"max_context must be >= 1, got {self.max_context}")
        _check_subset("layers", self.layers)
        _check_subset("heads", self.heads)

    def prompt_text(self) -> str:
        if self.prompt is not None:
            return self.prompt
        path = Path(self.prompt_file)
        if not path.is_file():
            raise ExtractorError(f"prompt file not found: {path}")
        return path.read_text(encoding="utf-8")

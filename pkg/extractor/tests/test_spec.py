import pytest

from kvtier_extractor import ExtractionSpec, ExtractorError


def test_requires_exactly_one_prompt_source():
    with pytest.raises(ValueError, match="exactly one"):
        ExtractionSpec(model="m", prompt="a", prompt_file="b")
    with pytest.raises(ValueError, match="exactly one"):
        ExtractionSpec(model="m")


def test_steps_must_be_positive():
    with pytest.raises(ValueError, match="steps"):
        ExtractionSpec(model="m", prompt="a", steps=0)


def test_max_context_must_be_positive():
    with pytest.raises(ValueError, match="max_context"):
        ExtractionSpec(model="m", prompt="a", max_context=0)


@pytest.mark.parametrize("bad", [(), (0, 0), (-1,), (0, -2)])
def test_subset_validation(bad):
    with pytest.raises(ValueError):
        ExtractionSpec(model="m", prompt="a", layers=bad)
    with pytest.raises(ValueError):
        ExtractionSpec(model="m", prompt="a", heads=bad)


def test_prompt_text_reads_file(tmp_path):
    p = tmp_path / "prompt.txt"
    p.write_text("hello from disk", encoding="utf-8")
    spec = ExtractionSpec(model="m", prompt_file=str(p))
    assert spec.prompt_text() == "hello from disk"


def test_prompt_file_missing_is_operational_error(tmp_path):
    spec = ExtractionSpec(model="m", prompt_file=str(tmp_path / "nope.txt"))
    with pytest.raises(ExtractorError, match="not found"):
        spec.prompt_text()

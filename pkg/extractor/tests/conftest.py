import pytest

pytest.importorskip("torch")
pytest.importorskip("transformers")
pytest.importorskip("ckv_extract")

"""Trace extraction from pretrained causal language models.

Writes CKVT trace files (window-row attention, per-head value norms, token
log-probabilities) that the ``ckv`` toolkit consumes.  The two packages talk
only through the file format and the ``ckv validate`` command line.
"""

from .extract import ExtractionJob, extract
from .stratify import stratify
from .writer import TraceRecord, write_trace

__all__ = ["ExtractionJob", "extract", "stratify", "TraceRecord", "write_trace"]

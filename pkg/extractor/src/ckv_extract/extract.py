"""Run prompts through a causal LM and write one trace file per prompt."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models import LoadedModel, ValueCapture, load_model
from .writer import TraceRecord, write_trace

log = logging.getLogger("ckv_extract")


@dataclass
class ExtractionJob:
    """One extraction run: a model, a prompt file, and capture parameters.

    The prompt file is plain text (one prompt per line) or JSONL with a
    ``text`` field per line.  Prompts shorter than ``w_obs`` tokens are
    skipped with a logged reason; ``max_prompts`` of 0 means no limit.
    ``max_tokens`` truncates long prompts to bound trace size.
    """

    model: str
    prompts: Path
    out_dir: Path
    w_obs: int = 8
    max_prompts: int = 0
    max_tokens: int = 512
    device: str = "cpu"
    seed: int = 0
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.prompts = Path(self.prompts)
        self.out_dir = Path(self.out_dir)
        if self.w_obs < 1:
            raise ValueError(f"w_obs must be >= 1, got {self.w_obs}")


def read_prompts(path: Path) -> list[str]:
    """Non-empty prompts from a text or JSONL file."""
    lines = path.read_text().splitlines()
    prompts = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if path.suffix == ".jsonl":
            prompts.append(json.loads(line)["text"])
        else:
            prompts.append(line)
    if not prompts:
        raise ValueError(f"no prompts found in {path}")
    return prompts


def capture_trace(lm: LoadedModel, token_ids: list[int], w_obs: int) -> TraceRecord:
    """One forward pass: window-row attention, value norms, and logprobs.

    Attention rows are taken post-softmax exactly as the model produced
    them — never renormalized.  The first token has no predictive context,
    so its log-probability is the uniform prior over the vocabulary.
    """
    T = len(token_ids)
    ids = torch.tensor([token_ids], dtype=torch.long, device=next(
        lm.model.parameters()).device)
    capture = ValueCapture(lm)
    try:
        with torch.no_grad():
            out = lm.model(ids, output_attentions=True)
        norms = capture.per_head_norms(T)
    finally:
        capture.close()

    attention = np.stack([
        layer[0, :, T - w_obs:, :].double().cpu().numpy()
        for layer in out.attentions
    ])  # (L, H, w_obs, T)

    logits = out.logits[0].double()
    logp = torch.log_softmax(logits, dim=-1).cpu().numpy()
    logprobs = np.empty(T, dtype=np.float64)
    logprobs[0] = -math.log(logits.shape[-1])
    if T > 1:
        logprobs[1:] = logp[np.arange(T - 1), token_ids[1:]]
    # float32 storage must stay non-positive for exactly-certain tokens.
    logprobs = np.minimum(logprobs, 0.0)

    return TraceRecord(tokens=np.asarray(token_ids, dtype=np.uint32),
                       logprobs=logprobs, attention=attention,
                       value_norms=norms)


def extract(job: ExtractionJob) -> list[Path]:
    """Extract traces for every usable prompt; returns written file paths.

    Per-prompt failures (capture errors, too-short prompts) are logged and
    recorded in ``job.skipped``; the job continues.
    """
    lm = load_model(job.model, device=job.device, seed=job.seed)
    prompts = read_prompts(job.prompts)
    if job.max_prompts:
        prompts = prompts[:job.max_prompts]
    job.out_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    for i, prompt in enumerate(prompts):
        try:
            token_ids = list(lm.tokenizer.encode(prompt))[:job.max_tokens]
            if len(token_ids) < job.w_obs:
                raise ValueError(
                    f"{len(token_ids)} tokens < w_obs={job.w_obs}")
            record = capture_trace(lm, token_ids, job.w_obs)
            meta = {
                "model": lm.name,
                "prompt_index": i,
                "prompt_sha256": hashlib.sha256(
                    prompt.encode("utf-8")).hexdigest()[:16],
                "num_tokens": len(token_ids),
                "value_heads_replicated": lm.num_value_heads != lm.num_heads,
            }
            path = write_trace(record, job.out_dir / f"prompt_{i:05d}.ckvt",
                               head_dim=lm.head_dim, meta=meta)
            written.append(path)
        except Exception as exc:  # noqa: BLE001 - job must survive bad prompts
            job.skipped.append(f"prompt {i}: {exc}")
            log.warning("skipping prompt %d: %s", i, exc)
    log.info("extracted %d traces (%d skipped) into %s",
             len(written), len(job.skipped), job.out_dir)
    return written

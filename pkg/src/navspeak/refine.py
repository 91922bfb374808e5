"""Two-stage landmark-then-instruction generation and its training tasks.

Stage one asks the decoder for a draft of landmark phrases under a control
token, with logits masked to the closed landmark vocabulary; stage two
generates the instruction conditioned on that draft as a prefix. Refinement
repeats the cycle, merging phrases parsed out of the previous instruction
with a fresh draft. Training alternates two teacher-forced tasks over the
same sequences, sampled per step.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from . import grammar as G
from .errors import ValidationError
from .grammar import BOS, END, LMK, PAD, SEP
from .lm import lm_loss

__all__ = [
    "DRAFT_BUDGET",
    "LANDMARKS",
    "INSTRUCTIONS",
    "parse_draft",
    "generate_landmarks",
    "refine_instruction",
    "iterative_refine",
    "landmark_example",
    "instruction_example",
    "joint_loss",
    "sample_task",
    "training_step",
]

DRAFT_BUDGET = 32

LANDMARKS = "landmarks"
INSTRUCTIONS = "instructions"


def parse_draft(tokens, vocab: G.Vocabulary | None = None) -> list[tuple[int, int]]:
    """(color, category) phrases from a draft, skipping malformed chunks.

    Chunks are split on <sep>; a chunk parses iff it is exactly one color
    word followed by one category word. Specials are ignored, so both raw
    generations and canonical drafts round-trip.
    """
    vocab = vocab or G.vocabulary()
    phrases: list[tuple[int, int]] = []
    chunk: list[int] = []
    for raw in list(tokens) + [SEP]:
        t = int(raw)
        if t in (PAD, BOS, END, LMK):
            continue
        if t != SEP:
            chunk.append(t)
            continue
        if len(chunk) == 2 and chunk[0] in vocab.color_ids and chunk[1] in vocab.category_ids:
            phrases.append((vocab.color_index(chunk[0]), vocab.category_index(chunk[1])))
        chunk = []
    return phrases


def _strip_text(ids) -> list[int]:
    """Drop specials bookending a generated sequence, keeping clause content."""
    return [int(t) for t in ids if int(t) not in (PAD, BOS, END, LMK)]


def generate_landmarks(decoder, prompts) -> list[int]:
    """Greedy landmark draft for the given prompts, in canonical token form.

    Generation runs from a [<bos>, <lmk>] prefix with logits restricted to
    colors, categories, <sep>, and <end>; the raw output is parsed to
    phrases and re-encoded, so malformed chunks are dropped rather than
    propagated downstream.
    """
    vocab = G.vocabulary()
    allowed = vocab.landmark_token_ids()
    ids = [BOS, LMK]
    budget = len(ids) + DRAFT_BUDGET + 1
    mask = np.full(decoder.vocab_size, -np.inf)
    mask[allowed] = 0.0
    with ad.no_grad():
        while len(ids) < budget:
            logits = decoder(None if prompts is None else prompts, ids).data[-1]
            nxt = int(np.argmax(logits + mask))
            ids.append(nxt)
            if nxt == END:
                break
    return G.landmark_tokens(parse_draft(ids), vocab)


def refine_instruction(decoder, prompts, draft) -> list[int]:
    """Instruction generated with the draft as a conditioning prefix.

    The decoder sees [<bos>, draft, <sep>] (a bare [<bos>] for an empty
    draft) and generates greedily; the returned sequence is the instruction
    content only. Overlong drafts are truncated to the draft budget.
    """
    draft = [int(t) for t in draft]
    if len(draft) > DRAFT_BUDGET:
        warnings.warn(f"landmark draft of {len(draft)} tokens truncated to {DRAFT_BUDGET}")
        draft = draft[:DRAFT_BUDGET]
    prefix = [BOS] + draft + [SEP] if draft else [BOS]
    out = decoder.generate(prompts, prefix)
    return _strip_text(out[len(prefix):])


def _merge_phrases(first, second) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for phrase in list(first) + list(second):
        if phrase not in merged:
            merged.append(phrase)
    return merged


def iterative_refine(decoder, prompts, steps: int) -> tuple[list[int], list[dict]]:
    """Multi-turn generation; returns (instruction, per-turn trace).

    steps 0 generates directly. Each later turn parses landmark phrases out
    of the previous instruction, merges them (order-preserving, deduplicated)
    with a freshly generated draft, and regenerates conditioned on the merge.
    The trace holds one {turn, draft, instruction} record per turn.
    """
    if steps < 0:
        raise ValidationError(f"refinement steps must be >= 0, got {steps}")
    if steps == 0:
        out = _strip_text(decoder.generate(prompts, [BOS]))
        return out, [{"turn": 0, "draft": [], "instruction": out}]
    vocab = G.vocabulary()
    trace: list[dict] = []
    instruction: list[int] | None = None
    for turn in range(1, steps + 1):
        generated = parse_draft(generate_landmarks(decoder, prompts), vocab)
        parsed = [] if instruction is None else G.extract_landmark_phrases(instruction, vocab)
        draft = G.landmark_tokens(_merge_phrases(parsed, generated), vocab)
        instruction = refine_instruction(decoder, prompts, draft)
        trace.append({"turn": turn, "draft": draft, "instruction": instruction})
    return instruction, trace


# -- training tasks ----------------------------------------------------------------


def _teacher_forced(ids: list[int], supervised_from: int):
    """Inputs, next-token targets, and a mask supervising targets[j] for
    sequence positions at or past supervised_from."""
    x = np.array(ids[:-1])
    targets = np.array(ids[1:])
    mask = (np.arange(1, len(ids)) >= supervised_from).astype(float)
    return x, targets, mask


def landmark_example(draft):
    """Teacher-forced sequence for the draft-generation task."""
    ids = [BOS, LMK] + [int(t) for t in draft] + [END]
    return _teacher_forced(ids, supervised_from=2)


def instruction_example(draft, instruction):
    """Teacher-forced sequence for instruction generation given the draft."""
    draft = [int(t) for t in draft]
    prefix = [BOS] + draft + [SEP] if draft else [BOS]
    ids = prefix + [int(t) for t in instruction] + [END]
    return _teacher_forced(ids, supervised_from=len(prefix))


def joint_loss(decoder, prompts, draft, instruction, landmark_weight: float = 1.0):
    """Weighted sum of the two task losses; weight 0 leaves exactly the
    instruction term."""
    lx, lt, lmask = landmark_example(draft)
    ix, it, imask = instruction_example(draft, instruction)
    landmark_term = lm_loss(decoder(prompts, lx), lt, lmask)
    instruction_term = lm_loss(decoder(prompts, ix), it, imask)
    return landmark_term * landmark_weight + instruction_term


def sample_task(rng: np.random.Generator, landmark_ratio: float = 0.5) -> str:
    """Draw the pretraining task for one step."""
    if not 0.0 <= landmark_ratio <= 1.0:
        raise ValidationError(f"landmark_ratio must be in [0, 1], got {landmark_ratio}")
    return LANDMARKS if rng.random() < landmark_ratio else INSTRUCTIONS


def training_step(decoder, prompt_fn, episodes, task: str, optimizer) -> float:
    """One optimizer step of the sampled task over an episode batch.

    prompt_fn maps an episode to its prompt rows inside the current graph,
    so upstream tuned parameters receive gradients. Returns the batch loss.
    """
    if task not in (LANDMARKS, INSTRUCTIONS):
        raise ValidationError(f"unknown task {task!r}")
    if not episodes:
        raise ValidationError("training_step: empty batch")
    optimizer.zero_grad()
    total = None
    for ep in episodes:
        prompts = prompt_fn(ep)
        if task == LANDMARKS:
            x, targets, mask = landmark_example(ep.landmarks)
        else:
            x, targets, mask = instruction_example(ep.landmarks, ep.instruction)
        loss = lm_loss(decoder(prompts, x), targets, mask)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(episodes))
    total.backward()
    optimizer.step()
    return float(total.data)

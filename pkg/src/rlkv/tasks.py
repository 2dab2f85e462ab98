"""Synthetic modular-arithmetic chain-of-thought tasks.

A question lists a start value and a chain of operations; the solution
restates each operation with its running value and ends with the answer
marker, the final value and an end token::

    BOS 3 + 4 * 2 ?      ->      + 4 = 7 ; * 2 = 4 ; MARK 4 EOS     (mod 10)

Numbers are written as decimal digit tokens, so any modulus works; the
default modulus 10 keeps every value a single token.
"""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .kernels import repeat_run

PAD, BOS, EOS, MARK, EQ, SEP, PLUS, MINUS, TIMES, QEND = range(10)
DIGIT0 = 10
VOCAB = ["<pad>", "<bos>", "<eos>", "MARK", "=", ";", "+", "-", "*", "?"] + [str(d) for d in range(10)]
OPS = (PLUS, MINUS, TIMES)
OP_SYMBOL = {PLUS: "+", MINUS: "-", TIMES: "*"}
SYMBOL_OP = {v: k for k, v in OP_SYMBOL.items()}

REPEAT_NGRAM = 4
REPEAT_COUNT = 8

DEFAULT_BUCKET_EDGES = (12, 24, 36, 48)
DEFAULT_BUCKET_WEIGHTS = (0.2, 0.2, 1 / 3, 0.8 / 3)


class ErrorMode(str, enum.Enum):
    NONE = "none"
    REPETITIVE = "repetitive"
    INCORRECT = "incorrect"
    OVERLENGTH = "overlength"


@dataclass(frozen=True)
class TaskInstance:
    question: tuple
    gold_cot: tuple
    gold_answer: int
    n_steps: int
    bucket: int

    @property
    def prompt(self) -> list:
        return list(self.question)

    @property
    def sequence(self) -> list:
        return list(self.question) + list(self.gold_cot)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["question"] = list(self.question)
        rec["gold_cot"] = list(self.gold_cot)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        keys = {"question", "gold_cot", "gold_answer", "n_steps", "bucket"}
        if set(rec) != keys:
            raise ValueError(f"task record keys {sorted(rec)} != {sorted(keys)}")
        return cls(tuple(int(t) for t in rec["question"]), tuple(int(t) for t in rec["gold_cot"]),
                   int(rec["gold_answer"]), int(rec["n_steps"]), int(rec["bucket"]))


def encode_number(n: int) -> list:
    return [DIGIT0 + int(c) for c in str(int(n))]


def is_digit(tok: int) -> bool:
    return DIGIT0 <= tok < DIGIT0 + 10


def detokenize(tokens) -> str:
    return " ".join(VOCAB[t] if 0 <= t < len(VOCAB) else f"<{t}>" for t in tokens)


def tokenize(text: str) -> list:
    lookup = {s: i for i, s in enumerate(VOCAB)}
    out = []
    for word in text.split():
        if word in lookup:
            out.append(lookup[word])
        elif word.isdigit():
            out.extend(encode_number(int(word)))
        else:
            raise ValueError(f"unknown token {word!r}")
    return out


def apply_op(value: int, op: int, k: int, modulus: int) -> int:
    if op == PLUS:
        return (value + k) % modulus
    if op == MINUS:
        return (value - k) % modulus
    if op == TIMES:
        return (value * k) % modulus
    raise ValueError(f"unknown op token {op}")


def difficulty_bucket(cot_len: int, edges=DEFAULT_BUCKET_EDGES) -> int:
    """Index of the first edge >= ``cot_len``; ``len(edges)`` past the last."""
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly ascending")
    return bisect.bisect_left(edges, cot_len)


def make_instance(start: int, ops, modulus: int, edges=DEFAULT_BUCKET_EDGES) -> TaskInstance:
    """Build an instance from an explicit start value and (op, k) chain."""
    ops = [(SYMBOL_OP.get(o, o), int(k)) for o, k in ops]
    if not ops:
        raise ValueError("need at least one step")
    question = [BOS] + encode_number(start)
    cot = []
    value = start % modulus
    for op, k in ops:
        question += [op] + encode_number(k)
        value = apply_op(value, op, k, modulus)
        cot += [op] + encode_number(k) + [EQ] + encode_number(value) + [SEP]
    question.append(QEND)
    cot += [MARK] + encode_number(value) + [EOS]
    return TaskInstance(tuple(question), tuple(cot), value, len(ops), difficulty_bucket(len(cot), edges))


def gen_instance(seed, n_steps: int, value_modulus: int = 10, edges=DEFAULT_BUCKET_EDGES) -> TaskInstance:
    """Random instance; operands k are drawn from [1, value_modulus)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if value_modulus < 2:
        raise ValueError("value_modulus must be >= 2")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, value_modulus))
    ops = [(OPS[int(rng.integers(0, 3))], int(rng.integers(1, value_modulus))) for _ in range(n_steps)]
    return make_instance(start, ops, value_modulus, edges)


def gen_dataset(seed: int, n: int, min_steps: int, max_steps: int, value_modulus: int = 10,
                edges=DEFAULT_BUCKET_EDGES) -> list:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=n)
    steps = rng.integers(min_steps, max_steps + 1, size=n)
    return [gen_instance(int(s), int(k), value_modulus, edges) for s, k in zip(seeds, steps)]


def extract_answer(tokens) -> int | None:
    """Integer after the last MARK, or None if absent or not followed by digits."""
    tokens = list(tokens)
    idx = None
    for i in range(len(tokens) - 1, -1, -1):
        if tokens[i] == MARK:
            idx = i
            break
    if idx is None:
        return None
    digits = []
    for tok in tokens[idx + 1:]:
        if not is_digit(tok):
            break
        digits.append(str(tok - DIGIT0))
    if not digits:
        return None
    return int("".join(digits))


def verify_reward(tokens, instance: TaskInstance) -> float:
    return 1.0 if extract_answer(tokens) == instance.gold_answer else 0.0


def is_repetitive(tokens, n: int = REPEAT_NGRAM, count: int = REPEAT_COUNT) -> bool:
    """Some n-gram occurs ``count`` times back to back."""
    return repeat_run(tokens, n) >= n * (count - 1)


def classify_error(tokens, instance: TaskInstance, max_new: int) -> ErrorMode:
    if verify_reward(tokens, instance) == 1.0:
        return ErrorMode.NONE
    if is_repetitive(tokens):
        return ErrorMode.REPETITIVE
    if len(tokens) >= max_new and MARK not in tokens:
        return ErrorMode.OVERLENGTH
    return ErrorMode.INCORRECT


def save_dataset(path, instances) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), separators=(",", ":")) + "\n")


def load_dataset(path) -> list:
    with open(path) as fh:
        return [TaskInstance.from_record(json.loads(line)) for line in fh if line.strip()]

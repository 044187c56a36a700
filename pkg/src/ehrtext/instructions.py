"""Task instruction assembly for embedding and decoder providers.

The instruction is always transmitted separately from the record text so
providers can exclude instruction tokens from pooling; only the decoder
prompt fuses instruction, record and the fixed answer-format suffix into a
single string.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources

from .events import TaskSpec, load_task_specs

INSTRUCTION_PREFIX = (
    "Given a patient's electronic healthcare record (EHR) in Markdown format, "
    "retrieve relevant passages that answer the query: "
)
GENERIC_QUERY = "what are the key clinical features of the patient to predict future medical events"
DECODER_SUFFIX = "Answer STRICTLY with a single token: Yes or No. No punctuation, no extra words."


class InstructionMode(enum.Enum):
    TASK_SPECIFIC = "task_specific"
    GENERIC = "generic"
    EMPTY = "empty"


class InstructionError(Exception):
    """Raised when a prompt cannot be built for the requested mode."""


def build_prompt(task: TaskSpec, mode: InstructionMode) -> str:
    """The instruction string for a task under the given mode.

    task_specific requires the task to carry a query; generic substitutes
    the shared query; empty yields the empty string (not a blank line).
    """
    if mode is InstructionMode.EMPTY:
        return ""
    if mode is InstructionMode.GENERIC:
        return INSTRUCTION_PREFIX + GENERIC_QUERY
    if not task.instruction_query:
        raise InstructionError(f"task {task.task_id} has no instruction query")
    return INSTRUCTION_PREFIX + task.instruction_query


def decoder_prompt(task: TaskSpec, record_text: str) -> str:
    """Instruction, record and the answer-format suffix, in that order.

    The suffix appears exactly once, at the end.
    """
    instruction = build_prompt(task, InstructionMode.TASK_SPECIFIC)
    return f"{instruction}\n\n{record_text}\n\n{DECODER_SUFFIX}"


@dataclass(frozen=True)
class InstructionSet:
    tasks: dict[str, TaskSpec]

    def require(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise InstructionError(f"unknown task: {task_id}")
        return self.tasks[task_id]


def default_instruction_set() -> InstructionSet:
    data = resources.files("ehrtext.data")
    queries = data.joinpath("instructions.tsv").read_text("utf-8").splitlines()
    groups = data.joinpath("tasks.tsv").read_text("utf-8").splitlines()
    return InstructionSet(load_task_specs(queries, groups))


def load_instruction_set(instructions_path: str, groups_path: str | None = None) -> InstructionSet:
    with open(instructions_path, encoding="utf-8") as fh:
        queries = fh.read().splitlines()
    groups = None
    if groups_path is not None:
        with open(groups_path, encoding="utf-8") as fh:
            groups = fh.read().splitlines()
    return InstructionSet(load_task_specs(queries, groups))

"""Self-distillation advantages from execution feedback.

The teacher is the student model conditioned on a richer context. It scores
the student's own sampled tokens; the token advantage is the scaled gap.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from ttcompute.adaptation.objects import SdpoAdvantages, SdpoVariant
from ttcompute.core.objects import CheckpointRef, EvalOutcome, SampleRecord
from ttcompute.exceptions import (
    EmptyInputError,
    LengthMismatchError,
    MissingFeedbackError,
)
from ttcompute.policy.module import Policy

TEACHER_INSTRUCTION = "Correctly solve the original question."
SOLUTION_HEADER = "A correct solution from the same batch:"
FEEDBACK_HEADER = "Execution feedback:"


def sdpo_advantages(
    teacher_logprobs: Sequence[float],
    student_logprobs: Sequence[float],
    beta: float = 1.0,
    variant: SdpoVariant = SdpoVariant.FEEDBACK,
) -> SdpoAdvantages:
    """``beta * (teacher[t] - student[t])`` for every token.

    Raises:
        EmptyInputError: No tokens.
        LengthMismatchError: The two sequences differ in length.
    """
    if len(teacher_logprobs) != len(student_logprobs):
        raise LengthMismatchError(
            f"teacher scored {len(teacher_logprobs)} tokens, "
            f"student {len(student_logprobs)}"
        )
    if len(teacher_logprobs) == 0:
        raise EmptyInputError("no tokens to compute advantages for")
    return SdpoAdvantages(
        beta=beta,
        per_token=[
            beta * (t - s) for t, s in zip(teacher_logprobs, student_logprobs)
        ],
        variant=variant,
    )


def render_feedback(outcome: EvalOutcome) -> str:
    lines = [
        FEEDBACK_HEADER,
        f"compiled: {'yes' if outcome.compiled else 'no'}",
        f"correct: {'yes' if outcome.correct else 'no'}",
        f"speedup: {outcome.speedup:.2f}x",
        f"runtime: {outcome.runtime:.4f} ms",
    ]
    if outcome.error_trace:
        lines.append(f"error: {outcome.error_trace}")
    return "\n".join(lines)


def build_teacher_context(
    task_prompt: str,
    correct_solution: Optional[str],
    feedback: Optional[EvalOutcome],
    variant: SdpoVariant = SdpoVariant.FEEDBACK,
) -> str:
    """Teacher conditioning text.

    The feedback variant joins, in order, the task prompt, a correct
    same-batch solution when there is one, the execution feedback and the
    fixed instruction. The student's own code never appears. The
    prompt-only variant is the task prompt verbatim.

    Raises:
        MissingFeedbackError: Feedback variant without an outcome.
    """
    if SdpoVariant(variant) == SdpoVariant.PROMPT_ONLY:
        return task_prompt
    if feedback is None:
        raise MissingFeedbackError("feedback variant needs an evaluation outcome")

    sections = [task_prompt]
    if correct_solution:
        sections.append(f"{SOLUTION_HEADER}\n{correct_solution}")
    sections.append(render_feedback(feedback))
    sections.append(TEACHER_INSTRUCTION)
    return "\n\n".join(sections)


def _batch_solution(
    sample: SampleRecord, batch: Sequence[SampleRecord]
) -> Optional[str]:
    """Fastest correct sample of the same task, other than ``sample``."""
    peers = [
        other
        for other in batch
        if other.task_id == sample.task_id
        and other.correct
        and other.key != sample.key
        and other.code != sample.code
    ]
    if not peers:
        return None
    return min(peers, key=lambda s: (-s.speedup, s.sample_index)).code


class SdpoRewarder:
    """Turns a batch of rollouts into SDPO rewards.

    A rollout's reward is its summed token advantage. Teacher tokens, the
    context plus the scored tokens as the backend counts them, accumulate in
    ``teacher_tokens``.
    """

    def __init__(
        self,
        policy: Policy,
        beta: float = 1.0,
        variant: SdpoVariant = SdpoVariant.FEEDBACK,
    ):
        self.policy = policy
        self.beta = beta
        self.variant = SdpoVariant(variant)
        self.teacher_tokens = 0

    def __call__(
        self, checkpoint: CheckpointRef, batch: Sequence[SampleRecord]
    ) -> Tuple[List[float], int]:
        rewards = []
        tokens = 0
        for sample in batch:
            context = build_teacher_context(
                self.policy.task_prompt(sample.task_id),
                _batch_solution(sample, batch),
                sample.outcome,
                self.variant,
            )
            teacher = self.policy.teacher_logprobs(checkpoint, sample, context)
            student = self.policy.token_logprobs(checkpoint, sample)
            advantages = sdpo_advantages(
                teacher.logprobs, student.logprobs, self.beta, self.variant
            )
            rewards.append(advantages.total)
            tokens += teacher.context_tokens + len(teacher.logprobs)
        self.teacher_tokens += tokens
        return rewards, tokens

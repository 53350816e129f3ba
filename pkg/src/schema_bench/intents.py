"""Table-intent synthesis: sample candidate intents, then pick the best one
with a judge model.

Five candidates are sampled per instance at temperature 0.7 (distinct cache
seed tags keep the samples independent), the judge scores them and names the
best goal text, and the chosen candidate is resolved back by exact match or
token overlap.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ParseError
from .gateway import ChatRequest, Gateway, extract_json_payload
from .prompts import (
    INTENT_GENERATION_TEMPLATE,
    INTENT_JUDGE_TEMPLATE,
    SYSTEM_PROMPT,
    render_template,
)
from .rendering import render_title_abstract_block
from .schema import IntentCandidate, TableInstance, serialize_schema

DEFAULT_CANDIDATES = 5

JSON_FORMAT_REMINDER = (
    "\n\nReminder: respond with only the JSON object in the requested format."
)


@dataclass(frozen=True)
class JudgeVerdict:
    justification: str
    best_goal: str | None = None

    def __post_init__(self):
        if self.best_goal is not None and not self.best_goal:
            raise ParseError("judge best_goal present but empty")


def _table_block(instance: TableInstance) -> str:
    if instance.table_values:
        return instance.table_values
    if instance.reference_schema is not None:
        return serialize_schema(instance.reference_schema)
    raise ParseError(
        f"instance {instance.instance_id!r} has neither table values nor a reference schema"
    )


def build_intent_prompt(instance: TableInstance) -> str:
    return render_template(
        INTENT_GENERATION_TEMPLATE,
        table=_table_block(instance),
        caption=instance.caption or "",
        in_text_refs="\n".join(instance.in_text_refs or ()),
        papers=render_title_abstract_block(instance.papers),
    )


def build_judge_prompt(instance: TableInstance, candidates: list[IntentCandidate]) -> str:
    goal_text = "\n".join(
        f"Candidate {i + 1}: {c.goal}" for i, c in enumerate(candidates)
    )
    return render_template(
        INTENT_JUDGE_TEMPLATE,
        table=_table_block(instance),
        caption=instance.caption or "",
        in_text_refs="\n".join(instance.in_text_refs or ()),
        goal_text=goal_text,
    )


def _ask_json(gateway: Gateway, request: ChatRequest) -> dict:
    """One completion parsed as JSON, with a single re-ask on failure.

    The re-ask appends a format reminder and uses a distinct seed tag: an
    identical request would just replay the cached malformed completion.
    """
    completion = gateway.complete(request)
    try:
        payload = extract_json_payload(completion.text)
        if isinstance(payload, dict):
            return payload
    except Exception:
        pass
    retry = ChatRequest(
        model=request.model,
        system_prompt=request.system_prompt,
        user_prompt=request.user_prompt + JSON_FORMAT_REMINDER,
        temperature=request.temperature,
        top_p=request.top_p,
        max_tokens=request.max_tokens,
        seed_tag=f"{request.seed_tag or ''}-retry",
    )
    completion = gateway.complete(retry)
    try:
        payload = extract_json_payload(completion.text)
    except Exception as exc:
        raise ParseError(
            f"no JSON payload after retry: {exc}", completion.text
        ) from exc
    if not isinstance(payload, dict):
        raise ParseError("payload is not a JSON object", completion.text)
    return payload


def generate_intent_candidates(
    instance: TableInstance,
    n: int,
    gateway: Gateway,
    model: str,
    temperature: float = 0.7,
) -> list[IntentCandidate]:
    """Sample n intent candidates with independent seed tags, in order."""
    if n < 1:
        raise ValueError("need at least one candidate")
    prompt = build_intent_prompt(instance)
    candidates = []
    for i in range(n):
        request = ChatRequest(
            model=model,
            system_prompt=SYSTEM_PROMPT,
            user_prompt=prompt,
            temperature=temperature,
            seed_tag=f"{instance.instance_id}:intent:{i}",
        )
        try:
            payload = _ask_json(gateway, request)
            goal = payload.get("goal")
            if not isinstance(goal, str) or not goal.strip():
                raise ParseError("candidate payload lacks a goal", str(payload))
        except ParseError as exc:
            raise ParseError(
                f"intent sample {i} unparseable: {exc}", exc.completion_text
            ) from exc
        justification = payload.get("justification")
        candidates.append(
            IntentCandidate(
                goal=goal.strip(),
                justification=justification if isinstance(justification, str) else "",
            )
        )
    return candidates


_WORD = re.compile(r"[a-z0-9]+")


def _overlap(a: str, b: str) -> float:
    ta, tb = set(_WORD.findall(a.lower())), set(_WORD.findall(b.lower()))
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def resolve_best_goal(candidates: list[IntentCandidate], best_goal: str) -> int:
    """Index of the candidate the judge named: exact goal-text match first,
    then highest token overlap (earliest wins ties)."""
    for i, c in enumerate(candidates):
        if c.goal == best_goal:
            return i
    scores = [_overlap(c.goal, best_goal) for c in candidates]
    return max(range(len(candidates)), key=lambda i: (scores[i], -i))


def judge_select(
    instance: TableInstance,
    candidates: list[IntentCandidate],
    gateway: Gateway,
    model: str,
    temperature: float = 0.7,
) -> tuple[JudgeVerdict, int]:
    """Ask the judge for the best candidate and resolve it to an index.

    A "None"/absent best_goal is retried once; if the judge still declines,
    the first candidate is chosen and the verdict records the refusal.
    """
    if not candidates:
        raise ValueError("judge_select needs at least one candidate")
    prompt = build_judge_prompt(instance, candidates)

    def ask(tag: str) -> JudgeVerdict:
        payload = _ask_json(
            gateway,
            ChatRequest(
                model=model,
                system_prompt=SYSTEM_PROMPT,
                user_prompt=prompt,
                temperature=temperature,
                seed_tag=f"{instance.instance_id}:judge{tag}",
            ),
        )
        best = payload.get("best_goal")
        if not isinstance(best, str) or not best.strip() or best.strip().lower() == "none":
            best = None
        justification = payload.get("justification")
        return JudgeVerdict(
            justification=justification if isinstance(justification, str) else str(justification),
            best_goal=best.strip() if best else None,
        )

    verdict = ask("")
    if verdict.best_goal is None:
        verdict = ask(":again")
    if verdict.best_goal is None:
        return verdict, 0
    return verdict, resolve_best_goal(candidates, verdict.best_goal)


def synthesize_intent(
    instance: TableInstance,
    gateway: Gateway,
    model: str,
    n: int = DEFAULT_CANDIDATES,
    temperature: float = 0.7,
) -> dict:
    """Full intent synthesis for one instance. Returns a provenance record:
    {intent, fallback, candidates, verdict, chosen_index}."""
    candidates = generate_intent_candidates(
        instance, n, gateway, model, temperature=temperature
    )
    verdict, chosen = judge_select(
        instance, candidates, gateway, model, temperature=temperature
    )
    return {
        "intent": candidates[chosen].goal,
        "fallback": verdict.best_goal is None,
        "candidates": [
            {"goal": c.goal, "justification": c.justification} for c in candidates
        ],
        "verdict": {"justification": verdict.justification, "best_goal": verdict.best_goal},
        "chosen_index": chosen,
    }


def compare_rankings(
    judge_ranks: list[list[int]], human_ranks: list[list[int]]
) -> tuple[float, float, list[float]]:
    """Per-example Spearman correlation between judge and human rankings,
    plus its mean and population standard deviation. Offline validation
    utility; collecting the human rankings is out of scope here."""
    from .evaluation import spearman_rho

    if len(judge_ranks) != len(human_ranks):
        raise ValueError("ranking lists differ in length")
    rhos = [spearman_rho(j, h) for j, h in zip(judge_ranks, human_ranks)]
    mean = sum(rhos) / len(rhos)
    var = sum((r - mean) ** 2 for r in rhos) / len(rhos)
    return mean, var**0.5, rhos

"""
Program Proposers for Model Learning
Prompt construction, code-block extraction, and the proposer backends:
an OpenAI-style chat-completion endpoint over requests, Vertex AI Gemini
through LangChain, and a scripted queue for tests and offline runs.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import requests

import settings
from candidate_tracker import CandidateTracker
from pomdp_core import (
    BoolType,
    DomainSchema,
    EnumType,
    GridType,
    IntType,
    PomdpCoderError,
    RecordType,
)
from pps_parser import TEMPLATES, Program, parse

logger = logging.getLogger(__name__)


class ProposalError(PomdpCoderError):
    """Transport or status failure talking to the proposer endpoint."""

    def __init__(self, message: str, *, attempts: int, status: int | None = None, cause: Exception | None = None):
        super().__init__(message, stage="propose", context={"attempts": attempts, "status": status}, cause=cause)
        self.attempts = attempts
        self.status = status


class NoCodeBlock(PomdpCoderError):
    """Response contained no fenced code block."""


# ---------------------------------------------------------------------------
# Requests and templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentPrompt:
    what_to_model: str
    model_input: str
    model_output: str


COMPONENT_PROMPTS = {
    "initial": ComponentPrompt("initial state distribution", "on the input of (empty_state)", "(state)"),
    "transition": ComponentPrompt("transition function", "on the inputs of (state, action)", "(new_state)"),
    "observation": ComponentPrompt("observation function", "on the inputs of (state, action, empty_obs)", "(obs)"),
    "reward": ComponentPrompt("reward function", "on the inputs of (state, action, next_state)", "(reward, done)"),
}


def function_template(component: str, schema: DomainSchema) -> str:
    state, obs = schema.state.name, schema.observation.name
    templates = {
        "initial": f'''def initial_func(empty_state):
    """
    Input:
        empty_state ({state}): an empty state with only the fixed layout filled in
    Returns:
        state ({state}): the initial state of the environment
    """
''',
        "transition": f'''def transition_func(state, action):
    """
    Args:
        state ({state}): the state of the environment
        action (int): action to be taken in state `state`
    Returns:
        new_state ({state}): the new state of the environment
    """
''',
        "observation": f'''def observation_func(state, action, empty_obs):
    """
    Args:
        state ({state}): the state of the environment
        action (int): the previous action that was taken (NO_ACTION right after reset)
        empty_obs ({obs}): an empty observation that needs to be filled and returned
    Returns:
        obs ({obs}): observation of the agent
    """
''',
        "reward": f'''def reward_func(state, action, next_state):
    """
    Args:
        state ({state}): the state of the environment
        action (int): the action to be executed
        next_state ({state}): the next state of the environment
    Returns:
        reward (float): the reward of that state
        done (bool): whether the episode is done
    """
''',
    }
    return templates[component]


@dataclass(frozen=True)
class ProposalRequest:
    kind: str
    component: str
    schema: DomainSchema
    template_source: str
    examples: tuple[str, ...] = ()
    prev_program: Program | None = None
    error_block: str | None = None

    def __post_init__(self):
        if self.kind not in ("initial", "refinement"):
            raise ValueError(f"Unknown request kind '{self.kind}'")
        if self.component not in TEMPLATES:
            raise ValueError(f"Unknown component '{self.component}'")
        if self.kind == "refinement":
            if self.prev_program is None:
                raise ValueError("refinement requests need the previous program")
            if not self.error_block:
                raise ValueError("refinement requests need a non-empty error set")
        elif self.prev_program is not None or self.error_block is not None:
            raise ValueError("initial requests carry no previous program or errors")


@dataclass(frozen=True)
class ProposerEndpointConfig:
    base_url: str = settings.PROPOSER_URL
    api_key_env_name: str = settings.PROPOSER_API_KEY_ENV
    model_name: str = settings.PROPOSER_MODEL
    temperature: float = settings.PROPOSER_TEMPERATURE
    max_retries: int = settings.PROPOSER_MAX_RETRIES
    timeout: float = settings.PROPOSER_TIMEOUT
    backoff: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------


def _type_text(t) -> str:
    if isinstance(t, IntType):
        return f"int  # {t.lo}..{t.hi}"
    if isinstance(t, BoolType):
        return "bool"
    if isinstance(t, EnumType):
        return t.name
    if isinstance(t, GridType):
        return f"Grid[{t.cell.name}]  # {t.width} wide x {t.height} high, index as grid[y][x]"
    if isinstance(t, RecordType):
        return t.name
    return "float"


def render_code_api(schema: DomainSchema) -> str:
    """The schema as a Python-flavoured class listing."""
    lines = []
    for enum in schema.enums.values():
        lines.append(f"class {enum.name}(enum.IntEnum):")
        lines.extend(f"    {variant} = {i}" for i, variant in enumerate(enum.variants))
        lines.append("")
    lines.append("class Action(enum.IntEnum):")
    lines.extend(f"    {name} = {i}" for i, name in enumerate(schema.actions))
    lines.append("")
    lines.append("NO_ACTION = -1")
    lines.append("")
    for record in (schema.state, schema.observation):
        lines.append("@dataclass")
        lines.append(f"class {record.name}:")
        lines.extend(f"    {name}: {_type_text(t)}" for name, t in record.fields)
        lines.append("")
    lines.append("# Grid(width, height, fill) builds a scratch grid; grids expose .width and .height")
    lines.append("# Randomness: sample(\"site_name\", Bernoulli(p) | Categorical([w0, w1, ...]) | UniformInt(lo, hi))")
    return "\n".join(lines)


def _rules(component: str) -> str:
    name = TEMPLATES[component].function
    rules = [
        f"Only output the definition of `{name}`.",
        f"Put any helper logic inside `{name}`; do not define other functions.",
        "Do not output example usage.",
        "Do not create new classes or rewrite the existing ones.",
        "Do not import any modules.",
        "Do not overfit to the specific samples.",
        "Use only if/elif/else, for loops over range() with fixed bounds, and arithmetic; no while loops or recursion.",
        'Implement any randomness with `sample("name", distribution)` using Bernoulli, Categorical or UniformInt.',
        f"Put the `{name}` function in a python code block.",
    ]
    return "\n".join(f"{i}. {rule}" for i, rule in enumerate(rules, start=1))


def build_initial_prompt(req: ProposalRequest) -> str:
    if req.kind != "initial":
        raise ValueError("build_initial_prompt needs an initial request")
    info = COMPONENT_PROMPTS[req.component]
    name = TEMPLATES[req.component].function
    samples = "\n".join(req.examples)
    return f"""You are a robot exploring its environment.

Environment Description: {req.schema.description}
Goal Description: {req.schema.goal_description}

Your goal is to model the {info.what_to_model}.
Write python code that models the world as seen in the experiences below.
The code must be directly runnable {info.model_input} and return {info.model_output}.

Below are a few samples from the environment distribution. They are only samples from a larger distribution that your code should model.

{samples}

Here is the code API and the template for the `{name}` function:

```
{render_code_api(req.schema)}

{req.template_source}```

First explain in english what you believe the {info.what_to_model} is. Then implement it.

RULES:
{_rules(req.component)}
"""


def build_refinement_prompt(req: ProposalRequest) -> str:
    if req.kind != "refinement":
        raise ValueError("build_refinement_prompt needs a refinement request")
    info = COMPONENT_PROMPTS[req.component]
    name = TEMPLATES[req.component].function
    return f"""You are a robot exploring its environment.

Environment Description: {req.schema.description}
Goal Description: {req.schema.goal_description}

Your goal is to model the {info.what_to_model} of the world in python.
You tried before and wrote a partially correct solution. The observed data disagrees with that model in several cases, so improve the code to come closer to the true distribution.

Here is the solution you came up with before:

```
{render_code_api(req.schema)}

{req.prev_program.text}```

{req.error_block}

First explain in english what you believe the {info.what_to_model} is, then improve your code.
You must implement the `{name}` function. It must be directly runnable {info.model_input} and return {info.model_output}.

RULES:
{_rules(req.component)}
{len(_rules(req.component).splitlines()) + 1}. Do not list specific indices that overfit to the examples; use ranges instead.
"""


def render_error_block(groups: Sequence[tuple[str, Sequence[str], Sequence[str]]]) -> str:
    """groups: (condition, uncovered dataset outcomes, model outcomes) per condition."""
    parts = []
    for condition, dataset_outcomes, model_outcomes in groups:
        lines = ["Here are some samples from the real world that were impossible under your model"]
        lines.extend(f"{condition} -> {outcome}" for outcome in dataset_outcomes)
        lines.append("")
        lines.append("And here are some samples from your code under the same conditions")
        lines.extend(f"{condition} -> {outcome}" for outcome in model_outcomes)
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def build_direct_llm_prompt(schema: DomainSchema, demos: Sequence[str], history: Sequence[str]) -> str:
    rollouts = "\n\n".join(demos)
    current = "\n".join(history) if history else "(episode just started)"
    return f"""You are a robot exploring its environment.

Environment Description: {schema.description}
Goal Description: {schema.goal_description}

Your goal is to predict the next best action to reach the goal and maximize reward.

Here is the code API of the environment:

```
{render_code_api(schema)}
```

Here are some example rollouts from the environment:

{rollouts}

Here is the history of the episode you are in right now:

{current}

Output the next action as an integer in a code block exactly like this:

```
next_action:int = 0
```

Explain your reasoning in one sentence.
"""


_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_NEXT_ACTION = re.compile(r"next_action\s*(?::\s*int)?\s*=\s*(-?\d+)")


def last_code_block(text: str) -> str:
    blocks = _FENCE.findall(text or "")
    if not blocks:
        raise NoCodeBlock("response contains no fenced code block", stage="extract")
    return blocks[-1]


def extract_program(response_text: str, component: str, schema: DomainSchema) -> Program:
    """Parse the last fenced code block of a response."""
    return parse(last_code_block(response_text), component, schema)


def extract_next_action(response_text: str, n_actions: int) -> int:
    match = _NEXT_ACTION.search(last_code_block(response_text))
    if not match:
        raise NoCodeBlock("code block has no next_action assignment", stage="extract")
    action = int(match.group(1))
    if not 0 <= action < n_actions:
        raise NoCodeBlock(f"next_action {action} is not a valid action", stage="extract")
    return action


# ---------------------------------------------------------------------------
# Chat clients
# ---------------------------------------------------------------------------


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpChatClient:
    """Single-turn chat completion over an OpenAI-style endpoint."""

    def __init__(self, config: ProposerEndpointConfig | None = None):
        self.config = config or ProposerEndpointConfig()

    def complete(self, prompt: str) -> str:
        cfg = self.config
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        api_key = os.getenv(cfg.api_key_env_name)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        attempts = cfg.max_retries + 1
        last_status: int | None = None
        last_error: Exception | None = None
        for attempt in range(1, attempts + 1):
            try:
                response = requests.post(url, headers=headers, json=payload, timeout=cfg.timeout)
                last_status = response.status_code
                if response.status_code == 200:
                    return response.json()["choices"][0]["message"]["content"]
                logger.warning("⚠️ Proposer returned status %s (attempt %d/%d)", response.status_code, attempt, attempts)
            except (requests.RequestException, KeyError, IndexError, ValueError) as e:
                last_error = e
                logger.warning("⚠️ Proposer request failed (attempt %d/%d): %s", attempt, attempts, e)
            if attempt < attempts and cfg.backoff > 0:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
        raise ProposalError(
            f"proposer request failed after {attempts} attempt(s)",
            attempts=attempts,
            status=last_status,
            cause=last_error,
        )


class VertexChatClient:
    """Gemini on Vertex AI through LangChain."""

    def __init__(self, model: str | None = None, temperature: float | None = None):
        import vertexai
        from langchain_google_vertexai import ChatVertexAI

        vertexai.init(project=settings.VERTEX_PROJECT or None, location=settings.VERTEX_LOCATION)
        self.llm = ChatVertexAI(
            model=model or settings.VERTEX_MODEL_NAME,
            temperature=settings.PROPOSER_TEMPERATURE if temperature is None else temperature,
        )

    def complete(self, prompt: str) -> str:
        try:
            return self.llm.invoke(prompt).content
        except Exception as e:
            raise ProposalError("Vertex AI request failed", attempts=1, cause=e) from e


class ScriptedChatClient:
    """Replays canned responses; the last one repeats once the list runs out."""

    def __init__(self, responses: Sequence[str]):
        if not responses:
            raise ValueError("ScriptedChatClient needs at least one response")
        self.responses = list(responses)
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return self.responses[min(len(self.prompts) - 1, len(self.responses) - 1)]


# ---------------------------------------------------------------------------
# Proposers
# ---------------------------------------------------------------------------


class Proposer(Protocol):
    def propose(self, req: ProposalRequest) -> Program: ...


def build_prompt(req: ProposalRequest) -> str:
    return build_initial_prompt(req) if req.kind == "initial" else build_refinement_prompt(req)


class LlmProposer:
    """Prompts a chat client and extracts the program from its answer."""

    def __init__(self, client: ChatClient, tracker: CandidateTracker | None = None):
        self.client = client
        self.tracker = tracker
        self.calls = 0

    def propose(self, req: ProposalRequest) -> Program:
        prompt = build_prompt(req)
        self.calls += 1
        logger.info("🔍 Requesting %s %s program (call %d)", req.kind, req.component, self.calls)
        try:
            response = self.client.complete(prompt)
        except ProposalError as e:
            if self.tracker:
                self.tracker.log_exchange(req.component, req.kind, prompt, None, error=str(e))
            raise
        if self.tracker:
            self.tracker.log_exchange(req.component, req.kind, prompt, response)
        return extract_program(response, req.component, req.schema)


@dataclass
class ScriptedProposer:
    """Returns queued sources per component in order; an exhausted queue repeats its last entry."""

    queues: dict[str, list[str]]
    calls: dict[str, int] = field(default_factory=dict)
    requests: list[ProposalRequest] = field(default_factory=list)

    def propose(self, req: ProposalRequest) -> Program:
        queue = self.queues.get(req.component)
        if not queue:
            raise ProposalError(f"no scripted programs for component '{req.component}'", attempts=1)
        index = self.calls.get(req.component, 0)
        self.calls[req.component] = index + 1
        self.requests.append(req)
        source = queue[min(index, len(queue) - 1)]
        if "```" in source:
            return extract_program(source, req.component, req.schema)
        return parse(source, req.component, req.schema)

    @classmethod
    def from_directory(cls, path: str | Path) -> "ScriptedProposer":
        """<path>/<component>/*.pps, each queue sorted by file name."""
        root = Path(path)
        queues = {}
        for component in TEMPLATES:
            folder = root / component
            if folder.is_dir():
                queues[component] = [p.read_text(encoding="utf-8") for p in sorted(folder.glob("*.pps"))]
        if not queues:
            raise FileNotFoundError(f"No scripted programs under {root}")
        return cls(queues)

    @classmethod
    def from_models(cls, models) -> "ScriptedProposer":
        return cls({c: [models.program(c).text] for c in TEMPLATES})


def make_proposer(backend: str | None = None, *, fixture: str | Path | None = None,
                  models=None, tracker: CandidateTracker | None = None) -> Proposer:
    """Proposer for the configured backend: http, vertex or scripted."""
    backend = backend or settings.PROPOSER_BACKEND
    if backend == "scripted":
        if fixture:
            return ScriptedProposer.from_directory(fixture)
        if models is None:
            raise ValueError("scripted backend needs a fixture directory or ground-truth models")
        return ScriptedProposer.from_models(models)
    if backend == "vertex":
        return LlmProposer(VertexChatClient(), tracker)
    if backend == "http":
        return LlmProposer(HttpChatClient(), tracker)
    raise ValueError(f"Unknown proposer backend '{backend}'")


def make_chat_client(backend: str | None = None) -> ChatClient:
    backend = backend or settings.PROPOSER_BACKEND
    if backend == "vertex":
        return VertexChatClient()
    if backend == "http":
        return HttpChatClient()
    raise ValueError(f"No chat client for backend '{backend}'")

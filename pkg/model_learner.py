"""
Model Learner
Coverage scoring of candidate programs against a dataset and a Thompson-sampled
propose/refine tree, run as a LangGraph state graph once per component
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from candidate_tracker import CandidateTracker
from pomdp_core import (
    COMPONENTS,
    NO_ACTION,
    Dataset,
    DomainSchema,
    PomdpCoderError,
    RecordValue,
    Value,
    canonical_encode,
    derive_seed,
    encode_inputs,
    render_value,
    reward_value,
    split_dataset,
)
from pps_parser import TEMPLATES, Program, ProgramError, PpsRuntimeError
from pps_runtime import run, sampler_for
from program_proposer import (
    NoCodeBlock,
    ProposalError,
    ProposalRequest,
    Proposer,
    function_template,
    render_error_block,
)
import settings

logger = logging.getLogger(__name__)

REWARD_TOLERANCE = 1e-6
PROPOSAL_ATTEMPTS = 3


class LearnFailure(PomdpCoderError):
    """No usable program could be produced for a component."""

    def __init__(self, message: str, *, component: str, context: dict | None = None):
        super().__init__(message, stage="learn", context={"component": component, **(context or {})})
        self.component = component


@dataclass(frozen=True)
class LearnConfig:
    max_refinements: int = settings.LEARN_DEFAULTS["max_refinements"]
    smoothing: float = settings.LEARN_DEFAULTS["smoothing"]
    k_cov: int = settings.LEARN_DEFAULTS["k_cov"]
    nd: int = settings.LEARN_DEFAULTS["nd"]
    nc: int = settings.LEARN_DEFAULTS["nc"]
    ns: int = settings.LEARN_DEFAULTS["ns"]
    max_sites: int = settings.LEARN_DEFAULTS["max_sites"]
    test_fraction: float = settings.DEFAULT_TEST_FRACTION

    def __post_init__(self):
        for name in ("max_refinements", "smoothing", "k_cov", "nd", "nc", "ns", "max_sites"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# Model sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    node_id: str
    coverage: float


@dataclass(frozen=True)
class ComponentStats:
    nodes_created: int = 0
    proposer_calls: int = 0
    coverage_train: float = 1.0
    coverage_test: float = 1.0


@dataclass
class ModelSet:
    """The four component programs of one learned (or hand-written) POMDP."""

    schema: DomainSchema
    programs: dict[str, Program]
    provenance: dict[str, Provenance] = field(default_factory=dict)
    stats: dict[str, ComponentStats] = field(default_factory=dict)
    max_sites: int = settings.LEARN_DEFAULTS["max_sites"]

    def __post_init__(self):
        missing = [c for c in COMPONENTS if c not in self.programs]
        if missing:
            raise ValueError(f"ModelSet is missing components: {missing}")
        for component, program in self.programs.items():
            if program.component != component:
                raise ValueError(f"program for '{component}' was parsed as '{program.component}'")

    def program(self, component: str) -> Program:
        return self.programs[component]

    def sampler(self, component: str):
        return sampler_for(self.programs[component], self.max_sites)

    @property
    def init(self) -> Program:
        return self.programs["initial"]

    @property
    def trans(self) -> Program:
        return self.programs["transition"]

    @property
    def obs(self) -> Program:
        return self.programs["observation"]

    @property
    def rew(self) -> Program:
        return self.programs["reward"]


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pair:
    inputs: tuple[Value, ...]
    outcome: Value


def extract_pairs(d: Dataset, component: str) -> list[Pair]:
    """(input, outcome) pairs of one component, in dataset order."""
    schema = d.schema
    pairs: list[Pair] = []
    for record in d.records:
        if component == "initial":
            if record.step == 0:
                pairs.append(Pair((schema.initial_context,), record.state))
        elif component == "transition":
            pairs.append(Pair((record.state, record.action), record.next_state))
        elif component == "observation":
            pairs.append(Pair((record.next_state, record.action, schema.empty_observation), record.observation))
        elif component == "reward":
            pairs.append(Pair((record.state, record.action, record.next_state),
                              reward_value(record.reward, record.done)))
        else:
            raise ValueError(f"Unknown component '{component}'")
    return pairs


def _same_outcome(a: Value, b: Value) -> bool:
    if isinstance(a, RecordValue) and a.name == "Reward" and isinstance(b, RecordValue) and b.name == "Reward":
        return abs(a["reward"] - b["reward"]) <= REWARD_TOLERANCE and a["done"] == b["done"]
    return canonical_encode(a) == canonical_encode(b)


class _ConditionModel:
    """Everything the program can produce on one input, exact or sampled."""

    def __init__(self, program: Program, inputs: tuple, k: int, max_sites: int, seed: int):
        self.table = sampler_for(program, max_sites).support(inputs)
        self.errors: list[str] = []
        if self.table is not None:
            self.outcomes = list(self.table.outcomes)
            self.errors = list(self.table.errors)
        else:
            self.outcomes = []
            for i in range(k):
                try:
                    self.outcomes.append(run(program, inputs, derive_seed(seed, i)))
                except PpsRuntimeError as e:
                    if e.message not in self.errors:
                        self.errors.append(e.message)
        self._keys = {canonical_encode(o) for o in self.outcomes}

    def covers(self, outcome: Value) -> bool:
        if canonical_encode(outcome) in self._keys:
            return True
        return any(_same_outcome(o, outcome) for o in self.outcomes)


@dataclass
class CoverageResult:
    score: float
    errors: list[Pair]
    messages: list[str] = field(default_factory=list)


def coverage(p: Program | ProgramError, pairs: Sequence[Pair], k: int = 100,
             max_sites: int = 16, seed: int = 0) -> CoverageResult:
    """Fraction of pairs whose outcome has support under p.

    Enumerates the program's support when possible; otherwise an outcome counts
    as covered when it shows up among k seeded runs on the same input.
    """
    if isinstance(p, ProgramError):
        return CoverageResult(0.0, list(pairs), [p.to_feedback()])
    if not pairs:
        return CoverageResult(1.0, [])
    models: dict[bytes, _ConditionModel] = {}
    errors: list[Pair] = []
    messages: list[str] = []
    for pair in pairs:
        key = encode_inputs(pair.inputs)
        model = models.get(key)
        if model is None:
            model = _ConditionModel(p, pair.inputs, k, max_sites, derive_seed(seed, len(models)))
            models[key] = model
            messages.extend(m for m in model.errors if m not in messages)
        if not model.covers(pair.outcome):
            errors.append(pair)
    return CoverageResult(1.0 - len(errors) / len(pairs), errors, messages)


@dataclass
class Evaluation:
    pooled: float
    train: float
    test: float
    errors: list[Pair]
    messages: list[str]


def eval_model(p: Program | ProgramError, train_pairs: Sequence[Pair], test_pairs: Sequence[Pair],
               k: int = 100, max_sites: int = 16, seed: int = 0) -> Evaluation:
    """Pooled train+test coverage; errors come from train pairs only."""
    train = coverage(p, train_pairs, k, max_sites, seed)
    test = coverage(p, test_pairs, k, max_sites, seed)
    total = len(train_pairs) + len(test_pairs)
    if total == 0:
        pooled = 1.0
    else:
        covered = (len(train_pairs) - len(train.errors)) + (len(test_pairs) - len(test.errors))
        pooled = covered / total
    return Evaluation(pooled, train.score, test.score, train.errors, train.messages)


# ---------------------------------------------------------------------------
# Thompson tree
# ---------------------------------------------------------------------------


@dataclass
class CandidateNode:
    node_id: str
    program: Program
    alpha: float
    beta: float
    coverage: float
    coverage_train: float
    coverage_test: float
    errors: list[Pair]
    messages: list[str]
    parent: str | None
    order: int
    from_proposer: bool = True

    @property
    def refinable(self) -> bool:
        return bool(self.errors)


def thompson_select(tree: Sequence[CandidateNode], seed: int) -> str:
    """One Beta draw per node; the highest draw wins."""
    if not tree:
        raise ValueError("thompson_select needs a nonempty tree")
    rng = np.random.default_rng(seed)
    draws = rng.beta([n.alpha for n in tree], [n.beta for n in tree])
    return tree[int(np.argmax(draws))].node_id


def render_condition(component: str, inputs: Sequence[Value], schema: DomainSchema) -> str:
    parts = []
    for name, value in zip(TEMPLATES[component].params, inputs):
        if name in ("empty_obs", "empty_state"):
            continue
        if name == "action":
            text = "NO_ACTION" if value == NO_ACTION else f"Action.{schema.actions[value]}"
        else:
            text = render_value(value, schema)
        parts.append(f"{name}={text}")
    return "(" + ", ".join(parts) + ")"


def render_outcome(outcome: Value, schema: DomainSchema) -> str:
    if isinstance(outcome, RecordValue) and outcome.name == "Reward":
        return f"(reward={outcome['reward']!r}, done={outcome['done']})"
    return render_value(outcome, schema)


def render_examples(pairs: Sequence[Pair], component: str, schema: DomainSchema, n: int, seed: int) -> tuple[str, ...]:
    if not pairs:
        return ()
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(pairs), size=min(n, len(pairs)), replace=False))
    return tuple(
        f"{render_condition(component, pairs[i].inputs, schema)} -> {render_outcome(pairs[i].outcome, schema)}"
        for i in picks
    )


def build_error_block(node: CandidateNode, component: str, schema: DomainSchema, cfg: LearnConfig, seed: int) -> str:
    """NC uncovered conditions, each with up to NS dataset outcomes and NS model outcomes."""
    by_condition: dict[bytes, list[Pair]] = {}
    for pair in node.errors:
        by_condition.setdefault(encode_inputs(pair.inputs), []).append(pair)
    keys = list(by_condition)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(keys), size=min(cfg.nc, len(keys)), replace=False))
    groups = []
    for j in chosen:
        pairs = by_condition[keys[j]]
        inputs = pairs[0].inputs
        condition = render_condition(component, inputs, schema)
        seen: dict[bytes, str] = {}
        for pair in pairs:
            seen.setdefault(canonical_encode(pair.outcome), render_outcome(pair.outcome, schema))
        dataset_outcomes = list(seen.values())[: cfg.ns]
        model_outcomes = []
        for i in range(cfg.ns):
            try:
                out = run(node.program, inputs, derive_seed(seed, j, i))
                model_outcomes.append(render_outcome(out, schema))
            except PpsRuntimeError as e:
                model_outcomes.append(f"error: {e.message}")
        groups.append((condition, dataset_outcomes, model_outcomes))
    block = render_error_block(groups)
    if node.messages:
        block += "\n\nYour code also raised these errors:\n" + "\n".join(node.messages[:3])
    return block


# ---------------------------------------------------------------------------
# LangGraph learning loop
# ---------------------------------------------------------------------------


class LearnState(TypedDict):
    component: str
    dataset: Dataset
    prev: Program | None
    cfg: LearnConfig
    proposer: Proposer
    tracker: CandidateTracker | None
    phase: str
    seed: int
    call_index: int
    train_pairs: list[Pair]
    test_pairs: list[Pair]
    tree: list[CandidateNode]
    selected: str | None
    iteration: int
    proposer_calls: int
    failures: list[str]
    best: CandidateNode | None
    error: str | None


def _evaluate(state: LearnState, program: Program) -> Evaluation:
    cfg = state["cfg"]
    return eval_model(program, state["train_pairs"], state["test_pairs"], cfg.k_cov, cfg.max_sites,
                      derive_seed(state["seed"], 7, len(state["tree"])))


def _propose(state: LearnState, req: ProposalRequest) -> Program | None:
    """Up to PROPOSAL_ATTEMPTS proposer calls; None when every attempt failed."""
    for attempt in range(1, PROPOSAL_ATTEMPTS + 1):
        state["proposer_calls"] += 1
        try:
            return state["proposer"].propose(req)
        except (ProposalError, NoCodeBlock, ProgramError) as e:
            message = e.to_feedback() if isinstance(e, ProgramError) else str(e)
            state["failures"].append(message)
            logger.warning("⚠️ %s proposal attempt %d/%d failed: %s", state["component"], attempt,
                           PROPOSAL_ATTEMPTS, message)
    return None


def _insert(state: LearnState, program: Program, evaluation: Evaluation, parent: str | None,
            from_proposer: bool) -> CandidateNode:
    cfg = state["cfg"]
    node = CandidateNode(
        node_id=f"{state['call_index']:03d}-{len(state['tree']):03d}",
        program=program,
        alpha=1.0 + cfg.smoothing * evaluation.pooled,
        beta=1.0 + cfg.smoothing * (1.0 - evaluation.pooled),
        coverage=evaluation.pooled,
        coverage_train=evaluation.train,
        coverage_test=evaluation.test,
        errors=evaluation.errors,
        messages=evaluation.messages,
        parent=parent,
        order=len(state["tree"]),
        from_proposer=from_proposer,
    )
    state["tree"].append(node)
    tracker = state["tracker"]
    if tracker:
        tracker.save_candidate(state["component"], node.node_id, program)
        tracker.log_event({
            "event": "node",
            "phase": state["phase"],
            "component": state["component"],
            "node_id": node.node_id,
            "parent": parent,
            "iteration": state["iteration"],
            "coverage_train": node.coverage_train,
            "coverage_test": node.coverage_test,
            "coverage_pooled": node.coverage,
            "alpha": node.alpha,
            "beta": node.beta,
            "from_proposer": from_proposer,
            "proposer_calls": state["proposer_calls"],
        })
    logger.info("📊 %s node %s coverage %.3f (train %.3f, test %.3f)", state["component"], node.node_id,
                node.coverage, node.coverage_train, node.coverage_test)
    return node


def split_node(state: LearnState) -> LearnState:
    """Split the dataset by episode and extract the component's pairs"""
    d, component = state["dataset"], state["component"]
    try:
        if len(d.episode_ids) >= 2:
            train, test = split_dataset(d, state["cfg"].test_fraction, state["seed"])
        else:
            train, test = d, Dataset(d.schema)
        state["train_pairs"] = extract_pairs(train, component)
        state["test_pairs"] = extract_pairs(test, component)
        if not state["train_pairs"] and not state["test_pairs"]:
            state["error"] = f"dataset has no {component} pairs"
    except PomdpCoderError as e:
        state["error"] = str(e)
    return state


def root_node(state: LearnState) -> LearnState:
    """Seed the tree with the previous program or an initial proposal"""
    prev = state["prev"]
    if prev is not None and not state["tree"]:
        _insert(state, prev, _evaluate(state, prev), None, from_proposer=False)
        return state
    schema, component = state["dataset"].schema, state["component"]
    req = ProposalRequest(
        kind="initial",
        component=component,
        schema=schema,
        template_source=function_template(component, schema),
        examples=render_examples(state["train_pairs"], component, schema, state["cfg"].nd,
                                 derive_seed(state["seed"], 1, state["iteration"])),
    )
    program = _propose(state, req)
    if program is None:
        state["iteration"] += 1
        return state
    _insert(state, program, _evaluate(state, program), None, from_proposer=True)
    return state


def select_node(state: LearnState) -> LearnState:
    """Thompson-sample a refinable node"""
    candidates = [n for n in state["tree"] if n.refinable]
    state["selected"] = thompson_select(candidates, derive_seed(state["seed"], 2, state["iteration"]))
    return state


def refine_node(state: LearnState) -> LearnState:
    """Ask for a repaired program, score it, and update the parent's Beta"""
    cfg = state["cfg"]
    schema, component = state["dataset"].schema, state["component"]
    parent = next(n for n in state["tree"] if n.node_id == state["selected"])
    req = ProposalRequest(
        kind="refinement",
        component=component,
        schema=schema,
        template_source=function_template(component, schema),
        prev_program=parent.program,
        error_block=build_error_block(parent, component, schema, cfg, derive_seed(state["seed"], 3, state["iteration"])),
    )
    program = _propose(state, req)
    state["iteration"] += 1
    if program is None:
        return state
    evaluation = _evaluate(state, program)
    parent.alpha += cfg.smoothing * evaluation.pooled
    parent.beta += cfg.smoothing * (1.0 - evaluation.pooled)
    _insert(state, program, evaluation, parent.node_id, from_proposer=True)
    return state


def finalize_node(state: LearnState) -> LearnState:
    """Pick the best pooled coverage, earliest node on ties"""
    if state["tree"]:
        state["best"] = max(state["tree"], key=lambda n: (n.coverage, -n.order))
        state["error"] = None
    elif state["error"] is None:
        state["error"] = "every proposal failed: " + "; ".join(state["failures"][-3:])
    return state


def after_split(state: LearnState) -> str:
    return "end" if state["error"] else "root"


def should_refine(state: LearnState) -> str:
    if state["iteration"] >= state["cfg"].max_refinements:
        return "finalize"
    if not state["tree"]:
        return "root"
    if max(n.coverage for n in state["tree"]) >= 1.0:
        return "finalize"
    if not any(n.refinable for n in state["tree"]):
        return "finalize"
    return "select"


def create_learn_workflow():
    workflow = StateGraph(LearnState)

    workflow.add_node("split", split_node)
    workflow.add_node("root", root_node)
    workflow.add_node("select", select_node)
    workflow.add_node("refine", refine_node)
    workflow.add_node("finalize", finalize_node)

    workflow.set_entry_point("split")
    workflow.add_conditional_edges("split", after_split, {"root": "root", "end": END})
    workflow.add_conditional_edges("root", should_refine, {"root": "root", "select": "select", "finalize": "finalize"})
    workflow.add_edge("select", "refine")
    workflow.add_conditional_edges("refine", should_refine, {"root": "root", "select": "select", "finalize": "finalize"})
    workflow.add_edge("finalize", END)

    return workflow.compile()


@dataclass
class LearnResult:
    program: Program
    node_id: str
    coverage: float
    stats: ComponentStats


def learn_component(d: Dataset, prev: Program | None, component: str, cfg: LearnConfig, proposer: Proposer,
                    seed: int, tracker: CandidateTracker | None = None, phase: str = "offline") -> LearnResult:
    """Run the propose/refine tree for one component."""
    call_index = tracker.start_learn_call(component) if tracker else 1
    if tracker:
        tracker.log_event({"event": "learn_start", "phase": phase, "component": component, "call": call_index})
    logger.info("🔍 Learning %s model (%s, call %d)", component, phase, call_index)

    initial_state: LearnState = {
        "component": component,
        "dataset": d,
        "prev": prev,
        "cfg": cfg,
        "proposer": proposer,
        "tracker": tracker,
        "phase": phase,
        "seed": derive_seed(seed, COMPONENTS.index(component)),
        "call_index": call_index,
        "train_pairs": [],
        "test_pairs": [],
        "tree": [],
        "selected": None,
        "iteration": 0,
        "proposer_calls": 0,
        "failures": [],
        "best": None,
        "error": None,
    }
    app = create_learn_workflow()
    final = app.invoke(initial_state, config={"recursion_limit": 4 * cfg.max_refinements + 20})

    best = final["best"]
    if best is None:
        if prev is not None:
            logger.warning("⚠️ Keeping previous %s model: %s", component, final["error"])
            return LearnResult(prev, "prev", 0.0, ComponentStats(0, final["proposer_calls"], 0.0, 0.0))
        raise LearnFailure(final["error"] or "no candidate", component=component)

    stats = ComponentStats(
        nodes_created=sum(1 for n in final["tree"] if n.from_proposer),
        proposer_calls=final["proposer_calls"],
        coverage_train=best.coverage_train,
        coverage_test=best.coverage_test,
    )
    logger.info("✅ %s model %s selected with coverage %.3f after %d proposer call(s)", component,
                best.node_id, best.coverage, stats.proposer_calls)
    return LearnResult(best.program, best.node_id, best.coverage, stats)


def learn_model(d: Dataset, prev: Program | None, component: str, cfg: LearnConfig, proposer: Proposer,
                seed: int, tracker: CandidateTracker | None = None, phase: str = "offline") -> Program:
    return learn_component(d, prev, component, cfg, proposer, seed, tracker, phase).program


def learn_models(d: Dataset, prev: ModelSet | None, cfg: LearnConfig, proposer: Proposer, seed: int,
                 tracker: CandidateTracker | None = None, phase: str = "offline",
                 components: Iterable[str] = COMPONENTS) -> ModelSet:
    """Learn every component independently; components reaching full coverage stay unchanged."""
    programs: dict[str, Program] = {}
    provenance: dict[str, Provenance] = {}
    stats: dict[str, ComponentStats] = {}
    for component in COMPONENTS:
        previous = prev.program(component) if prev else None
        if component not in components and previous is not None:
            programs[component] = previous
            provenance[component] = prev.provenance.get(component, Provenance("prev", 1.0))
            stats[component] = ComponentStats()
            continue
        try:
            result = learn_component(d, previous, component, cfg, proposer, seed, tracker, phase)
        except LearnFailure:
            raise
        except PomdpCoderError as e:
            raise LearnFailure(str(e), component=component) from e
        programs[component] = result.program
        provenance[component] = Provenance(result.node_id, result.coverage)
        stats[component] = result.stats
    return ModelSet(d.schema, programs, provenance, stats, cfg.max_sites)

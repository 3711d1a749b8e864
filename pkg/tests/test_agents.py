import json
from pathlib import Path

import httpx
import numpy as np
import pytest
from conftest import closed_form_executor, grow, ok

from evoforest.agents import (
    MAX_DEBUG_RETRIES,
    AgentError,
    BackendError,
    ContextSizes,
    DesignerError,
    HttpBackend,
    Mode,
    ModeSignals,
    ModeThresholds,
    Proposal,
    ProposalFormatError,
    ScriptedBackend,
    Summary,
    SummaryStore,
    Target,
    build_context,
    count_tokens,
    design,
    edit_distance_ratio,
    extract_code,
    modify,
    next_step,
    parse_proposal,
    pattern_stats,
    render_prompt,
    request_key,
    retrieve_summaries,
    select_mode,
    summarize,
)
from evoforest.elite_pool import ElitePool, EliteModificationStats
from evoforest.executor import EvalMode, EvalRequest, EvalResult
from evoforest.features import combine, term_vector
from evoforest.forest import Forest, Trajectory, TrajectoryStep
from evoforest.testbed import QUADRATIC

GOLDEN = Path(__file__).parent / "golden"
TARGET = Target(objective="score", direction="maximize", constraints=("PARAMS has 1 entry",), description="demo")

WELL_FORMED = (
    "[HIGH-LEVEL] Shift x0 up.\n"
    "[DETAILED] Set PARAMS to [1.0].\n"
    "[ANALYSIS]\nexpected gain: +2\nrisks: overshoot\nfallback: halve the step\n"
)


def _fixture_forest():
    """Two trees, a short lineage with siblings, and a small elite pool."""
    f = Forest()
    tid = f.create_tree(QUADRATIC.encode([0.0]), ok(1.0))
    t = f.tree(tid)
    f.epoch = 1
    a = grow(f, tid, t.root_id, 4.0, "Shift x0 up. Step size 1.", QUADRATIC.encode([1.0]))
    grow(f, tid, t.root_id, 0.5, "Shift x0 down. Step size 1.")
    grow(f, tid, t.root_id, None, "Break the harness.")
    f.epoch = 2
    b = grow(f, tid, a, 7.0, "Shift x0 up. Step size 0.5.", QUADRATIC.encode([1.5]))
    other = f.create_tree(QUADRATIC.encode([5.0]), ok(6.0))
    c = grow(f, other, f.tree(other).root_id, 9.0, "Shift x0 down. Step size 1.", QUADRATIC.encode([4.0]))
    pool = ElitePool(k=8)
    for tree_id, nid in ((tid, a), (tid, b), (other, c)):
        node = f.tree(tree_id).node(nid)
        pool.maybe_admit_trajectory(f.tree(tree_id).trajectory(nid), code=node.code)
    for key, d in (("shift x0 up.", 3.0), ("shift x0 up.", 3.0), ("shift x0 down.", 3.0), ("rewrite", -1.0)):
        pool.record_modification(key, d)
    return f, t, b, pool


def _context(mode=Mode.WARMUP, sizes=ContextSizes(), budget=None, seed=0):
    f, t, b, pool = _fixture_forest()
    return build_context(
        t.node(b), t, f, pool, None, mode, TARGET, np.random.default_rng(seed),
        epoch=3, total_epochs=50, sizes=sizes, token_budget=budget,
    )


# backends


def test_scripted_backend_order_keys_and_errors():
    keyed = {request_key("sys", "special"): "by key"}
    b = ScriptedBackend(["first", BackendError("down"), "third"], keyed=keyed, record=True)
    assert b.complete("sys", "a") == "first"
    with pytest.raises(BackendError, match="down"):
        b.complete("sys", "b")
    assert b.complete("sys", "special") == "by key"
    assert b.complete("sys", "c") == "third"
    with pytest.raises(BackendError, match="script exhausted"):
        b.complete("sys", "d")
    assert b.state_dict() == {"cursor": 3, "calls": 5}
    assert [e.get("response", e.get("error")) for e in b.transcript] == ["first", "down", "by key", "third"]


def test_scripted_backend_replay_file_round_trip(tmp_path):
    b = ScriptedBackend(["one", BackendError("boom")], record=True)
    b.complete("s", "u")
    with pytest.raises(BackendError):
        b.complete("s", "v")
    path = tmp_path / "replay.jsonl"
    b.dump_transcript(path)
    again = ScriptedBackend.from_jsonl(path)
    assert again.complete("s", "u") == "one"
    with pytest.raises(BackendError, match="boom"):
        again.complete("s", "v")
    path.write_text('{"response": "x"}\nnot json\n')
    with pytest.raises(ValueError, match="replay.jsonl:2"):
        ScriptedBackend.from_jsonl(path)


def _http(handler, **kw):
    sleeps = []
    backend = HttpBackend(
        "https://llm.example/v1/", "m-1", transport=httpx.MockTransport(handler), sleep=sleeps.append, **kw
    )
    return backend, sleeps


def test_http_backend_request_shape_and_credential(monkeypatch):
    monkeypatch.setenv("EVO_KEY", "sekrit")
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "hello"}}]})

    backend, _ = _http(handler, api_key_env="EVO_KEY", timeout=7.5)
    assert backend.complete("sys", "usr", temperature=0.3) == "hello"
    assert seen["url"] == "https://llm.example/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"] == {
        "model": "m-1",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "usr"}],
        "temperature": 0.3,
    }
    assert backend._client.timeout.read == 7.5


def test_http_backend_retries_with_backoff_then_succeeds():
    replies = iter([httpx.Response(503), httpx.Response(429)])

    def handler(request):
        return next(replies, httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]}))

    backend, sleeps = _http(handler, retries=3, backoff=0.5)
    assert backend.complete("s", "u") == "ok"
    assert sleeps == [0.5, 1.0]


def test_http_backend_gives_up_after_bounded_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    backend, sleeps = _http(handler, retries=2, backoff=1.0)
    with pytest.raises(BackendError, match="after 3 attempts: ConnectError"):
        backend.complete("s", "u")
    assert len(calls) == 3 and sleeps == [1.0, 2.0]


@pytest.mark.parametrize(
    "response, message",
    [(httpx.Response(401, text="nope"), "HTTP 401: nope"), (httpx.Response(200, json={"x": 1}), "unexpected response"),
     (httpx.Response(200, json={"choices": [{"message": {"content": 5}}]}), "not text")],
)
def test_http_backend_non_retryable_errors(response, message):
    backend, sleeps = _http(lambda request: response)
    with pytest.raises(BackendError, match=message):
        backend.complete("s", "u")
    assert sleeps == []


# context


def test_empty_pool_warmup_context():
    f = Forest()
    tid = f.create_tree("x = 1", ok(1.0))
    t = f.tree(tid)
    ctx = build_context(t.root, t, f, ElitePool(), None, Mode.WARMUP, TARGET, np.random.default_rng(0))
    assert ctx.elite_trajectories == () and ctx.elite_modifications == () and ctx.summaries == ()
    assert len(ctx.trajectory) == 1


def test_context_requires_success_node():
    f, t, _, pool = _fixture_forest()
    failed = next(n for n in t if n.status.value == "failed")
    with pytest.raises(ValueError):
        build_context(failed, t, f, pool, None, Mode.WARMUP, TARGET, np.random.default_rng(0))


def test_mode_weighting_of_elite_sections():
    f, t, b, pool = _fixture_forest()
    for i in range(6):
        pool.record_modification(f"extra {i}", 1.0)
    sizes = ContextSizes(trajectories=4, modifications=4)
    common = dict(sizes=sizes)
    warm = build_context(t.node(b), t, f, pool, None, Mode.WARMUP, TARGET, np.random.default_rng(0), **common)
    exploit = build_context(t.node(b), t, f, pool, None, Mode.EXPLOIT, TARGET, np.random.default_rng(0), **common)
    explore = build_context(t.node(b), t, f, pool, None, Mode.EXPLORE, TARGET, np.random.default_rng(0), **common)
    assert len(warm.elite_modifications) == 1 and len(warm.elite_trajectories) == 1
    assert len(exploit.elite_modifications) == 8 and len(exploit.elite_trajectories) == 2
    assert len(explore.elite_trajectories) == 3


def test_sibling_digest_includes_failures():
    ctx = _context()
    text = render_prompt(ctx)
    assert ctx.trajectory.steps[-1].node_id == ctx.node.id
    assert "# Sibling comparisons" not in text  # the focal node has no siblings
    f, t, _, pool = _fixture_forest()
    a = t.children[t.root_id][0]
    ctx = build_context(t.node(a), t, f, pool, None, Mode.WARMUP, TARGET, np.random.default_rng(0))
    text = render_prompt(ctx)
    assert "- Shift x0 down. Step size 1. (dr=-0.500000)" in text
    assert "- Break the harness. (failed: boom)" in text


def test_rendered_prompt_matches_golden_and_is_stable():
    text = render_prompt(_context(Mode.EXPLOIT))
    assert text == render_prompt(_context(Mode.EXPLOIT))
    golden = GOLDEN / "prompt_exploit.txt"
    assert text == golden.read_text(encoding="utf-8")
    assert "runtime_ms" not in text


@pytest.mark.parametrize("budget", [60, 90, 120, 160, 250, 400])
def test_prompt_respects_token_budget(budget):
    f, t, b, pool = _fixture_forest()
    # a long lineage so middle-step elision is needed at small budgets
    nid = b
    for i in range(8):
        nid = grow(f, t.id, nid, 7.0 + i + 1, f"Refine step {i} with extra words here.", QUADRATIC.encode([1.5]))
    store = SummaryStore()
    store.merge(Summary("Up moves pay off early.", 2, 3.0, 0.0, term_vector("shift x0 up")))
    full = build_context(t.node(nid), t, f, pool, store, Mode.EXPLOIT, TARGET, np.random.default_rng(0))
    ctx = build_context(
        t.node(nid), t, f, pool, store, Mode.EXPLOIT, TARGET, np.random.default_rng(0), token_budget=budget
    )
    text = render_prompt(ctx)
    floor = count_tokens(render_prompt(ctx.__class__(**{**ctx.__dict__, "summaries": (), "elite_trajectories": (),
                                                          "elite_modifications": (), "sibling_digest": ()})))
    assert count_tokens(text) <= max(budget, floor)
    if budget >= count_tokens(render_prompt(full)):
        assert ctx == full
    # target and current state always survive
    assert "# Target" in text and ctx.node.code.strip() in text


def test_budget_drops_summaries_before_elites():
    f, t, b, pool = _fixture_forest()
    store = SummaryStore()
    store.merge(Summary("A long summary " + "word " * 30, 2, 3.0, 0.0, term_vector("shift")))
    full = build_context(t.node(b), t, f, pool, store, Mode.EXPLOIT, TARGET, np.random.default_rng(0))
    budget = count_tokens(render_prompt(full)) - 5
    ctx = build_context(t.node(b), t, f, pool, store, Mode.EXPLOIT, TARGET, np.random.default_rng(0), token_budget=budget)
    assert ctx.summaries == () and ctx.elite_trajectories == full.elite_trajectories


def test_select_mode_rules():
    th = ModeThresholds(warmup_epochs=10, plateau=8, diversity=0.2, streak=3, value=0.1)
    assert select_mode(ModeSignals(epoch=0, plateau=99), th) == Mode.WARMUP
    assert select_mode(ModeSignals(epoch=10, plateau=8, mean_diversity=0.9), th) == Mode.EXPLORE
    assert select_mode(ModeSignals(epoch=10, mean_diversity=0.1), th) == Mode.EXPLORE
    streak = ModeSignals(epoch=12, recent_deltas=(-1, 0.1, 0.2, 0.3), top_value=0.5)
    assert select_mode(streak, th) == Mode.EXPLOIT
    # plateau outranks the streak
    assert select_mode(ModeSignals(epoch=12, plateau=9, recent_deltas=(1, 1, 1), top_value=1), th) == Mode.EXPLORE
    # low value or broken streak keeps the previous mode
    assert select_mode(ModeSignals(epoch=12, recent_deltas=(1, 1, 1), top_value=0.05, previous=Mode.EXPLORE), th) == Mode.EXPLORE
    assert select_mode(ModeSignals(epoch=12, recent_deltas=(1, -1, 1), top_value=1, previous=Mode.WARMUP), th) == Mode.WARMUP


# next step


def test_parse_proposal_sections_and_analysis():
    p = parse_proposal(WELL_FORMED)
    assert p.high_level == "Shift x0 up."
    assert p.detailed_spec == "Set PARAMS to [1.0]."
    assert (p.analysis.expected_gain, p.analysis.risks, p.analysis.fallback) == ("+2", "overshoot", "halve the step")
    loose = parse_proposal("[HIGH-LEVEL] a\n[DETAILED] b\n[ANALYSIS] probably helps\n")
    assert loose.analysis.expected_gain == "probably helps"


@pytest.mark.parametrize(
    "reply, message",
    [("[HIGH-LEVEL] a\n[ANALYSIS] c", "[DETAILED]"), ("nothing", "[HIGH-LEVEL], [DETAILED], [ANALYSIS]"),
     ("[HIGH-LEVEL] a\n[DETAILED]\n[ANALYSIS] c", "[DETAILED]"),
     ("[HIGH-LEVEL] a\n[HIGH-LEVEL] b\n[DETAILED] c\n[ANALYSIS] d", "appears twice")],
)
def test_parse_proposal_errors(reply, message):
    with pytest.raises(ValueError) as info:
        parse_proposal(reply)
    assert message in str(info.value)


def test_next_step_well_formed():
    backend = ScriptedBackend([WELL_FORMED])
    p = next_step(_context(), backend)
    assert p.attempts == 1 and p.high_level == "Shift x0 up."


def test_next_step_reasks_with_format_reminder():
    backend = ScriptedBackend(["[HIGH-LEVEL] a\n[ANALYSIS] c", WELL_FORMED], record=True)
    prompts = []
    original = backend.complete

    def spy(system, user, **kw):
        prompts.append(user)
        return original(system, user, **kw)

    backend.complete = spy
    p = next_step(_context(), backend)
    assert p.attempts == 2
    assert "# Format reminder" not in prompts[0]
    assert "# Format reminder" in prompts[1] and "[DETAILED]" in prompts[1]


def test_next_step_gives_up_after_reasks():
    backend = ScriptedBackend(["bad"] * 3)
    with pytest.raises(ProposalFormatError) as info:
        next_step(_context(), backend, reasks=2)
    assert info.value.attempts == 3 and info.value.last_reply == "bad"
    assert backend.calls == 3


def test_next_step_backend_outage_is_agent_error():
    with pytest.raises(AgentError):
        next_step(_context(), ScriptedBackend([BackendError("offline")]))


def test_agents_do_not_mutate_the_forest():
    f, t, b, pool = _fixture_forest()
    before = (f.to_dict(), pool.to_dict())
    ctx = build_context(t.node(b), t, f, pool, None, Mode.EXPLORE, TARGET, np.random.default_rng(1))
    proposal = next_step(ctx, ScriptedBackend([WELL_FORMED]))
    modify(proposal, t.node(b), ScriptedBackend([f"```\n{QUADRATIC.encode([3.0])}```"]), closed_form_executor,
           task_ref=QUADRATIC.id)
    assert (f.to_dict(), pool.to_dict()) == before


# modify


def _parent():
    f = Forest()
    tid = f.create_tree(QUADRATIC.encode([0.0]), ok(QUADRATIC.score([0.0])))
    return f.tree(tid).root


PROPOSAL = Proposal("Shift x0 up.", "Set PARAMS to [2.0].")


def test_extract_code_and_edit_ratio():
    assert extract_code("text\n```python\nx = 1\n```\nmore") == "x = 1\n"
    assert extract_code("x = 2") == "x = 2\n"
    assert edit_distance_ratio("abc", "abc") == 0.0
    assert edit_distance_ratio("abc", "xyz") == 1.0


def test_modify_improving_edit():
    out = modify(PROPOSAL, _parent(), ScriptedBackend([f"```\n{QUADRATIC.encode([2.0])}```"]), closed_form_executor,
                 task_ref=QUADRATIC.id)
    assert out.result.ok and out.reward == 9.0 and out.delta_reward == 9.0 - 1.0
    assert out.debug_attempts == 0 and out.failures == () and 0 < out.diff_ratio < 1


def _flaky_executor(failures: int):
    """Times out ``failures`` times, then behaves like the closed-form sandbox."""
    seen = {"full": 0}

    def run(request: EvalRequest) -> EvalResult:
        if request.mode == EvalMode.DRY_RUN:
            return closed_form_executor(request)
        seen["full"] += 1
        if seen["full"] <= failures:
            return EvalResult.failure("timeout after 5s", logs="still running")
        return closed_form_executor(request)

    return run, seen


def test_modify_succeeds_on_third_repair():
    run, seen = _flaky_executor(3)
    backend = ScriptedBackend([f"```\n{QUADRATIC.encode([2.0])}```"] * 4, record=True)
    prompts = []
    original = backend.complete
    backend.complete = lambda s, u, **kw: (prompts.append(u), original(s, u, **kw))[1]
    out = modify(PROPOSAL, _parent(), backend, run, task_ref=QUADRATIC.id)
    assert out.result.ok and out.debug_attempts == 3 == MAX_DEBUG_RETRIES
    assert out.failures == ("timeout after 5s",) * 3
    assert prompts[1].startswith("# Repair attempt 1 of 3") and "timeout after 5s" in prompts[1]
    assert "still running" in prompts[1] and "Shift x0 up." in prompts[1]
    assert prompts[3].startswith("# Repair attempt 3 of 3")


def test_modify_caps_attempts_and_returns_failure():
    run, seen = _flaky_executor(10)
    backend = ScriptedBackend([f"```\n{QUADRATIC.encode([2.0])}```"] * 10)
    parent = _parent()
    before = parent.to_dict()
    out = modify(PROPOSAL, parent, backend, run, task_ref=QUADRATIC.id)
    assert not out.result.ok and out.result.reason == "timeout after 5s"
    assert backend.calls == 4 and seen["full"] == 4 and out.debug_attempts == 3
    assert out.reward == -1e18
    assert parent.to_dict() == before


def test_modify_dry_run_rejects_before_full_evaluation():
    calls = []

    def run(request):
        calls.append(request.mode)
        return closed_form_executor(request)

    bad = "```\nPARAMS = [1.0, 2.0]\n```"
    good = f"```\n{QUADRATIC.encode([1.0])}```"
    out = modify(PROPOSAL, _parent(), ScriptedBackend([bad, good]), run, task_ref=QUADRATIC.id)
    assert out.result.ok and out.debug_attempts == 1
    assert out.failures[0].startswith("constraint violated:")
    assert calls == [EvalMode.DRY_RUN, EvalMode.DRY_RUN, EvalMode.FULL]


def test_modify_backend_failure_counts_as_attempt():
    backend = ScriptedBackend([BackendError("flaky"), f"```\n{QUADRATIC.encode([1.0])}```"])
    out = modify(PROPOSAL, _parent(), backend, closed_form_executor, task_ref=QUADRATIC.id)
    assert out.result.ok and out.failures == ("backend error: flaky",)


# designer


def test_design_extracts_code_and_requires_elite():
    f, t, b, pool = _fixture_forest()
    ctx = _context(Mode.EXPLORE)
    code = design(pool.best(), ctx, ScriptedBackend(["[REDESIGN] jump.\n```python\nPARAMS = [3.0]\n```"]))
    assert code == "PARAMS = [3.0]\n"
    with pytest.raises(DesignerError):
        design(None, ctx, ScriptedBackend([]))
    with pytest.raises(ProposalFormatError):
        design(pool.best(), ctx, ScriptedBackend(["no code"] * 3))
    with pytest.raises(AgentError):
        design(pool.best(), ctx, ScriptedBackend([BackendError("x")]))


def test_design_prompt_carries_elite_program_and_other_lineages():
    f, t, b, pool = _fixture_forest()
    ctx = _context(Mode.EXPLORE)
    backend = ScriptedBackend(["```\nx\n```"], record=True)
    seen = []
    original = backend.complete
    backend.complete = lambda s, u, **kw: (seen.append(u), original(s, u, **kw))[1]
    design(pool.best(), ctx, backend)
    assert pool.best().final_code.strip() in seen[0]
    assert "# Related elite lineages" in seen[0]


# summarizer


def _traj(tree, node, deltas, summary="Shift x0 up."):
    steps = [TrajectoryStep("n0", "seed", 0.0)] + [TrajectoryStep(f"{node}{i}", summary, d) for i, d in enumerate(deltas)]
    return Trajectory(tree, tuple(steps), 1.0 + sum(deltas))


def test_pattern_stats():
    assert pattern_stats([_traj("t0", "a", [0.2, 0.2])]) == (2, pytest.approx(0.2), pytest.approx(0.0))
    freq, mean, var = pattern_stats([_traj("t0", "a", [1.0]), _traj("t1", "b", [3.0])])
    assert (freq, mean, var) == (2, 2.0, 1.0)
    assert pattern_stats([_traj("t0", "a", [])]) == (0, 0.0, 0.0)


def test_summarize_merges_into_store():
    store = SummaryStore()
    out = summarize([_traj("t0", "a", [0.2, 0.2])], ScriptedBackend(["Up moves work."]), store)
    assert len(out) == 1 and store.items == out
    s = out[0]
    assert s.text == "Up moves work." and s.mean_gain == pytest.approx(0.2) and s.frequency == 2
    assert s.feature_vector == combine(["seed", "Shift x0 up.", "Shift x0 up."])
    assert s.sources == ("t0/a1",)
    with pytest.raises(ValueError):
        summarize([], ScriptedBackend([]))


def test_summarize_backend_failure_leaves_store_untouched():
    store = SummaryStore()
    assert summarize([_traj("t0", "a", [1.0])], ScriptedBackend([BackendError("x")]), store) == []
    assert len(store) == 0


def _summary(text, gain, vec=None):
    return Summary(text, 1, gain, 0.0, vec if vec is not None else term_vector(text))


def test_near_duplicates_keep_higher_gain():
    store = SummaryStore()
    assert store.merge(_summary("tile the loop", 0.1))
    assert store.merge(_summary("tile the loop", 0.3))
    assert len(store) == 1 and store.items[0].mean_gain == 0.3
    assert not store.merge(_summary("Tile the loop!", 0.2))


def test_store_cap_evicts_lowest_gain():
    store = SummaryStore(cap=2)
    store.merge(_summary("alpha", 0.5))
    store.merge(_summary("beta", 0.1))
    assert store.merge(_summary("gamma", 0.9))
    assert sorted(s.text for s in store.items) == ["alpha", "gamma"]
    assert not store.merge(_summary("delta", 0.0))


def test_retrieval_order_and_sort_oracle():
    store = SummaryStore(cap=100)
    assert retrieve_summaries(store, term_vector("x"), 3) == []
    rng = np.random.default_rng(3)
    words = ["tile", "fuse", "cache", "loop", "unroll", "split", "vector", "prefetch"]
    for i in range(20):
        text = " ".join(rng.choice(words, size=3)) + f" v{i}"
        store.merge(_summary(text, float(rng.integers(0, 3))))
    query = term_vector("tile cache loop")
    from evoforest.features import cosine

    expected = sorted(store.items, key=lambda s: (-cosine(query, s.feature_vector), -s.mean_gain, s.seq))
    assert retrieve_summaries(store, query, 20) == expected
    target = store.items[7]
    assert retrieve_summaries(store, target.feature_vector, 1) == [target]


def test_store_dict_round_trip():
    store = SummaryStore(cap=3)
    store.merge(_summary("alpha", 0.5))
    back = SummaryStore.from_dict(json.loads(json.dumps(store.to_dict())))
    assert back.to_dict() == store.to_dict()


def test_elite_modification_stats_render_in_prompt():
    ctx = _context(Mode.EXPLOIT)
    text = render_prompt(ctx)
    top = ctx.elite_modifications[0]
    assert isinstance(top, EliteModificationStats)
    assert f"- {top.key} (mean=" in text

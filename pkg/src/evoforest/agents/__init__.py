from evoforest.agents.backends import BackendError, CompletionBackend, HttpBackend, ScriptedBackend, request_key
from evoforest.agents.context import (
    Context,
    ContextSizes,
    Mode,
    ModeSignals,
    ModeThresholds,
    SiblingEntry,
    Target,
    build_context,
    count_tokens,
    fit_to_budget,
    render_prompt,
    select_mode,
)
from evoforest.agents.roles import (
    MAX_DEBUG_RETRIES,
    AgentError,
    Analysis,
    DesignerError,
    ModifyOutcome,
    Proposal,
    ProposalFormatError,
    design,
    edit_distance_ratio,
    extract_code,
    modify,
    next_step,
    parse_proposal,
)
from evoforest.agents.summarizer import Summary, SummaryStore, pattern_stats, retrieve_summaries, summarize

__all__ = [
    "AgentError",
    "Analysis",
    "BackendError",
    "CompletionBackend",
    "Context",
    "ContextSizes",
    "DesignerError",
    "HttpBackend",
    "MAX_DEBUG_RETRIES",
    "Mode",
    "ModeSignals",
    "ModeThresholds",
    "ModifyOutcome",
    "Proposal",
    "ProposalFormatError",
    "ScriptedBackend",
    "SiblingEntry",
    "Summary",
    "SummaryStore",
    "Target",
    "build_context",
    "count_tokens",
    "design",
    "edit_distance_ratio",
    "extract_code",
    "fit_to_budget",
    "modify",
    "next_step",
    "parse_proposal",
    "pattern_stats",
    "render_prompt",
    "request_key",
    "retrieve_summaries",
    "select_mode",
    "summarize",
]

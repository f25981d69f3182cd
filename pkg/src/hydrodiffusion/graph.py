"""LangGraph graph assembly for the desk-scale experiment.

    generate_data -> train_models -> forecast_models -> climatology_reference
        -> evaluate_models -> summarize -> END

Every stage routes to END as soon as it marks the state as failed.
"""

from __future__ import annotations

import logging

from langgraph.graph import END, StateGraph

from hydrodiffusion.models import ExperimentState
from hydrodiffusion.nodes import (
    climatology_reference,
    evaluate_models,
    forecast_models,
    generate_data,
    route_on_failure,
    summarize,
    train_models,
)

logger = logging.getLogger(__name__)

_STAGES = [
    ("generate_data", generate_data),
    ("train_models", train_models),
    ("forecast_models", forecast_models),
    ("climatology_reference", climatology_reference),
    ("evaluate_models", evaluate_models),
    ("summarize", summarize),
]


def build_experiment_graph() -> StateGraph:
    """Build the experiment pipeline.

    Returns:
        Compiled LangGraph taking an initial ExperimentState.
    """
    graph = StateGraph(ExperimentState)
    for name, node in _STAGES:
        graph.add_node(name, node)
    graph.set_entry_point(_STAGES[0][0])

    # Each stage continues to the next one, or stops on failure
    for (name, _), (following, _) in zip(_STAGES, _STAGES[1:]):
        graph.add_conditional_edges(name, route_on_failure, {"continue": following, "end": END})
    graph.add_edge(_STAGES[-1][0], END)

    compiled = graph.compile()
    logger.info("Experiment graph compiled")
    return compiled

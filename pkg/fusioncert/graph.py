from langgraph.graph import StateGraph, END
from fusioncert.states import CertifyState
from fusioncert.nodes import partition_node, reference_node, sampler_node, bound_node, aggregate_node

def should_sample(state: CertifyState):
    if any(plan.certifiable for plan in state.get("plans", [])):
        return "sampler"
    return "bound"

def build_graph(checkpointer=None):
    workflow = StateGraph(CertifyState)

    workflow.add_node("partition", partition_node)
    workflow.add_node("reference", reference_node)
    workflow.add_node("sampler", sampler_node)
    workflow.add_node("bound", bound_node)
    workflow.add_node("aggregate", aggregate_node)

    workflow.set_entry_point("partition")
    workflow.add_edge("partition", "reference")

    workflow.add_conditional_edges(
        "reference",
        should_sample,
        {"sampler": "sampler", "bound": "bound"}
    )

    workflow.add_edge("sampler", "bound")
    workflow.add_edge("bound", "aggregate")
    workflow.add_edge("aggregate", END)

    return workflow.compile(checkpointer=checkpointer)

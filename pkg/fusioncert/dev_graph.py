# Entry point for `langgraph dev` (see langgraph.json).
from fusioncert.graph import build_graph

graph = build_graph(None)

import asyncio
import math

import pytest

from conftest import ConstantDetector
from fusioncert.config import SmoothingConfig
from fusioncert.graph import build_graph, should_sample
from fusioncert.nodes import bounds_per_cell
from fusioncert.transforms import ParamSpace, split


def initial_state(scene, cfg, detector, mode="detection", cells=3):
    half = math.radians(0.5)
    return {
        "mode": mode,
        "kind": "rotation",
        "scene": scene,
        "grid": split(ParamSpace(((-half, half),)), cells),
        "cfg": cfg,
        "detector": detector,
        "gt": scene.gt,
        "workers": 1,
        "show_progress": False,
        "plans": [],
        "clean_value": 0.0,
        "draws": [],
        "bounds": [],
        "certified": 0.0,
        "upper": 1.0,
        "uncertifiable": 0,
        "messages": [],
    }


async def stream_nodes(graph, state):
    finished = []
    async for event in graph.astream(state):
        for key in event:
            finished.append(key)
    return finished


def test_node_order(small_scene, loose_cfg):
    graph = build_graph()
    finished = asyncio.run(stream_nodes(graph, initial_state(small_scene, loose_cfg, ConstantDetector(0.7))))
    assert finished == ["partition", "reference", "sampler", "bound", "aggregate"]


def test_sampler_skipped_when_nothing_is_certifiable(small_scene):
    cfg = SmoothingConfig(sigma_x=1e-4, sigma_p=1e-4, n=20)
    graph = build_graph()
    finished = asyncio.run(stream_nodes(graph, initial_state(small_scene, cfg, ConstantDetector(0.7))))
    assert "sampler" not in finished
    assert finished[-1] == "aggregate"


def test_final_state(small_scene, loose_cfg):
    final = build_graph().invoke(initial_state(small_scene, loose_cfg, ConstantDetector(0.7)))
    assert len(final["plans"]) == 3
    assert len(final["bounds"]) == 3
    assert final["uncertifiable"] == 0
    assert final["certified"] == pytest.approx(0.7)
    assert final["clean_value"] == pytest.approx(0.7)
    assert any("partitioned into 3 cells" in m for m in final["messages"])


def test_should_sample(small_scene, loose_cfg):
    assert should_sample({"plans": []}) == "bound"
    final = build_graph().invoke(initial_state(small_scene, loose_cfg, ConstantDetector(0.7)))
    assert should_sample(final) == "sampler"


def test_bounds_per_cell():
    assert bounds_per_cell("detection") == 1
    assert bounds_per_cell("iou") == 14


def test_dev_graph_compiles():
    from fusioncert.dev_graph import graph

    assert set(graph.get_graph().nodes) >= {"partition", "reference", "sampler", "bound", "aggregate"}

from pydantic import model_validator
from typing import Optional, Literal, Dict, Any

from fusioncert.config import RunConfig
from fusioncert.scene import SceneSpec

class SceneSource(RunConfig):
    """A run plus exactly one scene source: a file path, an inline document or a generator spec."""
    scene_document: Optional[Dict[str, Any]] = None
    scene_spec: Optional[SceneSpec] = None
    name: Optional[str] = None

    @model_validator(mode="after")
    def _one_scene(self):
        given = [s for s in (self.scene, self.scene_document, self.scene_spec) if s is not None]
        if len(given) != 1:
            raise ValueError("scene: give exactly one of scene, scene_document, scene_spec")
        return self

class CertifyRequest(SceneSource):
    metric: Literal["detection", "iou"] = "detection"

class AttackRequest(SceneSource):
    metric: Literal["confidence", "iou"] = "confidence"

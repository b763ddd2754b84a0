"""Exception types raised across the pipeline.

Each error carries a short machine-readable ``kind`` so callers (and the
per-frame failure reports) can branch on the cause without parsing messages.
"""


class PoseQAError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


class IngestError(PoseQAError):
    pass


class WorldFrameError(PoseQAError):
    pass


class GeometryError(PoseQAError):
    pass


class PlanError(PoseQAError):
    pass


class GraspError(PoseQAError):
    pass


class SynthError(PoseQAError):
    pass


class EvalError(PoseQAError):
    pass


class CliError(PoseQAError):
    pass

"""Pipeline configuration: one YAML tree, defaults from each module's params."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import CliError
from .grasp import GraspParams
from .planner import PlannerParams
from .qa import ALL_TASKS, QAParams
from .world_frame import WorldFrameParams

SECTIONS = {
    "world_frame": WorldFrameParams,
    "planner": PlannerParams,
    "grasp": GraspParams,
    "qa": QAParams,
}


@dataclass(frozen=True)
class PipelineConfig:
    input_roots: tuple[str, ...] = ()
    output_dir: str = "poseqa_out"
    seed: int = 0
    jobs: int = 1
    tasks: tuple[str, ...] = ALL_TASKS
    trust_dataset_extrinsics: bool = False
    write_diagnostics: bool = False
    world_frame: WorldFrameParams = field(default_factory=WorldFrameParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    grasp: GraspParams = field(default_factory=GraspParams)
    qa: QAParams = field(default_factory=QAParams)

    def __post_init__(self):
        unknown = set(self.tasks) - set(ALL_TASKS)
        if unknown:
            raise CliError("config", f"unknown task(s): {', '.join(sorted(unknown))}")
        if self.jobs < 1:
            raise CliError("config", "jobs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_roots"] = list(self.input_roots)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise CliError("config", f"unknown key(s): {', '.join(sorted(unknown))}")
        kw = {}
        for key, value in d.items():
            if key in SECTIONS:
                kw[key] = _section(SECTIONS[key], value, key)
            elif key in ("input_roots", "tasks"):
                kw[key] = tuple(str(v) for v in ([value] if isinstance(value, str) else value or ()))
            else:
                kw[key] = value
        return cls(**kw)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _section(klass, value, name):
    if isinstance(value, klass):
        return value
    value = dict(value or {})
    allowed = {f.name for f in dataclasses.fields(klass)}
    unknown = set(value) - allowed
    if unknown:
        raise CliError("config", f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    return klass(**value)


def load_config(path) -> PipelineConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise CliError("config", f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise CliError("config", f"{path}: {e}") from None
    if data is not None and not isinstance(data, dict):
        raise CliError("config", f"{path}: top level must be a mapping")
    return PipelineConfig.from_dict(data)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)

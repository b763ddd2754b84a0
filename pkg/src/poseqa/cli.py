"""Command-line entry point: synth, annotate, genqa, eval, stats.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import synth
from .annotations import AnnotationStore, FrameAnnotation, annotate_frame, failure_record
from .bop_ingest import find_scene_dirs, frame_ids, load_frame, load_model_table
from .config import PipelineConfig, load_config
from .errors import CliError, PoseQAError
from .evaluation import aggregate, load_jsonl
from .qa import ALL_TASKS, TaskType, corpus_stats, dataset_lines, generate_frame_qas, load_templates

log = logging.getLogger("poseqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_USAGE_KINDS = {"usage", "config", "unknown_fixture"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _tasks_arg(text: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in tasks if t not in ALL_TASKS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown task(s) {bad}; choose from {', '.join(ALL_TASKS)}")
    return tasks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--tasks", type=_tasks_arg, help="comma-separated task types")
    common.add_argument("--trust-dataset-extrinsics", action="store_true", default=None,
                        help="use dataset camera extrinsics instead of fitting the table (validation only)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="poseqa", description="Geometric VQA dataset pipeline for 6D pose scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="export a synthetic fixture in BOP layout")
    s.add_argument("fixture", help=f"one of {', '.join(synth.standard_fixtures())}, 'all', or 'random'")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10, help="number of random scenes (fixture 'random')")
    s.add_argument("--frames-per-scene", type=int, default=10)

    a = sub.add_parser("annotate", parents=[common], help="compute geometric annotations")
    a.add_argument("--input", action="append", help="BOP dataset root (repeatable)")
    a.add_argument("--out", help="annotation store directory")
    a.add_argument("--diagnostics", action="store_true", default=None, help="write world-frame diagnostics")

    g = sub.add_parser("genqa", parents=[common], help="generate QA pairs from an annotation store")
    g.add_argument("--store", required=True)
    g.add_argument("--out", required=True, help="output JSONL path")

    e = sub.add_parser("eval", parents=[common], help="score predictions")
    e.add_argument("--dataset", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--csv", help="optional CSV report path")
    e.add_argument("--image-normalized-nce", action="store_true")

    st = sub.add_parser("stats", parents=[common], help="per-task counts of a dataset JSONL")
    st.add_argument("dataset")
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    if getattr(args, "tasks", None):
        changes["tasks"] = args.tasks
    if getattr(args, "trust_dataset_extrinsics", None):
        changes["trust_dataset_extrinsics"] = True
    if getattr(args, "input", None):
        changes["input_roots"] = tuple(args.input)
    if getattr(args, "out", None) and args.command == "annotate":
        changes["output_dir"] = args.out
    if getattr(args, "diagnostics", None):
        changes["write_diagnostics"] = True
    return cfg.replace(**changes) if changes else cfg


# ------------------------------------------------------------------ annotate

_WORKER: dict = {}


def _init_worker(config: PipelineConfig, roots: list[str]) -> None:
    _WORKER["config"] = config
    _WORKER["tables"] = {
        r: load_model_table(Path(r) / "models" / "models_info.json", Path(r) / "models" / "descriptions.txt")
        for r in roots
    }


def _annotate_job(job) -> tuple[FrameAnnotation | None, dict | None, dict | None]:
    root, scene_dir, fid = job
    cfg = _WORKER["config"]
    scene_id = int(Path(scene_dir).name) if Path(scene_dir).name.isdigit() else 0
    try:
        frame = load_frame(scene_dir, fid, _WORKER["tables"][root])
        if frame is None:
            return None, None, None
        frame = _relative_image(frame, root)
        tasks = set(cfg.tasks)
        ann = annotate_frame(
            frame, _WORKER["tables"][root], cfg,
            plan=TaskType.TRAJECTORY.value in tasks,
            grasp=bool(tasks & {TaskType.GRASP.value, TaskType.REARRANGEMENT.value}),
        )
    except Exception as err:  # crash isolation: one bad frame never stops the run
        log.warning("scene %s frame %d skipped: %s", scene_id, fid, err)
        return None, failure_record(scene_id, fid, err), None
    diag = {"scene_id": scene_id, "frame_id": fid, **ann.world.diagnostics()} if cfg.write_diagnostics else None
    return ann, None, diag


def _relative_image(frame, root):
    # keep stores and datasets independent of where the input root lives
    if frame.image_path:
        try:
            rel = Path(frame.image_path).relative_to(root)
        except ValueError:
            return frame
        frame = dataclasses.replace(frame, image_path=rel.as_posix())
    return frame


def _jobs_for(roots) -> list[tuple[str, str, int]]:
    jobs = []
    for root in roots:
        rp = Path(root)
        if not (rp / "models" / "models_info.json").is_file():
            raise CliError("input", f"{root} is not a readable BOP root (needs models/models_info.json)")
        for scene in find_scene_dirs(rp):
            jobs += [(root, str(scene), fid) for fid in frame_ids(scene)]
    return jobs


def run_annotate(cfg: PipelineConfig) -> dict:
    if not cfg.input_roots:
        raise CliError("usage", "annotate needs at least one --input root")
    roots = list(cfg.input_roots)
    jobs = _jobs_for(roots)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(cfg, roots)) as ex:
            results = list(ex.map(_annotate_job, jobs, chunksize=1))
    else:
        _init_worker(cfg, roots)
        results = [_annotate_job(j) for j in jobs]

    anns, failures, diags = [], [], []
    for ann, fail, diag in results:
        if fail is not None:
            failures.append(fail)
        if ann is not None:
            anns.append(ann)
            failures += [{"scene_id": ann.scene_id, "frame_id": ann.frame_id, **f} for f in ann.failures]
        if diag is not None:
            diags.append(diag)
    out = Path(cfg.output_dir)
    AnnotationStore(out).write(anns, failures, _snapshot(cfg))
    if cfg.write_diagnostics:
        (out / "world_frame_diagnostics.jsonl").write_text("".join(json.dumps(d) + "\n" for d in diags))
    return {"frames": len(anns), "failures": len(failures)}


def _snapshot(cfg: PipelineConfig) -> dict:
    d = cfg.to_dict()
    d.pop("jobs")  # parallelism never changes outputs
    d.pop("output_dir")
    return d


# --------------------------------------------------------------------- genqa


def _genqa_job(args):
    ann, seed, qa_params, tasks = args
    return generate_frame_qas(ann, load_templates(), seed, qa_params, tasks)


def run_genqa(cfg: PipelineConfig, store_dir, out_path) -> dict:
    store = AnnotationStore(store_dir)
    anns = store.load()
    work = [(a, cfg.seed, cfg.qa, cfg.tasks) for a in anns]
    if cfg.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            per_frame = list(ex.map(_genqa_job, work, chunksize=4))
    else:
        per_frame = [_genqa_job(w) for w in work]
    lines = dataset_lines([q for q in per_frame if q])
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines))
    stats = corpus_stats(json.loads(line) for line in lines)
    stats["config"] = _snapshot(cfg)
    stats["store"] = {"frames": len(anns)}
    (out.parent / "stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    return stats


# ---------------------------------------------------------------------- main


def _cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    if args.fixture == "random":
        specs = [synth.random_spec(cfg.seed * 100003 + k) for k in range(args.count)]
    elif args.fixture == "all":
        specs = list(synth.standard_fixtures().values())
    else:
        try:
            specs = [synth.fixture(args.fixture)]
        except PoseQAError as e:
            raise CliError("unknown_fixture", f"unknown fixture {args.fixture!r}") from e
    synth.export_bop(specs, out, frames_per_scene=args.frames_per_scene)
    print(f"wrote {len(specs)} frame(s) to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return _cmd_synth(args, cfg)
        if args.command == "annotate":
            res = run_annotate(cfg)
            print(f"annotated {res['frames']} frame(s), {res['failures']} failure record(s) -> {cfg.output_dir}")
            return EXIT_OK
        if args.command == "genqa":
            stats = run_genqa(cfg, args.store, args.out)
            print(f"wrote {stats['total']} QA pair(s) to {args.out}")
            return EXIT_OK
        if args.command == "eval":
            report = aggregate(load_jsonl(args.dataset), load_jsonl(args.predictions),
                               image_normalized_nce=args.image_normalized_nce)
            report.write(args.out, args.csv)
            print(json.dumps(report.to_dict(), indent=1))
            return EXIT_OK
        if args.command == "stats":
            print(json.dumps(corpus_stats(load_jsonl(args.dataset)), indent=1))
            return EXIT_OK
    except PoseQAError as e:
        print(f"poseqa: {e}", file=sys.stderr)
        return EXIT_USAGE if e.kind in _USAGE_KINDS else EXIT_DATA
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic task streams for continual instruction tuning at desk scale.

Tasks differ along two axes so that both forms of forgetting are observable:
each task has its own Gaussian visual clusters (content axis) and an answer
format implied by its instruction templates (format axis). The model's answer
is split accordingly into a content class and a format tag, which keeps the
format checker exact.

Stream files are JSON Lines: a manifest header line followed by one object
per instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Matrix

FORMAT_WORD = 0  # single word / short phrase
FORMAT_SENTENCE = 1  # one full sentence
FORMAT_LETTER = 2  # option letter

FORMAT_NAMES = {FORMAT_WORD: "word", FORMAT_SENTENCE: "sentence", FORMAT_LETTER: "letter"}

# Template families per answer format. Same-format tasks share a family, as
# upstream instruction-tuned benchmarks do; tasks stay distinguishable through
# their visual clusters.
_TEMPLATES = {
    FORMAT_WORD: [
        "What is the main object present in the image? Answer using a single word or short phrase.",
        "Use one word or a concise phrase to respond to the question about the picture.",
        "Which category does the object in the image belong to? Reply with a brief phrase.",
        "Answer the visual question with just one word or a very short descriptive phrase.",
        "Name the object shown. Keep the reply to a single word or short phrase.",
    ],
    FORMAT_SENTENCE: [
        "What is depicted in the displayed picture? Summarize it using a single, concise sentence.",
        "Describe what is happening in the presented image in one complete sentence.",
        "Provide a full sentence explaining clearly what the image displays.",
        "Interpret the scene in the picture and express your answer in one informative sentence.",
        "Explain the captured scene in one simple, complete sentence.",
    ],
    FORMAT_LETTER: [
        "Answer with the option letter from the given choices directly.",
        "Select the correct answer by choosing the corresponding letter from the options provided.",
        "Pick the letter associated with the correct choice among the listed options.",
        "Identify the correct answer by its letter from the choices.",
        "Respond only with the letter of the right option.",
    ],
}

# Format assignment for a default stream, echoing a letter/word/sentence mix:
# task 0 multiple-choice, task 2 captioning, the rest short-answer.
_DEFAULT_FORMAT_CYCLE = [FORMAT_LETTER, FORMAT_WORD, FORMAT_SENTENCE, FORMAT_WORD, FORMAT_WORD, FORMAT_WORD]

_REJECTION_BUDGET = 10_000
_MIN_MEAN_DISTANCE = 0.5


@dataclass
class TaskSpec:
    """One task: its visual clusters, instruction templates, and answer format."""

    task_id: int
    class_count: int
    visual_cluster_means: np.ndarray  # (class_count, d_v), rows on the unit sphere
    cluster_stddev: float
    instruction_templates: list[str]
    format_id: int

    def __post_init__(self):
        if not self.instruction_templates:
            raise ValueError(f"task {self.task_id} has no instruction templates")
        if self.visual_cluster_means.shape[0] != self.class_count:
            raise ValueError(
                f"task {self.task_id}: {self.visual_cluster_means.shape[0]} means "
                f"for {self.class_count} classes"
            )
        if self.cluster_stddev < 0:
            raise ValueError(f"cluster_stddev must be non-negative, got {self.cluster_stddev}")


@dataclass
class TaskInstance:
    """One sample: visual features, instruction text, and the two answer heads."""

    task_id: int
    visual: np.ndarray  # (d_v,)
    instruction_text: str
    answer_class: int
    format_id: int
    instruction_embedding: Matrix | None = field(default=None, repr=False)


def task_formats(task_count: int) -> list[int]:
    """Default format assignment; guarantees >= 2 distinct families for T >= 2."""
    return [_DEFAULT_FORMAT_CYCLE[i % len(_DEFAULT_FORMAT_CYCLE)] for i in range(task_count)]


def format_check(predicted_format: int, task: "TaskSpec | int") -> int:
    """1 iff the predicted format tag matches the task's required format."""
    required = task.format_id if isinstance(task, TaskSpec) else task
    return 1 if predicted_format == required else 0


def _draw_cluster_means(
    rng: np.random.Generator, total: int, d_v: int
) -> np.ndarray:
    """Unit-sphere points with pairwise distance >= 0.5 by rejection sampling."""
    means = np.zeros((total, d_v))
    accepted = 0
    draws = 0
    while accepted < total:
        if draws >= _REJECTION_BUDGET:
            raise ConfigError(
                f"could not place {total} cluster means in R^{d_v} with pairwise "
                f"distance >= {_MIN_MEAN_DISTANCE} within {_REJECTION_BUDGET} draws"
            )
        cand = rng.normal(size=d_v)
        draws += 1
        norm = np.linalg.norm(cand)
        if norm == 0.0:
            continue
        cand /= norm
        if accepted and np.linalg.norm(means[:accepted] - cand, axis=1).min() < _MIN_MEAN_DISTANCE:
            continue
        means[accepted] = cand
        accepted += 1
    return means


def _sample_instances(
    rng: np.random.Generator, spec: TaskSpec, n: int, d_v: int
) -> list[TaskInstance]:
    classes = np.tile(np.arange(spec.class_count), (n + spec.class_count - 1) // spec.class_count)[:n]
    rng.shuffle(classes)
    out = []
    for c in classes:
        visual = spec.visual_cluster_means[c] + rng.normal(0.0, spec.cluster_stddev, size=d_v)
        template = spec.instruction_templates[int(rng.integers(len(spec.instruction_templates)))]
        out.append(
            TaskInstance(
                task_id=spec.task_id,
                visual=visual,
                instruction_text=template,
                answer_class=int(c),
                format_id=spec.format_id,
            )
        )
    return out


def generate_stream(
    seed: int,
    task_count: int = 6,
    train_per_task: int = 512,
    test_per_task: int = 256,
    d_v: int = 32,
    class_count: int = 8,
    instruction_mode: str = "single",
    cluster_stddev: float = 0.15,
) -> list[tuple[TaskSpec, list[TaskInstance], list[TaskInstance]]]:
    """Deterministic task stream: (spec, train set, test set) per task."""
    if task_count < 2:
        raise ValueError(f"need at least 2 tasks, got {task_count}")
    for name, val in (
        ("train_per_task", train_per_task),
        ("test_per_task", test_per_task),
        ("d_v", d_v),
        ("class_count", class_count),
    ):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    if instruction_mode not in ("single", "multi"):
        raise ValueError(f"instruction_mode must be 'single' or 'multi', got {instruction_mode!r}")

    rng = np.random.default_rng(seed)
    all_means = _draw_cluster_means(rng, task_count * class_count, d_v)
    formats = task_formats(task_count)
    stream = []
    for t in range(task_count):
        pool = _TEMPLATES[formats[t]]
        templates = [pool[0]] if instruction_mode == "single" else list(pool)
        spec = TaskSpec(
            task_id=t,
            class_count=class_count,
            visual_cluster_means=all_means[t * class_count : (t + 1) * class_count],
            cluster_stddev=cluster_stddev,
            instruction_templates=templates,
            format_id=formats[t],
        )
        train = _sample_instances(rng, spec, train_per_task, d_v)
        test = _sample_instances(rng, spec, test_per_task, d_v)
        stream.append((spec, train, test))
    return stream


def nearest_mean_accuracy(spec: TaskSpec, instances: Iterable[TaskInstance]) -> float:
    """Accuracy (%) of a 1-nearest-cluster-mean classifier; separability oracle."""
    hits = total = 0
    for inst in instances:
        dists = np.linalg.norm(spec.visual_cluster_means - inst.visual, axis=1)
        hits += int(np.argmin(dists)) == inst.answer_class
        total += 1
    return 100.0 * hits / total


# -- stream file format --------------------------------------------------------


def write_stream(
    path,
    stream: list[tuple[TaskSpec, list[TaskInstance], list[TaskInstance]]],
    manifest: dict,
) -> None:
    """Write the JSONL stream file: manifest header, then one line per instance."""
    header = dict(manifest)
    header["tasks"] = [
        {
            "task_id": spec.task_id,
            "class_count": spec.class_count,
            "format_id": spec.format_id,
            "templates": spec.instruction_templates,
            "cluster_stddev": spec.cluster_stddev,
            "cluster_means": spec.visual_cluster_means.tolist(),
        }
        for spec, _, _ in stream
    ]
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for spec, train, test in stream:
            for split, insts in (("train", train), ("test", test)):
                for inst in insts:
                    rec = {
                        "task_id": inst.task_id,
                        "split": split,
                        "visual": inst.visual.tolist(),
                        "instruction": inst.instruction_text,
                        "answer_class": inst.answer_class,
                        "format_id": inst.format_id,
                    }
                    if inst.instruction_embedding is not None:
                        rec["embedding"] = inst.instruction_embedding.a[:, 0].tolist()
                    f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_stream(path) -> tuple[dict, list[tuple[TaskSpec, list[TaskInstance], list[TaskInstance]]]]:
    """Read a stream file back into (manifest, [(spec, train, test), ...])."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty stream file", line=1)
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}", line=1) from None
    if "tasks" not in manifest:
        raise FormatError(f"{path}: manifest has no task table", line=1)
    specs = {}
    for entry in manifest["tasks"]:
        spec = TaskSpec(
            task_id=entry["task_id"],
            class_count=entry["class_count"],
            visual_cluster_means=np.array(entry["cluster_means"], dtype=np.float64),
            cluster_stddev=entry["cluster_stddev"],
            instruction_templates=list(entry["templates"]),
            format_id=entry["format_id"],
        )
        specs[spec.task_id] = spec
    buckets: dict[int, dict[str, list[TaskInstance]]] = {
        tid: {"train": [], "test": []} for tid in specs
    }
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad instance record: {exc}", line=lineno) from None
        try:
            emb = rec.get("embedding")
            inst = TaskInstance(
                task_id=rec["task_id"],
                visual=np.array(rec["visual"], dtype=np.float64),
                instruction_text=rec["instruction"],
                answer_class=rec["answer_class"],
                format_id=rec["format_id"],
                instruction_embedding=(
                    Matrix(np.array(emb, dtype=np.float64).reshape(-1, 1)) if emb is not None else None
                ),
            )
            split = rec["split"]
            buckets[inst.task_id][split].append(inst)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad instance record: {exc}", line=lineno) from None
    return manifest, [
        (specs[tid], buckets[tid]["train"], buckets[tid]["test"]) for tid in sorted(specs)
    ]

"""Benchmark enumeration, face-resemblance scoring, LLM judging, and reports.

The judge is any HTTP endpoint speaking this JSON exchange:

    POST <LYNX_JUDGE_URL>
    Authorization: Bearer <LYNX_JUDGE_TOKEN>        (omitted when unset)
    {"case_id": str, "video": str, "prompt": str,
     "dimensions": [str, ...], "rubrics": {dimension: str}}

    200 {"scores": {"prompt_alignment": x, "aesthetic": x,
                    "motion_naturalness": x, "video_quality": x}}

with every x a number in [0, 1]. Anything else is a parse failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np

from .faces import NoFaceError, StubFaceEmbedder, cosine
from .media import MediaError, frame_paths, load_image

log = logging.getLogger(__name__)

JUDGE_URL_ENV = "LYNX_JUDGE_URL"
JUDGE_TOKEN_ENV = "LYNX_JUDGE_TOKEN"
DIMENSIONS = ("prompt_alignment", "aesthetic", "motion_naturalness", "video_quality")
DEFAULT_STRIDE = 4

# Placeholder wording, one template per dimension; swap in tuned rubrics per deployment.
_ASK = ("You are rating a generated video of a person.\nText prompt: {prompt}\nVideo: {video}\n"
        "Give a score from 0 to 1 for {name}: ")
RUBRIC_TEMPLATES = {
    "prompt_alignment": _ASK.format(prompt="{prompt}", video="{video}", name="prompt alignment")
    + "does the video show what the prompt asks for?",
    "aesthetic": _ASK.format(prompt="{prompt}", video="{video}", name="aesthetic quality")
    + "composition, lighting and color.",
    "motion_naturalness": _ASK.format(prompt="{prompt}", video="{video}", name="motion naturalness")
    + "is the motion plausible and fluid?",
    "video_quality": _ASK.format(prompt="{prompt}", video="{video}", name="overall video quality")
    + "fidelity, artifacts and temporal stability.",
}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class BenchmarkError(ValueError):
    pass


# --- benchmark -----------------------------------------------------------------

@dataclass(frozen=True)
class Subject:
    name: str
    path: Path | None = None


@dataclass(frozen=True)
class Case:
    case_id: str
    subject: str
    prompt: str
    subject_index: int
    prompt_index: int


def case_id(subject: str, prompt: str) -> str:
    return hashlib.sha1(f"{subject}\x00{prompt}".encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Benchmark:
    subjects: tuple[Subject, ...]
    prompts: tuple[str, ...]
    cases: tuple[Case, ...]

    def __len__(self):
        return len(self.cases)

    def subject(self, name: str) -> Subject:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(name)


def benchmark_from(subjects: Sequence[Subject | str], prompts: Sequence[str]) -> Benchmark:
    subjects = tuple(s if isinstance(s, Subject) else Subject(s) for s in subjects)
    prompts = tuple(prompts)
    if not subjects:
        raise BenchmarkError("benchmark needs at least one subject")
    if not prompts:
        raise BenchmarkError("benchmark needs at least one prompt")
    if len({s.name for s in subjects}) != len(subjects):
        raise BenchmarkError("subject names must be unique")
    cases = tuple(Case(case_id(s.name, p), s.name, p, i, j)
                  for i, s in enumerate(subjects) for j, p in enumerate(prompts))
    if len({c.case_id for c in cases}) != len(cases):
        raise BenchmarkError("duplicate (subject, prompt) pairs")
    return Benchmark(subjects, prompts, cases)


def read_prompts(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def build_benchmark(subject_dir: str | Path, prompt_file: str | Path) -> Benchmark:
    """Subjects are the reference images in ``subject_dir``, named by file stem."""
    subject_dir = Path(subject_dir)
    if not subject_dir.is_dir():
        raise BenchmarkError(f"subject directory not found: {subject_dir}")
    files = sorted(p for p in subject_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return benchmark_from([Subject(p.stem, p) for p in files], read_prompts(prompt_file))


# --- resemblance ---------------------------------------------------------------

_REGISTRY: dict[str, Callable[[], Callable]] = {}


def register_embedder(name: str, factory: Callable[[], Callable]) -> None:
    _REGISTRY[name] = factory


def get_embedder(name: str):
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown embedder {name!r}; known: {sorted(_REGISTRY)}") from None


def embedder_names() -> list[str]:
    return list(_REGISTRY)


# Three independent extractors, stood in by unrelated random projections.
for _i, _name in enumerate(("stub-a", "stub-b", "stub-c")):
    register_embedder(_name, lambda i=_i, n=_name: StubFaceEmbedder(dim=128, seed=1000 + i, name=n))


@dataclass(frozen=True)
class Resemblance:
    score: float
    used: int
    skipped: int


def face_resemblance(frames: Sequence[np.ndarray] | np.ndarray, reference: np.ndarray, embedder,
                     frame_stride: int = DEFAULT_STRIDE) -> Resemblance:
    """Mean cosine between the reference face and every ``frame_stride``-th frame."""
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    if len(frames) == 0:
        raise ValueError("no frames to score")
    ref = embedder(reference)
    sims, skipped = [], 0
    for frame in frames[::frame_stride]:
        try:
            sims.append(cosine(embedder(frame), ref))
        except NoFaceError:
            skipped += 1
    if not sims:
        raise NoFaceError(f"no face found in any of {skipped} sampled frames")
    return Resemblance(math.fsum(sims) / len(sims), len(sims), skipped)


@dataclass
class ResemblanceReport:
    embedder: str
    per_case: dict[str, float] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def mean(self) -> float | None:
        if not self.per_case:
            return None
        return math.fsum(self.per_case[k] for k in sorted(self.per_case)) / len(self.per_case)


def score_results(bench: Benchmark, results: Mapping[str, str | Path], embedder_name: str,
                  frame_stride: int = DEFAULT_STRIDE, workers: int = 4) -> ResemblanceReport:
    """Score every case with a frame directory in ``results`` (case_id -> path)."""
    embedder = get_embedder(embedder_name)
    report = ResemblanceReport(embedder_name)
    todo = [c for c in bench.cases if c.case_id in results]
    refs = {s.name: load_image(s.path) for s in bench.subjects
            if s.path is not None and any(c.subject == s.name for c in todo)}

    def one(case: Case):
        if case.subject not in refs:
            raise BenchmarkError(f"subject {case.subject!r} has no reference image")
        frames = [load_image(p) for p in frame_paths(results[case.case_id])]
        return face_resemblance(frames, refs[case.subject], embedder, frame_stride).score

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {c.case_id: pool.submit(one, c) for c in todo}
    for cid, fut in futures.items():
        try:
            report.per_case[cid] = fut.result()
        except (NoFaceError, MediaError, BenchmarkError) as e:
            report.errors[cid] = str(e)
    return report


# --- judge ---------------------------------------------------------------------

class JudgeError(RuntimeError):
    pass


class JudgeParseError(JudgeError):
    pass


class JudgeTransportError(JudgeError):
    pass


@dataclass(frozen=True)
class JudgeScores:
    prompt_alignment: float
    aesthetic: float
    motion_naturalness: float
    video_quality: float

    def __post_init__(self):
        for name in DIMENSIONS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise JudgeParseError(f"score {name!r} is not a number: {v!r}")
            if not (0.0 <= v <= 1.0):
                raise JudgeParseError(f"score {name!r} out of range [0, 1]: {v!r}")
            object.__setattr__(self, name, float(v))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def parse_judge_response(payload) -> JudgeScores:
    if isinstance(payload, (str, bytes)):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as e:
            raise JudgeParseError(f"response is not JSON: {e}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("scores"), dict):
        raise JudgeParseError("response must be an object with a 'scores' object")
    scores = payload["scores"]
    missing = [d for d in DIMENSIONS if d not in scores]
    if missing:
        raise JudgeParseError(f"missing score field(s): {', '.join(missing)}")
    extra = sorted(set(scores) - set(DIMENSIONS))
    if extra:
        raise JudgeParseError(f"unexpected score field(s): {', '.join(extra)}")
    return JudgeScores(**{d: scores[d] for d in DIMENSIONS})


def render_rubrics(templates: Mapping[str, str] | str, prompt: str, video: str) -> dict[str, str]:
    """Fill ``{prompt}`` and ``{video}``; a single string serves every dimension."""
    if isinstance(templates, str):
        templates = {d: templates for d in DIMENSIONS}
    missing = [d for d in DIMENSIONS if d not in templates]
    if missing:
        raise ValueError(f"no rubric template for: {', '.join(missing)}")
    return {d: templates[d].format(prompt=prompt, video=video) for d in DIMENSIONS}


class JudgeClient:
    """Blocking judge client with bounded retries on transport faults and 5xx."""

    def __init__(self, url: str | None = None, token: str | None = None, *,
                 max_attempts: int = 3, backoff: float = 0.5, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        url = url or os.environ.get(JUDGE_URL_ENV)
        if not url:
            raise JudgeError(f"judge endpoint not configured; set {JUDGE_URL_ENV}")
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        token = token if token is not None else os.environ.get(JUDGE_TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.url = url
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.retries: list[str] = []
        self._http = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, body: dict) -> JudgeScores:
        last = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._http.post(self.url, json=body)
            except httpx.TransportError as e:
                last = f"{type(e).__name__}: {e}"
            else:
                if resp.status_code < 500:
                    if resp.status_code != 200:
                        raise JudgeError(f"judge rejected request: HTTP {resp.status_code}")
                    return parse_judge_response(resp.content)
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                msg = f"case {body.get('case_id')}: attempt {attempt} failed ({last}); retry in {delay:g}s"
                self.retries.append(msg)
                log.warning(msg)
                self.sleep(delay)
        raise JudgeTransportError(f"judge unreachable after {self.max_attempts} attempts: {last}")


def judge_case(video_ref: str, prompt: str, client: JudgeClient,
               rubric_template: Mapping[str, str] | str = RUBRIC_TEMPLATES,
               case_id: str | None = None) -> JudgeScores:
    body = {"case_id": case_id, "video": str(video_ref), "prompt": prompt,
            "dimensions": list(DIMENSIONS),
            "rubrics": render_rubrics(rubric_template, prompt, str(video_ref))}
    return client.request(body)


def judge_many(cases: Iterable[tuple[str, str, str]], client: JudgeClient,
               rubric_template: Mapping[str, str] | str = RUBRIC_TEMPLATES, workers: int = 4
               ) -> tuple[dict[str, JudgeScores], dict[str, str]]:
    """Judge (case_id, video_ref, prompt) triples, at most ``workers`` in flight.

    Returns (scores, errors); one failing case never sinks the batch.
    """
    cases = list(cases)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {cid: pool.submit(judge_case, video, prompt, client, rubric_template, cid)
                   for cid, video, prompt in cases}
    scores, errors = {}, {}
    for cid, fut in futures.items():
        try:
            scores[cid] = fut.result()
        except JudgeError as e:
            errors[cid] = f"judge-error: {e}"
    return scores, errors


# --- aggregation ---------------------------------------------------------------

def _mean(values: Mapping[str, float]) -> float | None:
    if not values:
        return None
    return math.fsum(values[k] for k in sorted(values)) / len(values)


def aggregate(reports: Sequence[ResemblanceReport], judge_scores: Mapping[str, JudgeScores],
              model: str = "lynx", cases: Iterable[str] | None = None) -> dict:
    """Per-embedder resemblance means and per-dimension judge means.

    When the score sets disagree on which cases they cover, the summary is
    still produced from what is there and ``partial`` is set.
    """
    sets = {f"resemblance:{r.embedder}": set(r.per_case) for r in reports}
    if judge_scores:
        sets["judge"] = set(judge_scores)
    expected = set(cases) if cases is not None else set().union(*sets.values()) if sets else set()
    missing = {k: sorted(expected - v) for k, v in sets.items() if expected - v}
    for r in reports:
        bad = [v for v in r.per_case.values() if not -1.0 <= v <= 1.0]
        if bad:
            raise ValueError(f"resemblance out of [-1, 1] for {r.embedder}: {bad[0]}")
    judge = {d: _mean({k: getattr(s, d) for k, s in judge_scores.items()}) for d in DIMENSIONS}
    return {
        "model": model,
        "num_cases": len(expected),
        "resemblance": {r.embedder: r.mean for r in reports},
        "judge": judge if judge_scores else {},
        "partial": bool(missing),
        "missing": missing,
    }


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def summary_table(summaries: Sequence[dict]) -> str:
    """Aligned text table, one row per model."""
    emb = sorted({e for s in summaries for e in s["resemblance"]})
    dims = [d for d in DIMENSIONS if any(d in s["judge"] for s in summaries)]
    header = ["model"] + emb + dims
    rows = [[s["model"]] + [_fmt(s["resemblance"].get(e)) for e in emb]
            + [_fmt(s["judge"].get(d)) for d in dims] + (["*"] if s.get("partial") else [])
            for s in summaries]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths + [1]))) for r in [header] + rows]
    if any(s.get("partial") for s in summaries):
        lines.append("* partial: some cases missing scores")
    return "\n".join(ln.rstrip() for ln in lines) + "\n"


def radar_data(summaries: Sequence[dict]) -> dict:
    """Axis/series layout for drawing a radar chart elsewhere."""
    axes = sorted({f"resemblance:{e}" for s in summaries for e in s["resemblance"]})
    axes += [f"judge:{d}" for d in DIMENSIONS if any(d in s["judge"] for s in summaries)]

    def value(s, axis):
        kind, key = axis.split(":", 1)
        return (s["resemblance"] if kind == "resemblance" else s["judge"]).get(key)

    return {"axes": axes,
            "series": [{"name": s["model"], "values": [value(s, a) for a in axes]}
                       for s in summaries]}


def parse_tabular(text: str) -> dict[str, list[float]]:
    """Rows of a LaTeX ``tabular`` body as {label: [numbers]}.

    Formatting macros and citations are stripped; rows without numeric
    cells (headers, rules) are skipped.
    """
    rows = {}
    for raw in text.split("\\\\"):
        line = re.sub(r"\\(toprule|midrule|bottomrule|hline)", "", raw)
        line = re.sub(r"\\cmidrule(\([^)]*\))?\{[^}]*\}", "", line)
        line = re.sub(r"~?\\cite\{[^}]*\}", "", line)
        line = re.sub(r"\\(textbf|underline|textit|emph)\{([^}]*)\}", r"\2", line)
        cells = [c.strip() for c in line.split("&")]
        if len(cells) < 2:
            continue
        try:
            nums = [float(c) for c in cells[1:]]
        except ValueError:
            continue
        rows[cells[0].strip()] = nums
    return rows

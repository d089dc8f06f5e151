"""
Benchmark cases, resemblance and a judge
=========================================

Every subject is paired with every prompt. Generated clips are compared to
the subject's reference face under several embedders, and a judge endpoint
scores the perceptual dimensions. Here the judge is a local stand-in.
"""

# %%
import json

import httpx
import numpy as np

from lynx.eval_harness import (
    JudgeClient, ResemblanceReport, aggregate, benchmark_from, face_resemblance,
    get_embedder, judge_many, summary_table,
)
from lynx.faces import synthetic_face

bench = benchmark_from(["ana", "bo", "cy"], ["walks on a beach", "reads a book"])
for c in bench.cases:
    print(c.case_id, c.subject, "|", c.prompt)

# %%
# Fake "generated" clips: the subject's face with some noise.
rng = np.random.default_rng(0)
faces = {s.name: synthetic_face(i) for i, s in enumerate(bench.subjects)}
clips = {c.case_id: [np.clip(faces[c.subject] + rng.normal(0, 0.05 * (1 + c.prompt_index),
                                                             faces[c.subject].shape), 0, 1)
                     for _ in range(8)] for c in bench.cases}
reports = []
for name in ("stub-a", "stub-b", "stub-c"):
    emb = get_embedder(name)
    reports.append(ResemblanceReport(name, {
        c.case_id: face_resemblance(clips[c.case_id], faces[c.subject], emb).score
        for c in bench.cases}))

# %%
# A judge that likes short prompts.
def judge(request):
    body = json.loads(request.content)
    s = 1.0 / (1 + len(body["prompt"].split()) / 4)
    return httpx.Response(200, json={"scores": {"prompt_alignment": s, "aesthetic": 0.8,
                                                "motion_naturalness": 0.7, "video_quality": s}})

client = JudgeClient("http://judge.local/score", transport=httpx.MockTransport(judge))
scores, errors = judge_many([(c.case_id, f"clips/{c.case_id}", c.prompt) for c in bench.cases],
                            client)

# %%
summary = aggregate(reports, scores, model="demo")
print(summary_table([summary]))

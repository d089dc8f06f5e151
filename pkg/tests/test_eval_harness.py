import hashlib
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import httpx
import numpy as np
import pytest

from lynx.eval_harness import (
    DIMENSIONS, BenchmarkError, JudgeClient, JudgeError, JudgeParseError, JudgeScores,
    JudgeTransportError, ResemblanceReport, aggregate, benchmark_from, build_benchmark, case_id,
    embedder_names, face_resemblance, get_embedder, judge_case, judge_many, parse_judge_response,
    parse_tabular, radar_data, score_results, summary_table,
)
from lynx.faces import NoFaceError, StubFaceEmbedder, synthetic_face
from lynx.media import save_frames, save_image

FIXTURES = Path(__file__).parent / "fixtures"
GOOD = {"scores": {"prompt_alignment": 0.7, "aesthetic": 0.8,
                   "motion_naturalness": 0.9, "video_quality": 1.0}}


# --- benchmark -----------------------------------------------------------------

def write_subjects(root, n):
    for i in range(n):
        save_image(root / "subjects" / f"s{i:02d}.png", synthetic_face(i, 32))
    (root / "prompts.txt").write_text("".join(f"prompt number {j}\n" for j in range(20)))


def test_forty_by_twenty_is_eight_hundred(tmp_path):
    write_subjects(tmp_path, 40)
    b = build_benchmark(tmp_path / "subjects", tmp_path / "prompts.txt")
    assert len(b) == 800 and len({c.case_id for c in b.cases}) == 800


def test_subject_major_order_by_hand():
    b = benchmark_from(["a", "b", "c"], ["p", "q", "r", "s"])
    assert [(c.subject, c.prompt) for c in b.cases] == [
        ("a", "p"), ("a", "q"), ("a", "r"), ("a", "s"),
        ("b", "p"), ("b", "q"), ("b", "r"), ("b", "s"),
        ("c", "p"), ("c", "q"), ("c", "r"), ("c", "s")]
    assert len(benchmark_from(["x"], ["y"])) == 1


def test_case_ids_are_stable_hashes():
    b = benchmark_from(["alice"], ["walks"])
    assert b.cases[0].case_id == hashlib.sha1(b"alice\x00walks").hexdigest()[:16]
    assert benchmark_from(["zed", "alice"], ["walks"]).cases[1].case_id == b.cases[0].case_id


def test_empty_inputs_rejected(tmp_path):
    with pytest.raises(BenchmarkError, match="subject"):
        benchmark_from([], ["p"])
    with pytest.raises(BenchmarkError, match="prompt"):
        benchmark_from(["a"], [])
    (tmp_path / "empty").mkdir()
    (tmp_path / "p.txt").write_text("# only a comment\n\n")
    with pytest.raises(BenchmarkError):
        build_benchmark(tmp_path / "empty", tmp_path / "p.txt")


# --- resemblance ---------------------------------------------------------------

class TableEmbedder:
    def __init__(self, table):
        self.table = table

    def __call__(self, image):
        key = int(round(image[0, 0, 0] * 255))
        if key == 0:
            raise NoFaceError("none")
        return self.table[key]


def keyed(k):
    img = np.full((8, 8, 3), 0.5)
    img[0, 0, 0] = k / 255
    return img


def test_identical_frames_score_one():
    face = synthetic_face(3)
    r = face_resemblance([face] * 5, face, StubFaceEmbedder(), frame_stride=1)
    assert r.score == pytest.approx(1.0, abs=1e-12) and r.used == 5


def test_known_cosines_average():
    e = np.eye(4)
    emb = TableEmbedder({1: e[0], 2: e[0], 3: 0.5 * e[0] + np.sqrt(0.75) * e[1], 4: e[1]})
    assert face_resemblance([keyed(2), keyed(3)], keyed(1), emb, 1).score == pytest.approx(0.75)
    assert face_resemblance([keyed(4)], keyed(1), emb, 1).score == 0.0


def test_stride_and_no_face_frames():
    emb = TableEmbedder({1: np.eye(2)[0], 2: np.eye(2)[0], 4: np.eye(2)[1]})
    frames = [keyed(2), keyed(4), keyed(0), keyed(4), keyed(4)]
    r = face_resemblance(frames, keyed(1), emb, frame_stride=2)  # frames 0, 2, 4
    assert (r.score, r.used, r.skipped) == (0.5, 2, 1)
    with pytest.raises(NoFaceError):
        face_resemblance([keyed(0)] * 3, keyed(1), emb, 1)
    with pytest.raises(ValueError):
        face_resemblance([], keyed(1), emb, 1)


def test_registry_has_three_distinct_embedders():
    names = embedder_names()
    assert len(names) >= 3
    face = synthetic_face(0)
    vecs = [get_embedder(n)(face) for n in names[:3]]
    assert all(abs(np.linalg.norm(v) - 1) < 1e-12 for v in vecs)
    assert not np.allclose(vecs[0], vecs[1]) and not np.allclose(vecs[1], vecs[2])
    with pytest.raises(KeyError):
        get_embedder("nope")


def test_score_results_over_directories(tmp_path):
    write_subjects(tmp_path, 2)
    b = build_benchmark(tmp_path / "subjects", tmp_path / "prompts.txt")
    results = {}
    for c in b.cases[:3]:
        face = synthetic_face(int(c.subject[1:]), 32)
        results[c.case_id] = tmp_path / "res" / c.case_id
        save_frames(results[c.case_id], [face] * 4)
    results["bogus"] = tmp_path / "nowhere"
    flat = b.cases[20]
    save_frames(tmp_path / "res" / flat.case_id, [np.full((32, 32, 3), 0.4)] * 2)
    results[flat.case_id] = tmp_path / "res" / flat.case_id
    rep = score_results(b, results, "stub-a", frame_stride=1)
    assert len(rep.per_case) == 3 and rep.mean == pytest.approx(1.0, abs=1e-9)
    assert list(rep.errors) == [flat.case_id]


# --- judge ---------------------------------------------------------------------

def scripted(responses, seen):
    """MockTransport that replays ``responses`` in order."""
    it = iter(responses)

    def handler(request):
        seen.append(request)
        r = next(it)
        if isinstance(r, Exception):
            raise r
        status, body = r
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler)


def client_for(responses, seen=None, **kw):
    seen = [] if seen is None else seen
    return JudgeClient("http://judge.invalid/score", "tok", transport=scripted(responses, seen),
                       sleep=lambda s: None, **kw)


def test_parse_fidelity():
    seen = []
    with client_for([(200, GOOD)], seen) as c:
        s = judge_case("vid/0001", "a person waves", c, case_id="abc")
    assert s == JudgeScores(0.7, 0.8, 0.9, 1.0)
    body = json.loads(seen[0].content)
    assert body["prompt"] == "a person waves"
    assert set(body["rubrics"]) == set(DIMENSIONS)
    assert all("a person waves" in r and "vid/0001" in r for r in body["rubrics"].values())
    assert body["dimensions"] == list(DIMENSIONS)
    assert seen[0].headers["authorization"] == "Bearer tok"


def test_custom_single_rubric_and_missing_dimension():
    seen = []
    with client_for([(200, GOOD)], seen) as c:
        judge_case("v", "p", c, rubric_template="rate {video} for {prompt}")
    assert json.loads(seen[0].content)["rubrics"]["aesthetic"] == "rate v for p"
    with client_for([]) as c:
        with pytest.raises(ValueError, match="video_quality"):
            judge_case("v", "p", c, rubric_template={"aesthetic": "x"})


def test_out_of_range_rejected_with_field_name_and_not_retried():
    bad = json.loads(json.dumps(GOOD))
    bad["scores"]["aesthetic"] = 1.3
    seen = []
    with client_for([(200, bad), (200, GOOD)], seen) as c:
        with pytest.raises(JudgeParseError, match="aesthetic"):
            judge_case("v", "p", c)
    assert len(seen) == 1


@pytest.mark.parametrize("scores,word", [
    ({"prompt_alignment": 0.1, "aesthetic": 0.1, "motion_naturalness": 0.1}, "video_quality"),
    ({**GOOD["scores"], "extra": 0.5}, "extra"),
    ({**GOOD["scores"], "aesthetic": "0.5"}, "aesthetic"),
    ({**GOOD["scores"], "aesthetic": True}, "aesthetic"),
    ({**GOOD["scores"], "aesthetic": -0.01}, "aesthetic"),
])
def test_strict_parsing(scores, word):
    with pytest.raises(JudgeParseError, match=word):
        parse_judge_response({"scores": scores})


def test_parse_rejects_non_json_and_nan():
    with pytest.raises(JudgeParseError):
        parse_judge_response(b"<html>")
    with pytest.raises(JudgeParseError):
        parse_judge_response('{"scores": {"prompt_alignment": NaN, "aesthetic": 0, '
                             '"motion_naturalness": 0, "video_quality": 0}}')


def test_retry_then_succeed(caplog):
    seen, delays = [], []
    c = JudgeClient("http://judge.invalid/score", transport=scripted(
        [httpx.ConnectError("refused"), (503, {}), (200, GOOD)], seen), sleep=delays.append,
        backoff=0.25)
    with caplog.at_level(logging.WARNING, logger="lynx.eval_harness"):
        s = judge_case("v", "p", c)
    assert s.video_quality == 1.0 and len(seen) == 3
    assert len(c.retries) == 2 and len(caplog.records) == 2
    assert delays == [0.25, 0.5]
    assert "authorization" not in seen[0].headers


def test_transport_exhaustion():
    seen = []
    with client_for([(500, {})] * 5, seen) as c:
        with pytest.raises(JudgeTransportError, match="3 attempts"):
            judge_case("v", "p", c)
    assert len(seen) == 3


def test_client_error_status_not_retried():
    seen = []
    with client_for([(401, {}), (200, GOOD)], seen) as c:
        with pytest.raises(JudgeError, match="401"):
            judge_case("v", "p", c)
    assert len(seen) == 1


def test_endpoint_from_environment(monkeypatch):
    monkeypatch.delenv("LYNX_JUDGE_URL", raising=False)
    with pytest.raises(JudgeError, match="LYNX_JUDGE_URL"):
        JudgeClient()
    monkeypatch.setenv("LYNX_JUDGE_URL", "http://judge.invalid/x")
    monkeypatch.setenv("LYNX_JUDGE_TOKEN", "envtok")
    seen = []
    c = JudgeClient(transport=scripted([(200, GOOD)], seen))
    judge_case("v", "p", c)
    assert str(seen[0].url) == "http://judge.invalid/x"
    assert seen[0].headers["authorization"] == "Bearer envtok"


def test_judge_many_bounded_and_isolates_failures():
    lock, state = threading.Lock(), {"now": 0, "peak": 0}
    gate = threading.Barrier(4, timeout=5)

    def handler(request):
        body = json.loads(request.content)
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        if int(body["case_id"]) < 4:
            gate.wait()  # the first four must be in flight together
        with lock:
            state["now"] -= 1
        if body["case_id"] == "7":
            return httpx.Response(200, json={"scores": {}})
        return httpx.Response(200, json=GOOD)

    c = JudgeClient("http://judge.invalid/", transport=httpx.MockTransport(handler),
                    sleep=lambda s: None)
    scores, errors = judge_many([(str(i), f"v{i}", "p") for i in range(10)], c, workers=4)
    assert len(scores) == 9 and list(errors) == ["7"] and errors["7"].startswith("judge-error")
    assert state["peak"] == 4


class _Handler(BaseHTTPRequestHandler):
    script: list = []

    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        status, body = self.script.pop(0)
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_against_local_http_server():
    _Handler.script = [(502, {}), (200, GOOD)]
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        c = JudgeClient(f"http://127.0.0.1:{server.server_port}/score", sleep=lambda s: None)
        assert judge_case("v", "p", c).aesthetic == 0.8
        assert len(c.retries) == 1
    finally:
        server.shutdown()


# --- aggregation ---------------------------------------------------------------

def test_single_case_summary_equals_case():
    r = ResemblanceReport("stub-a", {"c1": 0.42})
    s = aggregate([r], {"c1": JudgeScores(0.7, 0.8, 0.9, 1.0)})
    assert s["resemblance"] == {"stub-a": 0.42}
    assert s["judge"] == {"prompt_alignment": 0.7, "aesthetic": 0.8,
                          "motion_naturalness": 0.9, "video_quality": 1.0}
    assert not s["partial"]


def test_two_case_mean_and_permutation_invariance():
    vals = {f"c{i}": v for i, v in enumerate(np.random.default_rng(0).uniform(-1, 1, 50))}
    assert aggregate([ResemblanceReport("e", {"a": 0.6, "b": 0.8})], {})["resemblance"]["e"] \
        == pytest.approx(0.7)
    keys = list(vals)
    np.random.default_rng(1).shuffle(keys)
    a = aggregate([ResemblanceReport("e", vals)], {})
    b = aggregate([ResemblanceReport("e", {k: vals[k] for k in keys})], {})
    assert a == b


def test_mismatched_case_sets_flag_partial():
    s = aggregate([ResemblanceReport("e", {"a": 0.5, "b": 0.5})],
                  {"a": JudgeScores(1, 1, 1, 1)})
    assert s["partial"] and s["missing"] == {"judge": ["b"]}
    assert s["judge"]["aesthetic"] == 1.0
    assert "partial" in summary_table([s])
    with pytest.raises(ValueError):
        aggregate([ResemblanceReport("e", {"a": 1.5})], {})


def test_table_and_radar_layout():
    s1 = aggregate([ResemblanceReport("stub-a", {"x": 0.5}), ResemblanceReport("stub-b", {"x": 0.25})],
                   {"x": JudgeScores(0.1, 0.2, 0.3, 0.4)}, model="lynx")
    s2 = aggregate([ResemblanceReport("stub-a", {"x": 0.125})], {}, model="other")
    lines = summary_table([s1, s2]).splitlines()
    assert lines[0].split()[:3] == ["model", "stub-a", "stub-b"]
    assert lines[1].split() == ["lynx", "0.500", "0.250", "0.100", "0.200", "0.300", "0.400"]
    assert lines[2].split()[:3] == ["other", "0.125", "-"]
    assert len({len(l) for l in lines[:1]}) == 1
    radar = radar_data([s1, s2])
    assert radar["axes"][0] == "resemblance:stub-a" and len(radar["axes"]) == 6
    assert radar["series"][1]["values"][1] is None
    json.dumps(radar)


def test_reference_table_fixture_parses():
    rows = parse_tabular((FIXTURES / "resemblance_table.tex").read_text())
    assert rows["Lynx (ours)"] == [0.779, 0.699, 0.781]
    assert rows["SkyReels-A2"] == [0.715, 0.678, 0.725]
    assert len(rows) == 6

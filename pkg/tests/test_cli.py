import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from lynx.cli import main
from lynx.checkpoint import load_checkpoint, read_header
from lynx.faces import synthetic_face
from lynx.media import load_image, save_frames, save_image
from lynx.runconfig import load_config

TINY = {
    "model": {"hidden_dim": 16, "num_blocks": 1, "num_heads": 2, "text_dim": 8, "mlp_ratio": 2,
              "freq_dim": 8, "face_dim": 8, "n_id": 2, "n_reg": 1, "face_ctx_tokens": 2,
              "resampler_depth": 1, "resampler_heads": 2},
    "train": {"image_iterations": 3, "video_iterations": 3, "learning_rate": 1e-3, "budget": 64},
    "data": {"num_clips": 2, "frames": 2, "height": 32, "width": 32},
    "sampler": {"num_steps": 2, "num_frames": 2},
    "dtype": "float64",
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- config --------------------------------------------------------------------

def test_overrides_win_and_are_typed(tiny_config):
    cfg = load_config(tiny_config, ["train.learning_rate=0.5", "model.hidden_dim=32",
                                    "sampler.guidance=2"])
    assert cfg.train.learning_rate == 0.5 and cfg.model.hidden_dim == 32
    assert cfg.sampler.guidance == 2 and cfg.data.num_clips == 2


@pytest.mark.parametrize("override,field", [
    ("train.learning_rate=-1", "train.learning_rate"),
    ("model.hidden_dim=30", "model.hidden_dim"),
    ("train.colour=1", "colour"),
    ("data.height=30", "data.height"),
    ("sampler.num_steps=0", "sampler.num_steps"),
    ("eval.embedders=[nope]", "eval.embedders"),
])
def test_invalid_config_is_exit_2_naming_field(tiny_config, tmp_path, capsys, override, field):
    code, _, err = run(capsys, "train", "-c", tiny_config, "--set", override,
                       "--run-dir", tmp_path / "r")
    assert code == 2 and field in err
    assert not (tmp_path / "r").exists()


def test_unreadable_config_and_bad_flags(tmp_path, capsys):
    code, _, err = run(capsys, "train", "-c", tmp_path / "missing.yaml")
    assert code == 2 and "missing.yaml" in err
    assert run(capsys, "frobnicate")[0] == 2


# --- train ---------------------------------------------------------------------

def test_train_two_stages(tiny_config, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "-c", tiny_config, "--run-dir", tmp_path / "r")
    assert code == 0
    res = json.loads(out)
    ck = tmp_path / "r" / "checkpoints"
    assert res["steps"] == 6 and sorted(p.name for p in ck.glob("*.lynx")) == ["image.lynx",
                                                                              "video.lynx"]
    assert read_header(ck / "image.lynx")["metadata"]["step"] == 3
    rows = [json.loads(l) for l in (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in rows] == ["image"] * 3 + ["video"] * 3
    echo = yaml.safe_load((tmp_path / "r" / "config.yaml").read_text())
    assert echo["train"]["image_iterations"] == 3 and echo["model"]["hidden_dim"] == 16


def test_missing_manifest_names_field(tiny_config, tmp_path, capsys):
    code, _, err = run(capsys, "train", "-c", tiny_config, "--set", "data.source=manifest",
                       "--set", f"data.manifest={tmp_path / 'none.jsonl'}")
    assert code == 2 and "data.manifest" in err


def test_resume_continues_at_recorded_step(tiny_config, tmp_path, capsys):
    assert run(capsys, "train", "-c", tiny_config, "--run-dir", tmp_path / "full")[0] == 0
    image_ck = tmp_path / "full" / "checkpoints" / "image.lynx"
    code, out, err = run(capsys, "train", "-c", tiny_config, "--run-dir", tmp_path / "resumed",
                         "--resume", image_ck)
    assert code == 0 and "step 3" in err
    rows = [json.loads(l) for l in (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [4, 5, 6]
    a = load_checkpoint(tmp_path / "full" / "checkpoints" / "video.lynx").tensors
    b = load_checkpoint(tmp_path / "resumed" / "checkpoints" / "video.lynx").tensors
    assert all(np.array_equal(a[k].numpy(), b[k].numpy()) for k in a)
    code, _, err = run(capsys, "train", "-c", tiny_config, "--run-dir", tmp_path / "again",
                       "--resume", tmp_path / "full" / "checkpoints" / "video.lynx")
    assert code == 2 and "past the end" in err


def test_train_from_manifest(tiny_config, tmp_path, capsys):
    m = tmp_path / "data"
    lines = []
    for i in range(3):
        save_image(m / f"c{i}.png", synthetic_face(i, 32))
        save_frames(m / f"v{i}", [synthetic_face(i, 32)] * 3)
        lines.append(json.dumps({"pair_type": "single_scene", "condition_image": f"c{i}.png",
                                 "target": f"v{i}", "caption": f"person {i} smiling"}))
    (m / "m.jsonl").write_text("\n".join(lines) + "\n")
    base = ["train", "-c", tiny_config, "--set", "data.source=manifest",
            "--set", f"data.manifest={m / 'm.jsonl'}"]
    code, _, err = run(capsys, *base, "--run-dir", tmp_path / "r")
    assert code == 2 and "data.weights" in err
    code, out, err = run(capsys, *base, "--set", "data.weights={single_scene: 1}",
                         "--run-dir", tmp_path / "r")
    assert code == 0, err
    assert json.loads(out)["steps"] == 6


# --- sample --------------------------------------------------------------------

@pytest.fixture
def trained(tiny_config, tmp_path, capsys):
    assert run(capsys, "train", "-c", tiny_config, "--run-dir", tmp_path / "r")[0] == 0
    ref = save_image(tmp_path / "ref.png", synthetic_face(7, 32))
    return tmp_path / "r" / "checkpoints" / "video.lynx", ref


def test_sample_deterministic(tiny_config, trained, tmp_path, capsys):
    ck, ref = trained
    metas = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "sample", "-c", tiny_config, "--checkpoint", ck, "--ref", ref,
                           "--prompt", "a person waves", "--seed", 3, "--out", tmp_path / name)
        assert code == 0
        metas.append(json.loads(out))
    assert metas[0]["latent_sha256"] == metas[1]["latent_sha256"]
    assert metas[0]["latent_shape"] == [2, 4, 4, 4] and metas[0]["steps"] == 2
    frames = sorted((tmp_path / "a" / "frames").glob("*.png"))
    assert [digest(p) for p in frames] == [digest(p) for p in
                                           sorted((tmp_path / "b" / "frames").glob("*.png"))]
    assert load_image(frames[0]).shape == (32, 32, 3)
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 16


def test_sample_single_frame(tiny_config, trained, tmp_path, capsys):
    ck, ref = trained
    code, out, _ = run(capsys, "sample", "-c", tiny_config, "--set", "sampler.num_frames=1",
                       "--checkpoint", ck, "--ref", ref, "--out", tmp_path / "img")
    assert code == 0 and len(list((tmp_path / "img" / "frames").glob("*.png"))) == 1


def test_sample_refuses_mismatched_checkpoint(tiny_config, trained, tmp_path, capsys):
    ck, ref = trained
    code, _, err = run(capsys, "sample", "-c", tiny_config, "--set", "model.hidden_dim=32",
                       "--checkpoint", ck, "--ref", ref, "--out", tmp_path / "x")
    assert code == 2 and "hidden_dim=16" in err and "hidden_dim=32" in err


def test_sample_bad_reference_size(tiny_config, trained, tmp_path, capsys):
    ck, _ = trained
    ref = save_image(tmp_path / "odd.png", synthetic_face(1, 30))
    code, _, err = run(capsys, "sample", "-c", tiny_config, "--checkpoint", ck, "--ref", ref,
                       "--out", tmp_path / "x")
    assert code == 2 and "codec_factor" in err


# --- data ----------------------------------------------------------------------

@pytest.fixture
def three_records(tmp_path):
    """Same face, a lightly perturbed face and a different face."""
    root = tmp_path / "m"
    face = synthetic_face(0)
    rng = np.random.default_rng(0)
    targets = [face, np.clip(face + rng.normal(0, 0.02, face.shape), 0, 1), synthetic_face(99)]
    lines = []
    for i, t in enumerate(targets):
        save_image(root / f"c{i}.png", face)
        save_frames(root / f"t{i}", [t])
        lines.append({"pair_type": "multi_scene", "condition_image": f"c{i}.png",
                      "target": f"t{i}", "caption": "x"})
    lines.append({"pair_type": "single_scene", "condition_image": "c0.png", "target": "t0",
                  "caption": "y"})
    (root / "m.jsonl").write_text("".join(json.dumps(l) + "\n" for l in lines[:3]))
    (root / "single.jsonl").write_text(json.dumps(lines[3]) + "\n")
    return root


def test_data_filter_two_one(three_records, tmp_path, capsys):
    code, out, _ = run(capsys, "data", "filter", "--manifest", three_records / "m.jsonl",
                       "--out", tmp_path / "f")
    rep = json.loads(out)
    assert code == 0 and (rep["kept"], rep["dropped"]) == (2, 1)
    kept = (tmp_path / "f" / "kept.jsonl").read_text().splitlines()
    assert len(kept) == 2 and all("resemblance" in json.loads(l) for l in kept)
    assert (tmp_path / "f" / "config.yaml").exists()


def test_data_stats_empty(tmp_path, capsys):
    (tmp_path / "e.jsonl").write_text("")
    code, out, _ = run(capsys, "data", "stats", "--manifest", tmp_path / "e.jsonl")
    s = json.loads(out)
    assert code == 0 and s["total"] == 0 and set(s["counts"].values()) == {0}


def test_data_augment_gamma_one_is_noop_copy(three_records, tmp_path, capsys):
    before = digest(three_records / "c0.png")
    code, out, _ = run(capsys, "data", "augment", "--manifest", three_records / "single.jsonl",
                       "--augmenter", "relight", "--param", "gamma=1.0", "--out", tmp_path / "a")
    rep = json.loads(out)
    assert code == 0 and rep["augmented"] == rep["noop"] == 1
    (line,) = (tmp_path / "a" / "augmented.jsonl").read_text().splitlines()
    rec = json.loads(line)
    assert rec["pair_type"] == "augmented_single_scene" and rec["noop"] is True
    assert digest(tmp_path / "a" / rec["condition_image"]) == before
    assert digest(three_records / "c0.png") == before


def test_data_augment_rejects_other_types(three_records, tmp_path, capsys):
    code, out, _ = run(capsys, "data", "augment", "--manifest", three_records / "m.jsonl",
                       "--augmenter", "relight", "--out", tmp_path / "a")
    assert code == 0 and json.loads(out)["augmented"] == 0
    assert len(json.loads(out)["rejected"]) == 3


def test_data_bad_manifest_exit_2(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"pair_type": "movie"}\n')
    code, _, err = run(capsys, "data", "stats", "--manifest", tmp_path / "bad.jsonl")
    assert code == 2 and "bad.jsonl:1" in err


# --- inspect-pack --------------------------------------------------------------

def test_inspect_pack_lengths(capsys, tmp_path):
    code, out, _ = run(capsys, "inspect-pack", "--lengths", "64,36", "--budget", 128,
                       "--out", tmp_path / "p")
    rep = json.loads(out)
    assert code == 0 and rep["waste"] == 0.21875
    assert rep["packs"][0]["boundaries"] == [0, 64, 100]
    assert json.loads((tmp_path / "p" / "packs.json").read_text()) == rep
    code, out, _ = run(capsys, "inspect-pack", "--lengths", "128", "--budget", 128)
    assert json.loads(out)["waste"] == 0.0


def test_inspect_pack_manifest(three_records, tmp_path, capsys):
    # 64x64 frames -> 8x8 latents -> 16 tokens per frame at patch (1, 2, 2)
    code, out, _ = run(capsys, "inspect-pack", "--manifest", three_records / "m.jsonl",
                       "--budget", 40)
    rep = json.loads(out)
    assert code == 0 and [p["lengths"] for p in rep["packs"]] == [[16, 16], [16]]
    assert rep["waste"] == pytest.approx((8 + 24) / 80)
    (tmp_path / "e.jsonl").write_text("")
    code, out, _ = run(capsys, "inspect-pack", "--manifest", tmp_path / "e.jsonl")
    assert code == 0 and json.loads(out)["packs"] == [] and json.loads(out)["waste"] == 0.0


def test_inspect_pack_oversized_sample_exit_2(capsys):
    code, _, err = run(capsys, "inspect-pack", "--lengths", "200", "--budget", 128)
    assert code == 2 and "budget" in err


# --- eval ----------------------------------------------------------------------

def test_eval_writes_summaries(tmp_path, capsys):
    subj = tmp_path / "subjects"
    for i in range(2):
        save_image(subj / f"p{i}.png", synthetic_face(i))
    (tmp_path / "prompts.txt").write_text("walks\nwaves\n")
    from lynx.eval_harness import build_benchmark

    bench = build_benchmark(subj, tmp_path / "prompts.txt")
    for c in bench.cases[:3]:
        save_frames(tmp_path / "res" / c.case_id, [synthetic_face(int(c.subject[1:]))] * 4)
    code, out, _ = run(capsys, "eval", "--subjects", subj, "--prompts", tmp_path / "prompts.txt",
                       "--results", tmp_path / "res", "--out", tmp_path / "ev")
    assert code == 0
    full = json.loads((tmp_path / "ev" / "summary.json").read_text())
    s = full["summary"]
    assert s["partial"] and s["scored_cases"] == 3 and s["num_cases"] == 4
    assert set(s["resemblance"]) == {"stub-a", "stub-b", "stub-c"}
    assert all(v == pytest.approx(1.0) for v in s["resemblance"].values())
    assert (tmp_path / "ev" / "summary.txt").read_text() == out
    assert json.loads((tmp_path / "ev" / "radar.json").read_text())["axes"]


def test_eval_judge_without_endpoint_is_runtime_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LYNX_JUDGE_URL", raising=False)
    save_image(tmp_path / "s" / "a.png", synthetic_face(0))
    (tmp_path / "p.txt").write_text("x\n")
    (tmp_path / "res").mkdir()
    code, _, err = run(capsys, "eval", "--subjects", tmp_path / "s", "--prompts",
                       tmp_path / "p.txt", "--results", tmp_path / "res", "--out", tmp_path / "o",
                       "--judge")
    assert code == 3 and "LYNX_JUDGE_URL" in err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lynx.cli", "inspect-pack", "--lengths", "60,60,60",
                           "--budget", "128"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["waste"] == pytest.approx(76 / 256)

import json

import numpy as np
import pytest

from nmidistill.cli import main
from nmidistill.curation import write_image
from nmidistill.io_formats import (AttentionStack, CorpusManifest, FeatureStack, Record, decode_checkpoint,
                                   dump_manifest, encode_attention_dump, encode_checkpoint, encode_feature_dump,
                                   read_manifest)
from nmidistill.shapes import make_shapes
from nmidistill.toy.model import ModelConfig, init_params

NMI_PROFILE_24 = [0.62, 0.55, 0.47, 0.40, 0.09, 0.31, 0.28, 0.26, 0.24, 0.22, 0.21, 0.20,
                  0.19, 0.18, 0.17, 0.165, 0.16, 0.1185, 0.155, 0.15, 0.152, 0.158, 0.17, 0.1882]

TEACHER = ModelConfig(depth=4, dim=16, heads=2, patch=4, image=(8, 8))
STUDENT = {"depth": 2, "dim": 8, "heads": 2, "patch": 4, "image": [8, 8]}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path):
    images, _ = make_shapes(6, (8, 8), seed=0, size_range=(2, 5))
    (tmp_path / "img").mkdir()
    recs = []
    for i, img in enumerate(images):
        write_image(tmp_path / "img" / f"{i}.png", img)
        recs.append(Record(f"img/{i}.png", "synthetic", "infrared"))
    (tmp_path / "train.jsonl").write_text(dump_manifest(CorpusManifest(recs[:4])))
    (tmp_path / "heldout.jsonl").write_text(dump_manifest(CorpusManifest(recs[4:])))
    encode_checkpoint(init_params(TEACHER, seed=1), {"model": TEACHER.to_dict()}, tmp_path / "teacher.ckpt")
    return tmp_path


def write_plan(path, **fields):
    plan = {"epochs": 0, "batch_size": 2, "crop_scale": None, "selection_images": 4, "student": STUDENT}
    plan.update(fields)
    path.write_text(json.dumps(plan))
    return path


class TestUsage:
    def test_help(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0 and "distill" in out

    def test_missing_flags(self, capsys):
        code, _, err = run(capsys, "distill")
        assert code == 2
        assert "--plan" in err and "--teacher" in err

    def test_bad_seed_env(self, capsys, monkeypatch):
        monkeypatch.setenv("NMIDISTILL_SEED", "abc")
        code, _, err = run(capsys, "select-layer", "--values", "0.1,0.2")
        assert code == 2 and "NMIDISTILL_SEED" in err


class TestNmi:
    def test_identity(self, capsys, tmp_path):
        encode_attention_dump(AttentionStack(np.eye(4)[None, None]), tmp_path / "a.atn")
        code, out, _ = run(capsys, "nmi", "--input", tmp_path / "a.atn")
        assert code == 0
        assert json.loads(out)["per_layer_nmi"] == [1.0]

    def test_bad_magic(self, capsys, tmp_path):
        (tmp_path / "x.atn").write_bytes(b"NOPE0001" + bytes(16))
        code, _, err = run(capsys, "nmi", "--input", tmp_path / "x.atn")
        assert code == 3 and "nmi" in err

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "nmi", "--input", tmp_path / "absent.atn")[0] == 3


class TestSelectLayer:
    def test_24_layer_profile(self, capsys, tmp_path):
        (tmp_path / "nmi.json").write_text(json.dumps(NMI_PROFILE_24))
        code, out, _ = run(capsys, "select-layer", "--input", tmp_path / "nmi.json", "--s", "0.09")
        assert code == 0 and json.loads(out)["target_layer"] == 18
        code, out, _ = run(capsys, "select-layer", "--input", tmp_path / "nmi.json", "--no-half-only")
        assert json.loads(out)["target_layer"] == 5

    def test_both_sources_is_usage(self, capsys, tmp_path):
        assert run(capsys, "select-layer", "--values", "0.1,0.2", "--input", "x")[0] == 2
        assert run(capsys, "select-layer", "--values", "0.1,zz")[0] == 2

    def test_bad_json(self, capsys, tmp_path):
        (tmp_path / "nmi.json").write_text("[0.1,")
        assert run(capsys, "select-layer", "--input", tmp_path / "nmi.json")[0] == 3


class TestCka:
    def test_self_diagonal(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(2):
            encode_feature_dump(FeatureStack(rng.normal(size=(3, 10, 4))), tmp_path / f"f{i}.fetd")
        args = []
        for i in range(2):
            args += ["--a", tmp_path / f"f{i}.fetd", "--b", tmp_path / f"f{i}.fetd"]
        code, out, _ = run(capsys, "cka", *args, "--out", tmp_path / "cka.json")
        assert code == 0 and out == ""
        grid = np.array(json.loads((tmp_path / "cka.json").read_text())["cka"])
        np.testing.assert_allclose(np.diag(grid), 1.0, atol=1e-12)

    def test_degenerate_is_numeric(self, capsys, tmp_path):
        encode_feature_dump(FeatureStack(np.ones((1, 5, 3))), tmp_path / "c.fetd")
        assert run(capsys, "cka", "--a", tmp_path / "c.fetd", "--b", tmp_path / "c.fetd")[0] == 4


class TestDistill:
    def test_zero_epochs_is_init(self, capsys, corpus):
        plan = write_plan(corpus / "plan.json", seed=5)
        code, _, err = run(capsys, "distill", "--plan", plan, "--teacher", corpus / "teacher.ckpt",
                           "--corpus", corpus / "train.jsonl", "--out", corpus / "s.ckpt")
        assert code == 0, err
        params, config = decode_checkpoint(corpus / "s.ckpt")
        want = init_params(ModelConfig.from_dict(STUDENT), seed=5)
        assert set(params) >= set(want)
        for k, v in want.items():
            np.testing.assert_array_equal(params[k], v)
        assert config["plan"]["seed"] == 5

    def test_rerun_byte_identical(self, capsys, corpus, monkeypatch):
        monkeypatch.setenv("NMIDISTILL_SEED", "3")
        plan = write_plan(corpus / "plan.json", epochs=1, base_lr=1e-3, warmup_epochs=0)
        blobs = []
        for name in ("a", "b"):
            code, _, err = run(capsys, "distill", "--plan", plan, "--teacher", corpus / "teacher.ckpt",
                               "--corpus", corpus / "train.jsonl", "--heldout", corpus / "heldout.jsonl",
                               "--out", corpus / f"{name}.ckpt", "--log", corpus / f"{name}.log")
            assert code == 0, err
            blobs.append(((corpus / f"{name}.ckpt").read_bytes(), (corpus / f"{name}.log").read_bytes()))
        assert blobs[0] == blobs[1]
        assert decode_checkpoint(corpus / "a.ckpt")[1]["plan"]["seed"] == 3

        code, out, _ = run(capsys, "report", "--log", corpus / "a.log")
        summary = json.loads(out)
        assert code == 0 and len(summary["epochs"]) == 2
        assert summary["heldout_ratio"] == pytest.approx(summary["final_heldout"] / summary["initial_heldout"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_4_keeps_old_output(self, capsys, corpus):
        (corpus / "s.ckpt").write_bytes(b"previous")
        plan = write_plan(corpus / "plan.json", epochs=2, base_lr=1e12, warmup_epochs=0)
        code, _, err = run(capsys, "distill", "--plan", plan, "--teacher", corpus / "teacher.ckpt",
                           "--corpus", corpus / "train.jsonl", "--out", corpus / "s.ckpt")
        assert code == 4 and "distill" in err
        assert (corpus / "s.ckpt").read_bytes() == b"previous"
        assert [p.name for p in corpus.iterdir() if p.name.startswith(".s.ckpt")] == []

    def test_bad_plan_field(self, capsys, corpus):
        plan = write_plan(corpus / "plan.json", loss_kind="mse")
        assert run(capsys, "distill", "--plan", plan, "--teacher", corpus / "teacher.ckpt",
                   "--corpus", corpus / "train.jsonl", "--out", corpus / "s.ckpt")[0] == 2


class TestProbe:
    def test_runs_and_reports(self, capsys, tmp_path):
        cfg = ModelConfig(depth=2, dim=8, heads=2, patch=4, image=(16, 16))
        encode_checkpoint(init_params(cfg, seed=0), {"model": cfg.to_dict()}, tmp_path / "b.ckpt")
        images, labels = make_shapes(12, (16, 16), seed=0, size_range=(5, 9))
        np.savez(tmp_path / "d.npz", train_images=images[:8], train_labels=labels[:8],
                 test_images=images[8:], test_labels=labels[8:])
        code, out, err = run(capsys, "probe", "--backbone", tmp_path / "b.ckpt", "--data", tmp_path / "d.npz",
                             "--mode", "ll-fpn", "--num-classes", 4, "--epochs", 2, "--batch-size", 4)
        assert code == 0, err
        report = json.loads(out)
        assert report["layers"] == [2, 2, 2, 2] and 0 <= report["miou"] <= 1
        assert run(capsys, "probe", "--backbone", tmp_path / "b.ckpt", "--data", tmp_path / "d.npz",
                   "--mode", "layerwise", "--num-classes", 4)[0] == 2


class TestCurate:
    def test_interval_and_report(self, capsys, tmp_path):
        recs = [Record(f"{i}.png", "flir", "infrared", "s", i) for i in range(25)]
        (tmp_path / "m.jsonl").write_text(dump_manifest(CorpusManifest(recs)))
        code, _, _ = run(capsys, "curate", "interval", "--manifest", tmp_path / "m.jsonl",
                         "--out", tmp_path / "o.jsonl", "--report", tmp_path / "r.json")
        assert code == 0
        assert [r.frame_index for r in read_manifest(tmp_path / "o.jsonl").records] == [0, 10, 20]
        assert json.loads((tmp_path / "r.json").read_text())["count"] == 3

    def test_dedup(self, capsys, tmp_path):
        (tmp_path / "m.jsonl").write_text(dump_manifest(CorpusManifest([Record(f"{i}", "x") for i in range(3)])))
        emb = np.array([[1.0, 0.0], [1.0, 0.001], [0.0, 1.0]])
        encode_feature_dump(FeatureStack(emb[None]), tmp_path / "e.fetd")
        code, _, _ = run(capsys, "curate", "dedup", "--manifest", tmp_path / "m.jsonl",
                         "--embeddings", tmp_path / "e.fetd", "--threshold", 0.95, "--out", tmp_path / "o.jsonl")
        assert code == 0
        assert [r.path for r in read_manifest(tmp_path / "o.jsonl").records] == ["0", "2"]
        encode_feature_dump(FeatureStack(np.stack([emb, emb])), tmp_path / "two.fetd")
        assert run(capsys, "curate", "dedup", "--manifest", tmp_path / "m.jsonl",
                   "--embeddings", tmp_path / "two.fetd", "--out", tmp_path / "o.jsonl")[0] == 3

    def test_grayscale_writes_images(self, capsys, tmp_path):
        (tmp_path / "src").mkdir()
        write_image(tmp_path / "src" / "a.png", np.full((2, 2, 3), [255, 0, 0], dtype=np.uint8))
        (tmp_path / "m.jsonl").write_text(dump_manifest(CorpusManifest([Record("a.png", "coco", "rgb")])))
        code, _, _ = run(capsys, "curate", "grayscale", "--manifest", tmp_path / "m.jsonl", "--out",
                         tmp_path / "o.jsonl", "--image-root", tmp_path / "src", "--image-out", tmp_path / "dst")
        assert code == 0
        from nmidistill.curation import read_image
        assert np.all(read_image(tmp_path / "dst" / "a.png") == 76)

    def test_balance(self, capsys, tmp_path):
        recs = [Record(f"{c}{i}", "in1k", "rgb", class_label=c) for c in "ab" for i in range(4)]
        (tmp_path / "m.jsonl").write_text(dump_manifest(CorpusManifest(recs)))
        assert run(capsys, "curate", "balance", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o")[0] == 2
        code, _, err = run(capsys, "curate", "balance", "--manifest", tmp_path / "m.jsonl", "--n", 20,
                           "--out", tmp_path / "o")
        assert code == 2 and "'a'" in err
        assert run(capsys, "curate", "balance", "--manifest", tmp_path / "m.jsonl", "--n", 4,
                   "--out", tmp_path / "o")[0] == 0
        assert len(read_manifest(tmp_path / "o")) == 4

    def test_mix_and_collision(self, capsys, tmp_path):
        (tmp_path / "a.jsonl").write_text(dump_manifest(CorpusManifest([Record("x", "a", "infrared")])))
        (tmp_path / "b.jsonl").write_text(dump_manifest(CorpusManifest([Record("y", "b", "rgb")])))
        code, _, _ = run(capsys, "curate", "mix", "--source", f"a={tmp_path / 'a.jsonl'}",
                         "--source", f"b={tmp_path / 'b.jsonl'}", "--out", tmp_path / "o", "--report", tmp_path / "r")
        assert code == 0 and len(read_manifest(tmp_path / "o")) == 2
        code, _, err = run(capsys, "curate", "mix", "--source", f"a={tmp_path / 'a.jsonl'}",
                           "--source", f"c={tmp_path / 'a.jsonl'}", "--out", tmp_path / "o")
        assert code == 2 and "x" in err

    def test_similarity(self, capsys, tmp_path):
        encode_feature_dump(FeatureStack(np.eye(2)[None]), tmp_path / "s.fetd")
        encode_feature_dump(FeatureStack(np.array([[[1.0, 0.0]]])), tmp_path / "t.fetd")
        code, out, _ = run(capsys, "curate", "similarity", "--set", f"s={tmp_path / 's.fetd'}",
                           "--target", f"t={tmp_path / 't.fetd'}")
        assert code == 0 and json.loads(out)["s"]["t"]["mean"] == pytest.approx(0.5)

    def test_bad_manifest_line(self, capsys, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"path": "a", "source_dataset": "x"}\nnot json\n')
        code, _, err = run(capsys, "curate", "interval", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o")
        assert code == 3 and "2" in err

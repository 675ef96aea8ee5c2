import json
import math

import numpy as np
import pytest

from triplet_watershed import TripletWatershed
from triplet_watershed.cli import main
from triplet_watershed.data import TEST, HsiDataset, SplitMask, load_dataset, save_dataset
from triplet_watershed.nn import MAGIC

FAST = ["--patch-size", "3", "--embed-dim", "8", "--threads", "1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("make-synth", "--out", root / "data", "--h", 24, "--w", 24, "--bands", 5,
               "--classes", 3, "--noise", 0.4, "--unlabeled-frac", 0.1, "--seed", 1) == 0
    assert run("train", "--data", root / "data", "--out", root / "train", "--epochs", 2,
               *FAST) == 0
    return root


class TestMakeSynth:
    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run("make-synth", "--out", tmp_path / name, "--h", 16, "--w", 16,
                       "--seed", 3) == 0
        for f in ("cube.json", "cube.f32", "labels.u16"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert len(list((tmp_path / "a").iterdir())) == 3
        sizes = json.loads(capsys.readouterr().out.splitlines()[0])["class_sizes"]
        assert sum(sizes.values()) == 256

    def test_bad_classes(self, tmp_path):
        assert run("make-synth", "--out", tmp_path, "--classes", 1) == 2

    def test_unlabeled_fraction(self, tmp_path):
        assert run("make-synth", "--out", tmp_path, "--h", 40, "--w", 40,
                   "--unlabeled-frac", 0.1) == 0
        ds = load_dataset(tmp_path)
        assert abs((ds.labels == 0).mean() - 0.1) < 0.01
        header = json.loads((tmp_path / "cube.json").read_text())
        assert header["run_config"]["subcommand"] == "make-synth"


class TestTrain:
    def test_outputs(self, workdir):
        out = workdir / "train"
        assert (out / "model.twnet").read_bytes().startswith(MAGIC)
        lines = (out / "train_log.jsonl").read_text().splitlines()
        assert "run_config" in json.loads(lines[0])
        assert [json.loads(x)["epoch"] for x in lines[1:]] == [0, 1]
        meta = json.loads((out / "split.json").read_text())
        assert meta["run_config"]["split"] == {"fraction": 0.1}

    def test_zero_epochs_is_initialization(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--epochs", 0,
                   "--seed", 5, *FAST) == 0
        est = TripletWatershed.load(tmp_path / "model.twnet")
        fresh = est._build_model(est.pca_.components_.shape[1])
        np.testing.assert_array_equal(est.model_.params, fresh.params)
        np.testing.assert_array_equal(est.model_.get_state(), fresh.get_state())

    def test_same_seed_same_log(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--epochs", 2,
                   *FAST) == 0
        for f in ("train_log.jsonl", "model.twnet", "split.u8"):
            assert (tmp_path / f).read_bytes() == (workdir / "train" / f).read_bytes()

    def test_resume(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--epochs", 1,
                   "--resume", workdir / "train" / "model.twnet", "--threads", 1) == 0
        a = TripletWatershed.load(workdir / "train" / "model.twnet")
        b = TripletWatershed.load(tmp_path / "model.twnet")
        assert b.n_iter_ == a.n_iter_ * 3 // 2

    def test_per_class_and_usage_errors(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--epochs", 0,
                   "--per-class", "5,3", *FAST) == 0
        meta = json.loads((tmp_path / "split.json").read_text())
        assert set(meta["train_counts"].values()) == {5}
        assert run("train", "--data", workdir / "data", "--out", tmp_path,
                   "--per-class", "5") == 2
        assert run("train", "--data", workdir / "data", "--out", tmp_path,
                   "--lr-base", 1, "--lr-max", 0.1) == 2
        assert run("train", "--data", workdir / "data", "--out", tmp_path,
                   "--patch-size", 4) == 2
        assert run("train", "--data", tmp_path / "missing", "--out", tmp_path) == 2
        assert run("train", "--data", workdir / "data", "--out", tmp_path,
                   "--arch", "rnn") == 2


class TestPredict:
    def test_degenerate_ensemble_is_single(self, workdir, tmp_path):
        assert run("predict", "--model", workdir / "train" / "model.twnet", "--data",
                   workdir / "data", "--out", tmp_path, "--n-estimators", 1, "--seed-frac", 1,
                   "--feature-frac", 1, "--votes-csv", tmp_path / "votes.csv") == 0
        ds = load_dataset(workdir / "data")
        pred = np.frombuffer((tmp_path / "pred.u16").read_bytes(), "<u2").reshape(24, 24)
        est = TripletWatershed.load(workdir / "train" / "model.twnet")
        sp = SplitMask.load(workdir / "train" / "split.u8", (24, 24))
        single = est.predict_single(ds.cube, sp.training_target(ds.labels))
        np.testing.assert_array_equal(pred, single)
        meta = json.loads((tmp_path / "pred.json").read_text())
        assert (meta["height"], meta["width"]) == (24, 24)
        assert meta["ensemble"]["n_estimators"] == 1 and meta["orphan_vertices"] == 0
        assert (tmp_path / "votes.csv").read_text().startswith("vertex,class0,class1,class2\n")

    def test_missing_model(self, workdir, tmp_path):
        assert run("predict", "--model", tmp_path / "none.twnet", "--data", workdir / "data",
                   "--out", tmp_path) == 2

    def test_corrupt_model(self, workdir, tmp_path):
        (tmp_path / "bad.twnet").write_bytes(b"garbage")
        assert run("predict", "--model", tmp_path / "bad.twnet", "--data", workdir / "data",
                   "--split", workdir / "train" / "split.u8", "--out", tmp_path) == 2


def write_case(path, truth, pred):
    truth = np.asarray(truth).reshape(1, -1)
    save_dataset(HsiDataset(np.random.default_rng(0).normal(size=truth.shape + (2,)), truth),
                 path / "data")
    SplitMask(np.where(truth != 0, TEST, 0).astype(np.uint8)).save(path / "split.u8")
    (path / "pred.u16").write_bytes(np.asarray(pred, "<u2").tobytes())


class TestEval:
    def test_perfect(self, tmp_path):
        write_case(tmp_path, [1, 2, 2, 1, 0], [1, 2, 2, 1, 0])
        assert run("eval", "--data", tmp_path / "data", "--pred", tmp_path / "pred.u16",
                   "--out", tmp_path / "rep") == 0
        rep = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert rep["oa"] == rep["aa"] == rep["kappa"] == 1.0

    def test_hand_confusion(self, tmp_path):
        truth = [1] * 5 + [2] * 5
        pred = [1, 1, 1, 1, 2, 1, 1, 2, 2, 2]
        write_case(tmp_path, truth, pred)
        assert run("eval", "--data", tmp_path / "data", "--pred", tmp_path / "pred.u16",
                   "--out", tmp_path / "rep") == 0
        rep = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert (rep["oa"], rep["aa"], rep["kappa"]) == (0.7, 0.7, 0.4)
        assert rep["confusion"] == [[4, 1], [2, 3]]
        csv = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert csv == ["class,train_n,test_n,accuracy", "1,0,5,0.8", "2,0,5,0.6"]

    def test_map_toy(self, workdir, tmp_path):
        rng = np.random.default_rng(2)
        save_dataset(HsiDataset(rng.normal(size=(1, 3, 5)), np.array([[1, 1, 2]])),
                     tmp_path / "toy")
        model = workdir / "train" / "model.twnet"
        assert run("eval", "--data", tmp_path / "toy", "--map", "--model", model,
                   "--out", tmp_path / "rep") == 0
        rep = json.loads((tmp_path / "rep" / "report.json").read_text())
        emb = TripletWatershed.load(model).transform(load_dataset(tmp_path / "toy").cube)[0]
        d = lambda a, b: math.dist(emb[a], emb[b])  # noqa: E731
        # queries 0 and 1 each have one relevant neighbour; query 2 is skipped
        ap0 = 1.0 if d(0, 1) <= d(0, 2) else 0.5
        ap1 = 1.0 if d(1, 0) <= d(1, 2) else 0.5
        assert rep["map"] == (ap0 + ap1) / 2
        assert rep["map_skipped"] == 1

    def test_size_mismatch_and_missing(self, tmp_path):
        write_case(tmp_path, [1, 2, 1, 2], [1, 2, 1, 2])
        (tmp_path / "pred.u16").write_bytes(b"\0\0")
        assert run("eval", "--data", tmp_path / "data", "--pred", tmp_path / "pred.u16",
                   "--out", tmp_path / "rep") == 2
        assert run("eval", "--data", tmp_path / "data", "--out", tmp_path / "rep") == 2


class TestGraphStats:
    def test_one_by_three(self, tmp_path, capsys):
        save_dataset(HsiDataset(np.arange(6.0).reshape(1, 3, 2), np.ones((1, 3), int)),
                     tmp_path)
        assert run("graph-stats", "--data", tmp_path, "--dump", tmp_path / "g.txt") == 0
        first = capsys.readouterr().out
        stats = json.loads(first)
        assert stats == {"n_vertices": 3, "n_adjacency_edges": 2, "n_emst_edges": 2,
                         "n_combined": 2, "n_connected_components": 1,
                         "orphan_components": 0}
        assert (tmp_path / "g.txt").read_text().startswith("# vertices 3\n")
        assert run("graph-stats", "--data", tmp_path) == 0
        assert capsys.readouterr().out == first

    def test_empty_labels(self, tmp_path):
        (tmp_path / "cube.json").write_text(json.dumps({"height": 1, "width": 2, "bands": 1}))
        (tmp_path / "cube.f32").write_bytes(np.zeros(2, "<f4").tobytes())
        (tmp_path / "labels.u16").write_bytes(np.zeros(2, "<u2").tobytes())
        assert run("graph-stats", "--data", tmp_path) == 1


def test_run_repeats(workdir, tmp_path):
    assert run("run", "--data", workdir / "data", "--out", tmp_path, "--epochs", 1,
               "--repeats", 2, "--n-estimators", 3, "--map", *FAST) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["runs"]) == 2
    oas = [r["oa"] for r in summary["runs"]]
    assert summary["oa"]["mean"] == pytest.approx(np.mean(oas))
    assert summary["oa"]["std"] == pytest.approx(np.std(oas, ddof=1))
    assert "map" in summary
    for i in range(2):
        assert (tmp_path / f"run_{i}" / "report.json").is_file()

import json

import pytest

from jfe.cli import load_config, main, parse_config
from jfe.errors import ConfigurationError
from jfe.evaluate import Embeddings, read_det_csv, read_report, read_scores
from jfe.nets import load_checkpoint
from jfe.synthcorpus import Manifest, Trial, write_enrollment, write_trials
from jfe.train import read_loss_csv

TINY = """\
# smallest valid experiment
corpus.n_speakers = 2
corpus.n_channels = 2
corpus.n_utterances = 3
model.lstm_cell = 8      # small enough to train in a second
model.lstm_proj = 4
model.attention_dim = 4
model.classifier_hidden = 8
train.method = jfe
train.iterations = 5
train.batch_size = 4
"""


def _run(tmp_path, out, text=TINY):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(text)
    for cmd in ("gen", "train", "extract", "score", "eval"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0, cmd
    return out


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return tmp, _run(tmp, tmp / "run1")


def test_full_pipeline_and_readers(pipeline_run):
    _, out = pipeline_run
    manifest = Manifest.read(out / "corpus" / "manifest.tsv")
    assert len(manifest) == 12
    assert load_checkpoint(out / "model.ckpt").config.n_speakers == 2
    assert len(read_loss_csv(out / "loss.csv")) == 5
    emb = Embeddings.load(out / "embeddings.npz")
    assert emb.nuisance is not None
    scores = read_scores(out / "scores.tsv")
    report = read_report(out / "report.json")
    assert report["n_trials"] == len(scores)
    assert 0 <= report["eer_overall"] <= 1
    assert read_det_csv(out / "det.csv")


def test_reruns_give_identical_reports(pipeline_run):
    tmp, out = pipeline_run
    again = _run(tmp, tmp / "run2")
    assert (again / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert (again / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_eval_on_hand_built_scores(tmp_path):
    trials = [Trial("A", "t1", True, True), Trial("A", "t2", True, True),
              Trial("A", "n1", False, True), Trial("A", "n2", False, True)]
    write_trials(tmp_path / "trials.tsv", trials)
    write_enrollment(tmp_path / "enroll.tsv", {"A": ["e1"]})
    (tmp_path / "scores.tsv").write_text("A\tt1\t0.8\nA\tt2\t0.2\nA\tn1\t0.9\nA\tn2\t0.1\n")
    (tmp_path / "eval.cfg").write_text("paths.trials = trials.tsv\npaths.scores = scores.tsv\n")
    assert main(["eval", "--config", str(tmp_path / "eval.cfg"), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert abs(report["eer_overall"] - 0.5) < 1e-12


def test_unknown_key_names_it(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("train.iterations = 3\ntrian.lr = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) != 0
    err = capsys.readouterr().err
    assert "trian.lr" in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("text, needle", [
    ("train.iterations = many\n", "train.iterations"),
    ("model.arch = cnn\n", "cnn"),
    ("train.method = jfe\nmodel.n_pools = 1\n", "n_pools"),
    ("train.weights = 1,1\n", "weights"),
    ("just some words\n", "section.key"),
])
def test_config_errors(tmp_path, text, needle):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigurationError, match=needle):
        load_config(tmp_path / "c.cfg")


def test_missing_inputs_are_named(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("")
    assert main(["score", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 1
    assert "embedding store" in capsys.readouterr().err
    assert main(["eval", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_parse_values_and_seed_override(tmp_path):
    cfg = parse_config("train.clip_norm = none\ntrain.normalize_inputs = false\nmodel.tdnn_widths = 4,4,4,4,4\n")
    assert cfg.train == {"clip_norm": None, "normalize_inputs": False}
    assert cfg.model["tdnn_widths"] == (4, 4, 4, 4, 4)
    (tmp_path / "c.cfg").write_text("paths.scores = sub/s.tsv\n")
    loaded = load_config(tmp_path / "c.cfg", seed=7)
    assert loaded.corpus_spec().seed == 7 and loaded.train_config().seed == 7
    assert loaded.path("scores", "x") == (tmp_path / "sub" / "s.tsv").resolve()


def test_gradcheck_command(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("")
    assert main(["gradcheck", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "jfe_total" in out and "lstm_proj" in out

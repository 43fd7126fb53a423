import csv

import numpy as np
import pytest

from diverse_vse.cli import main
from diverse_vse.config import RunConfig, config_from_dict, config_from_text
from diverse_vse.errors import ContractError
from diverse_vse.training import load_checkpoint

TINY_MODEL = ["--set", "k=2", "--set", "hidden=8", "--set", "d_w=6", "--set", "batch=4"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["synth-gen", "--out", str(out), "--set", "n_images=20", "--set", "n_concepts=10",
                 "--set", "vocab_per_language=14", "--set", "d_v=8"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus_dir), "--out", str(out), *TINY_MODEL,
                 "--set", "epochs=2", "--set", "lr=1e-3"]) == 0
    return out / "checkpoint.bin"


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.k, cfg.hidden, cfg.alpha, cfg.alpha_d, cfg.beta, cfg.gamma) == (3, 512, 0.2, 0.1, 1.0, 0.6)
        assert (cfg.batch, cfg.epochs, cfg.lr, cfg.lr_after, cfg.lr_switch_epoch) == (128, 20, 2e-4, 2e-5, 15)
        assert (cfg.clip_norm, cfg.diversity_mode, cfg.d_w) == (2.0, "intent", 300)

    def test_unknown_key(self):
        with pytest.raises(ContractError, match="alhpa"):
            config_from_dict({"alhpa": "0.2"})

    def test_text_round_trip(self):
        cfg = RunConfig(k=4, alpha=0.3, decoupled_weight_decay=True, diversity_mode="literal")
        assert config_from_text(cfg.to_text()) == cfg

    def test_comments_and_bad_values(self):
        assert config_from_text("# note\nk = 5  # heads\n").k == 5
        with pytest.raises(ContractError):
            config_from_text("k = many\n")
        with pytest.raises(ContractError):
            RunConfig(alpha=0.0)
        with pytest.raises(ContractError):
            RunConfig(hidden=7)


class TestExitCodes:
    def test_unknown_key_exits_one(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path), "--set", "alhpa=0.2"]) == 1
        assert "alhpa" in capsys.readouterr().err

    def test_unknown_command(self, tmp_path):
        assert main(["fly", "--out", str(tmp_path)]) == 1

    def test_missing_required_flag(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 1

    def test_missing_data_is_data_error(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 2

    def test_corrupt_checkpoint(self, tmp_path, corpus_dir):
        (tmp_path / "bad.bin").write_bytes(b"junk")
        assert main(["eval-retrieval", "--checkpoint", str(tmp_path / "bad.bin"), "--data", str(corpus_dir),
                     "--out", str(tmp_path)]) == 2

    def test_failing_gradcheck_exits_three(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path), "--probes", "5", "--tolerance", "0"]) == 3


class TestCommands:
    def test_gradcheck_default(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path), "--probes", "20"]) == 0
        assert "PASS" in capsys.readouterr().out
        rows = (tmp_path / "gradcheck.tsv").read_text().splitlines()
        assert rows[0].split("\t") == ["param", "index", "analytic", "numeric", "rel_error"]
        assert len(rows) == 21
        assert max(float(r.split("\t")[4]) for r in rows[1:]) <= 1e-4
        assert (tmp_path / "config.resolved.txt").exists()

    def test_synth_gen_files(self, corpus_dir):
        names = sorted(p.name for p in corpus_dir.iterdir())
        assert names == ["captions.de.tsv", "captions.en.tsv", "config.resolved.txt", "features.bin",
                         "test.txt", "train.txt", "val.txt"]

    def test_train_zero_epochs(self, corpus_dir, tmp_path):
        assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), *TINY_MODEL,
                     "--set", "epochs=0"]) == 0
        ckpt = load_checkpoint(tmp_path / "checkpoint.bin")
        assert ckpt.epoch == 0 and ckpt.config.epochs == 0
        assert (tmp_path / "train_log.csv").read_text().startswith("step,l_VG,")
        snapshot = (tmp_path / "config.resolved.txt").read_text()
        assert config_from_text(snapshot) == ckpt.config

    def test_identical_configs_identical_logs(self, corpus_dir, tmp_path):
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--data", str(corpus_dir), "--out", str(out), *TINY_MODEL,
                         "--set", "epochs=1", "--seed", "3"]) == 0
            logs.append((out / "train_log.csv").read_bytes())
        assert logs[0] == logs[1]

    def test_eval_retrieval(self, checkpoint, corpus_dir, tmp_path):
        assert main(["eval-retrieval", "--checkpoint", str(checkpoint), "--data", str(corpus_dir),
                     "--out", str(tmp_path), "--threads", "2"]) == 0
        with open(tmp_path / "retrieval.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["direction"] for r in rows] == ["G->I", "I->G", "E->I", "I->E"]
        assert set(rows[0]) == {"direction", "R@1", "R@5", "R@10", "median_rank"}

    def test_eval_sts(self, checkpoint, corpus_dir, tmp_path, capsys):
        caps = [line.split("\t")[1].strip() for line in
                (corpus_dir / "captions.en.tsv").read_text().splitlines()[:8]]
        lines = [f"{caps[i]}\t{caps[i + 1]}\t{(i * 0.7) % 5:.2f}" for i in range(7)]
        (tmp_path / "sts.tsv").write_text("\n".join(lines) + "\n")
        assert main(["eval-sts", "--checkpoint", str(checkpoint), "--sts", str(tmp_path / "sts.tsv"),
                     "--out", str(tmp_path)]) == 0
        assert "pearson r" in capsys.readouterr().out
        with open(tmp_path / "sts.csv") as fh:
            preds = [float(r["prediction"]) for r in csv.DictReader(fh)]
        assert len(preds) == 7 and all(0 <= p <= 5 for p in preds)

    def test_eval_sts_out_of_range_is_data_error(self, checkpoint, tmp_path):
        (tmp_path / "sts.tsv").write_text("a\tb\t6\n")
        assert main(["eval-sts", "--checkpoint", str(checkpoint), "--sts", str(tmp_path / "sts.tsv"),
                     "--out", str(tmp_path)]) == 2

    def test_export_and_diversity(self, checkpoint, corpus_dir, tmp_path):
        assert main(["export-embeddings", "--checkpoint", str(checkpoint), "--data", str(corpus_dir),
                     "--out", str(tmp_path)]) == 0
        n_test = len((corpus_dir / "test.txt").read_text().split())
        assert len((tmp_path / "embeddings.tsv").read_text().splitlines()) == 1 + 3 * n_test
        assert main(["diversity-report", "--checkpoint", str(checkpoint), "--data", str(corpus_dir),
                     "--out", str(tmp_path), "--split", "train"]) == 0
        with open(tmp_path / "diversity.csv") as fh:
            rows = {r["stream"]: float(r["mean_inter_head_cosine"]) for r in csv.DictReader(fh)}
        assert set(rows) == {"V", "E", "G"} and all(-1 <= v <= 1 for v in rows.values())

    def test_diversity_mode_flag(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path), "--probes", "3",
                     "--diversity-mode", "literal"]) == 0
        assert "diversity_mode = literal" in (tmp_path / "config.resolved.txt").read_text()

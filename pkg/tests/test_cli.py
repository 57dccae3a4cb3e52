import json

import pytest

from unlearnlab import cli

TINY = {
    "model": {"vocab_size": 32, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq": 16},
    "seq_len": 16, "n_train": 24, "n_val": 4, "n_heldout": 4, "forget_count": 4, "batch_size": 4,
    "pretrain_lr": 0.01, "pretrain_max_epochs": 300, "metric_n": 2, "lr": 0.003,
    "eval_retain_count": 8, "fisher_retain_count": 8, "max_unlearn_epochs": 2,
}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))

    def call(*args):
        return cli.main([*args, "--config", str(cfg), "--out", str(tmp_path / "run")])

    return call, tmp_path / "run"


class TestConfigResolution:
    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"lr": 0.5, "seed": 3}))
        args = cli.build_parser().parse_args(
            ["unlearn", "--config", str(tmp_path / "c.json"), "--seed", "9", "--adapter", "flora",
             "--rank", "4", "--targets", "q,ffn", "--max-epochs", "7", "--metric-n", "3", "--precision", "f32"])
        cfg = cli.resolve_config(args)
        assert cfg.lr == 0.5 and cfg.seed == 9 and cfg.max_unlearn_epochs == 7 and cfg.metric_n == 3
        assert cfg.precision == "f32"
        assert cfg.adapter.init == "flora" and cfg.adapter.rank == 4
        assert cfg.adapter.targets == ("Q", "FFN_in", "FFN_out")

    def test_adapter_none(self):
        args = cli.build_parser().parse_args(["unlearn", "--adapter", "none"])
        assert cli.resolve_config(args).adapter is None

    def test_bad_choice_exits(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["unlearn", "--method", "sgd"])


class TestCommands:
    def test_pipeline(self, run, capsys):
        call, out = run
        assert call("gen") == 0
        assert (out / "corpora.ulab").exists()
        assert call("pretrain") == 0
        assert call("fisher") == 0
        assert (out / "fisher_forget.ulab").exists() and (out / "fisher_retain.ulab").exists()
        code = call("unlearn", "--method", "ihl-retain", "--adapter", "flora", "--rank", "2")
        assert code in (0, 2)
        summary = json.loads((out / "summary.json").read_text())
        assert (code == 0) == (summary["epochs_to_unlearn"] != "failed")
        assert (out / "report.csv").read_text().startswith("epoch,el_n,ma,ppl_retain")
        capsys.readouterr()
        assert call("eval") == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["ma"] >= 0.95

    def test_failed_unlearning_exit_code(self, run):
        call, _ = run
        call("pretrain")
        assert call("unlearn", "--method", "ihl", "--lr", "1e-6", "--max-epochs", "1") == 2

    def test_success_exit_code(self, run):
        call, _ = run
        call("pretrain")
        assert call("unlearn", "--method", "ga", "--lr", "0.02", "--max-epochs", "5") == 0

    def test_error_exit_code(self, run, capsys):
        call, _ = run
        assert call("eval") == 1
        assert "error" in capsys.readouterr().err

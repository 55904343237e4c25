import numpy as np
import pytest

from tcnbind import cli
from tcnbind.data import load_dataset
from tcnbind.training import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def synth_file(tmp_path):
    path = tmp_path / "ds.tsv"
    assert run("synth", "--labels", 2, "--n", 60, "--length", 32,
               "--seed", 3, "--noise", 0.02, "--out", path) == 0
    return path


@pytest.fixture
def pipeline_config(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text(
        "cnn_layers = 1\ncnn_kernels = 8\ntcn_blocks = 2\ntcn_channels = 8\n"
        "kernel_size = 6\nmlp_hidden = 16\ndropout = 0.0\n"
        "batch_size = 16\nepochs = 3\nlr_max = 0.005\npatience = 5\nseed = 1\n")
    return path


class TestSynthAndSplit:
    def test_synth_record_count_and_header(self, tmp_path):
        out = tmp_path / "ds.tsv"
        assert run("synth", "--labels", 4, "--n", 2000, "--length", 256,
                   "--seed", 7, "--out", out) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# tcnbind ")
        assert "seed=7" in lines[0]
        assert sum(1 for l in lines if l and not l.startswith("#")) == 2000
        ds = load_dataset(out)
        assert ds.num_labels == 4 and len(ds) == 2000

    def test_split_sizes_follow_protocol(self, tmp_path):
        ds_path = tmp_path / "d.tsv"
        run("synth", "--labels", 2, "--n", 100, "--length", 24, "--seed", 1,
            "--out", ds_path)
        assert run("split", "--dataset", ds_path, "--train-frac", 0.8,
                   "--val-frac", 0.2, "--seed", 5,
                   "--out-prefix", tmp_path / "d") == 0
        sizes = [len(load_dataset(tmp_path / f"d.{part}.tsv"))
                 for part in ("train", "val", "test")]
        assert sizes == [64, 16, 20]

    def test_custom_motifs_and_co_occurrence(self, tmp_path):
        out = tmp_path / "ds.tsv"
        assert run("synth", "--n", 50, "--length", 30, "--seed", 2,
                   "--motif", "A=CACGTG", "--motif", "B=TGACTCA",
                   "--co-occur", "A,B=1.0", "--out", out) == 0
        ds = load_dataset(out)
        assert (ds.labels == 1).all()


class TestTrainEvaluatePipeline:
    def test_full_pipeline(self, tmp_path, synth_file, pipeline_config):
        ckpt_path = tmp_path / "model.ckpt"
        assert run("train", "--dataset", synth_file, "--config", pipeline_config,
                   "--out", ckpt_path) == 0
        ckpt = load_checkpoint(ckpt_path)
        assert ckpt.metadata["tool_version"]
        assert ckpt.metadata["seed"] == "1"

        metrics_path = tmp_path / "metrics.txt"
        assert run("evaluate", "--dataset", synth_file, "--model", ckpt_path,
                   "--out", metrics_path) == 0
        text = metrics_path.read_text()
        assert text.startswith("# tcnbind ")
        assert "summary.ap_micro = " in text

        attr_path = tmp_path / "attr.txt"
        assert run("attribute", "--dataset", synth_file, "--model", ckpt_path,
                   "--label", "TF0", "--steps", 8, "--baselines", 2,
                   "--max-samples", 2, "--out", attr_path) == 0
        body = attr_path.read_text().splitlines()
        assert any(line.startswith(">") and " TF0 " in line for line in body)

        pwm_path = tmp_path / "pwms.txt"
        assert run("motifs", "--dataset", synth_file, "--model", ckpt_path,
                   "--label", "TF0", "--steps", 6, "--baselines", 2,
                   "--max-seqs", 6, "--null-count", 3, "--window", 9,
                   "--out", pwm_path) == 0
        assert "MOTIF TF0" in pwm_path.read_text()

    def test_train_is_byte_reproducible(self, tmp_path, synth_file,
                                        pipeline_config):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        for out in (a, b):
            assert run("train", "--dataset", synth_file,
                       "--config", pipeline_config, "--out", out) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_flag_overrides_config(self, tmp_path, synth_file, pipeline_config):
        out = tmp_path / "o.ckpt"
        assert run("train", "--dataset", synth_file, "--config", pipeline_config,
                   "--set", "epochs=1", "--set", "mlp_hidden=12",
                   "--out", out) == 0
        assert load_checkpoint(out).config.mlp_hidden == 12

    def test_evaluate_registry_mismatch_is_data_error(self, tmp_path,
                                                      synth_file,
                                                      pipeline_config):
        ckpt_path = tmp_path / "model.ckpt"
        run("train", "--dataset", synth_file, "--config", pipeline_config,
            "--set", "epochs=1", "--out", ckpt_path)
        other = tmp_path / "other.tsv"
        run("synth", "--labels", 3, "--n", 20, "--length", 32, "--seed", 9,
            "--out", other)
        assert run("evaluate", "--dataset", other, "--model", ckpt_path,
                   "--out", tmp_path / "m.txt") == 2


class TestBuildDataset:
    def test_two_peak_files(self, tmp_path):
        genome = tmp_path / "g.fa"
        rng = np.random.default_rng(0)
        genome.write_text(">chr1\n" + "".join(
            "ACGT"[i] for i in rng.integers(0, 4, 400)) + "\n")
        myc = tmp_path / "myc.bed"
        myc.write_text("chr1\t100\t180\nchr1\t240\t300\n")
        e2f = tmp_path / "e2f.bed"
        e2f.write_text("track name=x\nchr1\t150\t220\n")
        out = tmp_path / "ds.tsv"
        assert run("build-dataset", "--peaks", f"MYC={myc}",
                   "--peaks", f"E2F1={e2f}", "--genome", genome,
                   "--window", 40, "--out", out) == 0
        ds = load_dataset(out)
        assert ds.label_names == ["MYC", "E2F1"]
        assert len(ds) > 0
        assert all(len(s) == 40 for s in ds.sequences)
        assert ds.labels.max() == 1

    def test_missing_genome_is_data_error(self, tmp_path):
        bed = tmp_path / "a.bed"
        bed.write_text("chr9\t0\t10\n")
        genome = tmp_path / "g.fa"
        genome.write_text(">chr1\nACGTACGT\n")
        assert run("build-dataset", "--peaks", f"A={bed}", "--genome", genome,
                   "--window", 4, "--out", tmp_path / "o.tsv") == 2


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert run("synth", "--nope", "1") == 1

    def test_unknown_config_key_is_usage_error(self, tmp_path, synth_file):
        bad = tmp_path / "bad.cfg"
        bad.write_text("gamma = 3\n")
        assert run("train", "--dataset", synth_file, "--config", bad,
                   "--out", tmp_path / "x.ckpt") == 1

    def test_malformed_dataset_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("#labels\tA\nrecord-without-tabs\n")
        assert run("split", "--dataset", bad, "--out-prefix", tmp_path / "x") == 2

    def test_divergence_is_numerical_abort(self, tmp_path, synth_file,
                                           pipeline_config):
        assert run("train", "--dataset", synth_file, "--config", pipeline_config,
                   "--set", "lr_max=1e30", "--set", "epochs=4",
                   "--out", tmp_path / "x.ckpt") == 3

    def test_conflicting_derived_key_is_data_error(self, tmp_path, synth_file):
        assert run("train", "--dataset", synth_file, "--set", "num_labels=7",
                   "--out", tmp_path / "x.ckpt") == 2

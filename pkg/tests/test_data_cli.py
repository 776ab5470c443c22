import gzip
import struct

import numpy as np
import pytest

from butterfly_hessian import experiments as ex
from butterfly_hessian.cli import main
from butterfly_hessian.data import (
    DataFormatError,
    DatasetMatrix,
    covariance,
    load_dataset,
    next_power_of_two,
    pad_columns,
    pad_matrix,
    parse_idx,
    read_csv_matrix,
    read_idx_images,
)


def idx_images(pixels: np.ndarray) -> bytes:
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + pixels.astype(np.uint8).tobytes()


class TestIdx:
    def test_images_scaled(self, tmp_path):
        px = np.arange(2 * 3 * 4).reshape(2, 3, 4) * 10
        (tmp_path / "img.idx").write_bytes(idx_images(px))
        X = read_idx_images(tmp_path / "img.idx")
        assert X.shape == (2, 12)
        np.testing.assert_array_equal(X, px.reshape(2, 12) / 255.0)

    def test_gzip(self, tmp_path):
        px = np.full((1, 2, 2), 255)
        with gzip.open(tmp_path / "img.idx.gz", "wb") as fh:
            fh.write(idx_images(px))
        np.testing.assert_array_equal(read_idx_images(tmp_path / "img.idx.gz"), [[1.0, 1.0, 1.0, 1.0]])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(struct.pack(">IIII", 0x00000801, 1, 1, 1) + b"\0")
        with pytest.raises(DataFormatError) as info:
            read_idx_images(tmp_path / "x")
        assert info.value.offset == 0

    def test_truncated_payload(self):
        buf = idx_images(np.zeros((2, 2, 2)))[:-3]
        with pytest.raises(DataFormatError) as info:
            parse_idx(buf)
        assert info.value.offset == len(buf)

    def test_truncated_header(self):
        with pytest.raises(DataFormatError):
            parse_idx(struct.pack(">I", 0x00000803) + b"\0\0")

    def test_generic_types(self):
        buf = struct.pack(">II", 0x00000D01, 3) + np.array([1.5, -2, 3], dtype=">f4").tobytes()
        np.testing.assert_array_equal(parse_idx(buf), [1.5, -2.0, 3.0])


class TestCsv:
    def test_header_skipped(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b\n1,2\n3.5,-4e-1\n")
        np.testing.assert_array_equal(read_csv_matrix(tmp_path / "d.csv"), [[1, 2], [3.5, -0.4]])

    def test_ragged(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2\n3\n")
        with pytest.raises(DataFormatError) as info:
            read_csv_matrix(tmp_path / "d.csv")
        assert info.value.offset == 2

    def test_non_numeric_body(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2\nx,3\n")
        with pytest.raises(DataFormatError):
            read_csv_matrix(tmp_path / "d.csv")

    def test_empty(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b\n")
        with pytest.raises(DataFormatError):
            read_csv_matrix(tmp_path / "d.csv")

    def test_load_dataset(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2,3\n")
        ds = load_dataset(tmp_path / "d.csv", "csv")
        assert (ds.rows, ds.cols, ds.n_raw) == (1, 3, 3)


class TestPaddingAndCovariance:
    @pytest.mark.parametrize("k,n", [(1, 2), (2, 2), (3, 4), (784, 1024), (1024, 1024)])
    def test_next_power_of_two(self, k, n):
        assert next_power_of_two(k) == n

    def test_pad(self):
        X = np.ones((2, 3))
        assert pad_columns(X, 4).shape == (2, 4)
        M = pad_matrix(np.eye(3), 4)
        assert M[3, 3] == 0 and M[2, 2] == 1

    def test_covariance_uses_one_over_m(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        C, mean = covariance(X)
        np.testing.assert_array_equal(C, [[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(mean, [0.0, 0.0])

    def test_padding_does_not_touch_original_block(self):
        rng = np.random.default_rng(0)
        data = DatasetMatrix(rng.standard_normal((200, 3)), "test", 3)
        res = ex.covariance_run(data, epochs=5, m=200, test_m=50)
        H = res.model.to_dense()
        # padded oracle rows and columns are zero, so they contribute nothing to the 3x3 block
        x = np.zeros(4)
        x[:3] = rng.standard_normal(3)
        y = res.model.forward(x)
        np.testing.assert_allclose(y[:3], H[:3, :] @ x, atol=1e-12)

    def test_constant_rows_report_no_valid_samples(self):
        data = DatasetMatrix(np.ones((10, 4)), "const", 4)
        res = ex.covariance_run(data, epochs=2, m=20, test_m=20)
        assert np.isnan(res.final_angle)


class TestCli:
    def test_synth_approx_n2_exact(self, tmp_path, capsys):
        assert main(["synth-approx", "--n", "2", "--n-mu", "0", "--epochs", "100", "--out", str(tmp_path)]) == 0
        angle = float(capsys.readouterr().out.split(":")[1].split()[0])
        assert angle < 1.0
        for name in ("trace.csv", "angle.svg", "H.csv", "model.bin"):
            assert (tmp_path / name).exists()

    def test_deterministic_csv(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth-approx", "--n", "8", "--epochs", "5", "--m", "50", "--test-m", "50", "--out", str(tmp_path / sub)]) == 0
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
        assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()

    def test_rotation_n2(self, tmp_path, capsys):
        assert main(["rotation", "--n", "2", "--epochs", "50", "--out", str(tmp_path)]) == 0
        angle = float(capsys.readouterr().out.splitlines()[0].split(":")[1].split()[0])
        assert angle < 0.1

    def test_bench_counts(self, tmp_path):
        assert main(["bench", "--sizes", "1024", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[1] == "1024,41984,22528,20480,1048576"

    def test_bench_counts_byte_stable(self, tmp_path):
        for sub in ("a", "b"):
            main(["bench", "--sizes", "8,64", "--out", str(tmp_path / sub)])
        assert (tmp_path / "a" / "bench.csv").read_bytes() == (tmp_path / "b" / "bench.csv").read_bytes()

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# tiny run\nn = 4\nepochs=3\nm=20\ntest_m = 20\n")
        assert main(["synth-approx", "--config", str(cfg), "--n-mu", "1", "--epochs", "2", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "trace.csv").read_text().splitlines()
        assert len(rows) == 1 + 2
        H = np.loadtxt(tmp_path / "H.csv", delimiter=",")
        assert H.shape == (4, 4)

    @pytest.mark.parametrize(
        "text", ["bogus_key = 1\n", "epochs = many\n", "no equals sign\n"]
    )
    def test_config_errors_exit_2(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        assert main(["synth-approx", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["rotation", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2

    def test_invalid_values_exit_2(self, tmp_path):
        assert main(["rotation", "--n", "6", "--out", str(tmp_path)]) == 2
        assert main(["synth-approx", "--n", "4", "--n-mu", "9", "--out", str(tmp_path)]) == 2
        assert main(["covariance", "--out", str(tmp_path)]) == 2

    def test_bad_idx_exit_3(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 8)
        assert main(["covariance", "--data", str(tmp_path / "bad.idx"), "--out", str(tmp_path)]) == 3

    def test_covariance_idx(self, tmp_path):
        rng = np.random.default_rng(0)
        (tmp_path / "img.idx").write_bytes(idx_images(rng.integers(0, 256, (100, 2, 3))))
        assert main(["covariance", "--data", str(tmp_path / "img.idx"), "--epochs", "3", "--m", "100", "--out", str(tmp_path)]) == 0
        report = (tmp_path / "report.txt").read_text()
        assert "dimension: 6 (padded to 8)" in report
        for name in ("covariance_true.svg", "covariance_approx.svg", "model.bin", "trace.csv"):
            assert (tmp_path / name).exists()

    def test_covariance_constant_csv(self, tmp_path, capsys):
        (tmp_path / "c.csv").write_text("1,2\n1,2\n1,2\n")
        assert main(["covariance", "--data", str(tmp_path / "c.csv"), "--format", "csv", "--epochs", "2", "--m", "10", "--out", str(tmp_path)]) == 0
        assert "no valid samples" in capsys.readouterr().out

    def test_optimize_outputs(self, tmp_path, capsys):
        assert main(["optimize", "--n", "16", "--steps", "50", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "log_track_hessian.csv").exists()
        assert (tmp_path / "log_plain_gd.csv").exists()
        assert (tmp_path / "compare.svg").read_text().startswith("<svg")

    def test_optimize_beta_zero(self, tmp_path):
        assert main(["optimize", "--n", "8", "--steps", "5", "--beta", "0", "--mode", "plain_gd", "--gd-beta", "0", "--out", str(tmp_path)]) == 0
        losses = {line.split(",")[1] for line in (tmp_path / "log_plain_gd.csv").read_text().splitlines()[1:]}
        assert len(losses) == 1

    def test_nmu_sweep(self, tmp_path):
        assert main(["nmu-sweep", "--n", "4", "--n-mus", "0,2,4", "--seeds", "2", "--epochs", "2", "--m", "20", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "sweep.csv").read_text().splitlines()
        assert rows[0] == "n_mu,seed,final_angle_deg"
        assert [r.split(",")[0] for r in rows[1:]] == ["0", "0", "2", "2", "4", "4"]
        assert (tmp_path / "sweep.svg").exists()

import struct

import numpy as np
import pytest

import deepembed.data_io as dio
from deepembed import nn


def write_idx_images(path, images):
    """images: (n, rows, cols) uint8."""
    n, r, c = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", dio.IDX_IMAGE_MAGIC, n, r, c))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", dio.IDX_LABEL_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


class TestIdx:
    def test_round_trip_with_labels(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(10, 5, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, size=10, dtype=np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        write_idx_images(ip, imgs)
        write_idx_labels(lp, labels)
        ds = dio.load_idx(ip, lp)
        assert ds.X.shape == (10, 20)
        assert np.array_equal(ds.X, imgs.reshape(10, 20) / 255.0)
        assert np.array_equal(ds.labels, labels)
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0

    def test_labels_optional(self, tmp_path, rng):
        ip = tmp_path / "img.idx"
        write_idx_images(ip, rng.integers(0, 256, (3, 2, 2), dtype=np.uint8))
        ds = dio.load_idx(ip)
        assert ds.labels is None

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(struct.pack(">IIII", 0x00000805, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(ValueError, match="magic"):
            dio.load_idx(p)

    def test_truncated_reports_offset(self, tmp_path):
        p = tmp_path / "trunc.idx"
        p.write_bytes(struct.pack(">IIII", dio.IDX_IMAGE_MAGIC, 10, 28, 28)
                      + b"\x00" * 100)
        with pytest.raises(ValueError, match="byte"):
            dio.load_idx(p)

    def test_count_mismatch(self, tmp_path, rng):
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        write_idx_images(ip, rng.integers(0, 256, (4, 2, 2), dtype=np.uint8))
        write_idx_labels(lp, rng.integers(0, 10, 5, dtype=np.uint8))
        with pytest.raises(ValueError, match="4 images but 5 labels"):
            dio.load_idx(ip, lp)


class TestCsv:
    def test_plain_table(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3,4\n5,6\n")
        ds = dio.load_csv(p)
        assert np.array_equal(ds.X, [[1, 2], [3, 4], [5, 6]])
        assert ds.labels is None

    def test_string_labels_first_appearance(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2,a\n3,4,b\n5,6,a\n")
        ds = dio.load_csv(p, label_column=2)
        assert np.array_equal(ds.labels, [0, 1, 0])
        assert ds.label_names == ["a", "b"]
        assert ds.X.shape == (3, 2)

    def test_label_by_header_name(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("f1,f2,cls\n1,2,dog\n3,4,cat\n")
        ds = dio.load_csv(p, label_column="cls", has_header=True)
        assert np.array_equal(ds.labels, [0, 1])
        assert ds.label_names == ["dog", "cat"]

    def test_ragged_rejected(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3\n")
        with pytest.raises(ValueError, match="row 2"):
            dio.load_csv(p)

    def test_non_numeric_cell_located(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3,oops\n")
        with pytest.raises(ValueError, match="row 2, column 2"):
            dio.load_csv(p)

    def test_missing_label_name(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="not in header"):
            dio.load_csv(p, label_column="cls", has_header=True)


class TestNormalize:
    def test_none_is_identity(self, rng):
        ds = dio.Dataset(X=rng.normal(size=(5, 3)))
        out = dio.normalize(ds, "none")
        assert np.array_equal(out.X, ds.X)

    def test_zscore_constant_feature_is_zero(self, rng):
        X = rng.normal(size=(10, 3))
        X[:, 1] = 4.2
        out = dio.normalize(dio.Dataset(X=X), "zscore")
        assert np.array_equal(out.X[:, 1], np.zeros(10))
        assert np.all(np.isfinite(out.X))
        assert abs(out.X[:, 0].mean()) < 1e-12
        assert abs(out.X[:, 0].std() - 1.0) < 1e-12

    def test_minmax_range(self, rng):
        X = rng.normal(size=(10, 3)) * 5
        out = dio.normalize(dio.Dataset(X=X), "minmax")
        assert out.X.min() >= 0.0 and out.X.max() <= 1.0

    def test_stored_transform_replays_identically(self, rng):
        X = rng.normal(size=(10, 4))
        out = dio.normalize(dio.Dataset(X=X), "zscore")
        replay = dio.apply_normalizer(out.norm, X)
        assert np.array_equal(out.X, replay)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError, match="mode"):
            dio.normalize(dio.Dataset(X=rng.normal(size=(4, 2))), "scale")


def trained_artifact(rng, seed=3):
    spec = nn.NetworkSpec(input_dim=6, hidden_dims=(5, 4), taps={"m": 1},
                          output_dim=2)
    params = nn.init_params(spec, seed)
    nn.forward(params, rng.random((12, 6)), mode="train")  # move bn stats
    norm = dio.fit_normalizer(rng.random((12, 6)), "zscore")
    return dio.ModelArtifact(params=params, config={"seed": str(seed)},
                             norm=norm)


class TestModelContainer:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        art = trained_artifact(rng)
        p1, p2 = tmp_path / "a.drem", tmp_path / "b.drem"
        dio.save_model(art, p1)
        loaded = dio.load_model(p1)
        dio.save_model(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for (n1, a), (n2, b) in zip(art.params.named_trainable(),
                                    loaded.params.named_trainable()):
            assert n1 == n2 and np.array_equal(a, b)
        for la, lb in zip(art.params.layers, loaded.params.layers):
            if la.has_bn:
                assert np.array_equal(la.bn_running_mean, lb.bn_running_mean)
                assert np.array_equal(la.bn_running_var, lb.bn_running_var)
                assert la.bn_momentum == lb.bn_momentum
        assert loaded.config == art.config
        assert loaded.norm.mode == "zscore"
        assert np.array_equal(loaded.norm.offset, art.norm.offset)

    def test_corrupted_byte_fails_checksum(self, tmp_path, rng):
        p = tmp_path / "a.drem"
        dio.save_model(trained_artifact(rng), p)
        raw = bytearray(p.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(dio.ModelFormatError, match="checksum"):
            dio.load_model(p)

    def test_bad_magic_and_version(self, tmp_path, rng):
        import zlib
        p = tmp_path / "a.drem"
        body = b"XREM" + struct.pack("<II", 1, 0)
        p.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(dio.ModelFormatError, match="magic"):
            dio.load_model(p)
        body = b"DREM" + struct.pack("<II", 9, 0)
        p.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(dio.ModelFormatError, match="version"):
            dio.load_model(p)

    def test_loaded_model_embeds_identically(self, tmp_path, rng):
        from deepembed.trainer import embed
        art = trained_artifact(rng)
        batch = rng.random((20, 6))
        p = tmp_path / "a.drem"
        dio.save_model(art, p)
        loaded = dio.load_model(p)
        assert np.array_equal(embed(art.params, batch),
                              embed(loaded.params, batch))


class TestExports:
    def test_embedding_csv_lines(self, tmp_path):
        p = tmp_path / "e.csv"
        Y = np.array([[1.5, -2.0], [0.25, 3.0]])
        dio.export_embedding(Y, np.array([0, 1]), p)
        parts = p.read_text().split("\n")
        assert len(parts) == 4  # header, two rows, trailing newline
        assert parts[0] == "x,y,label"
        assert parts[1] == "1.5,-2.0,0"

    def test_embedding_csv_deterministic(self, tmp_path, rng):
        Y = rng.normal(size=(10, 2))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        dio.export_embedding(Y, None, p1)
        dio.export_embedding(Y.copy(), None, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_embedding_round_trip(self, tmp_path, rng):
        Y = rng.normal(size=(7, 2))
        labels = rng.integers(0, 3, size=7)
        p = tmp_path / "e.csv"
        dio.export_embedding(Y, labels, p)
        Y2, l2 = dio.read_embedding_csv(p)
        assert np.array_equal(Y, Y2)  # repr round-trips float64 exactly
        assert np.array_equal(labels, l2)

    def test_svg_deterministic_and_colored(self, tmp_path, rng):
        Y = rng.normal(size=(30, 2))
        labels = np.arange(30) % 10
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        dio.export_scatter_svg(Y, labels, p1)
        dio.export_scatter_svg(Y.copy(), labels.copy(), p2)
        data = p1.read_text()
        assert p1.read_bytes() == p2.read_bytes()
        assert data.startswith("<?xml")
        assert 'version="1.1"' in data
        for color in dio.PALETTE:
            assert color in data  # ten classes touch all ten palette colors
        assert data.count("<circle") == 30

    def test_svg_requires_2d(self, tmp_path, rng):
        with pytest.raises(ValueError, match="N x 2"):
            dio.export_scatter_svg(rng.normal(size=(5, 3)), None,
                                   tmp_path / "a.svg")

    def test_svg_unlabeled(self, tmp_path, rng):
        p = tmp_path / "a.svg"
        dio.export_scatter_svg(rng.normal(size=(5, 2)), None, p)
        assert p.read_text().count("<circle") == 5


class TestConfig:
    def test_defaults_cover_training_knobs(self):
        cfg = dio.parse_config_text("")
        assert cfg["batch_size"] == 2500
        assert cfg["perplexity"] == 30.0
        assert cfg["alpha"] == 1.0
        assert cfg["umap_k"] == 15
        assert cfg["lr"] == 1e-3
        assert cfg["beta1"] == 0.9 and cfg["beta2"] == 0.999
        assert cfg["adam_epsilon"] == 1e-7

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            dio.parse_config_text("batchsize = 100\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError, match="bad value"):
            dio.parse_config_text("batch_size = tiny\n")

    def test_comments_and_blanks(self):
        cfg = dio.parse_config_text("# a comment\n\nseed = 5  # inline\n")
        assert cfg["seed"] == 5

    def test_round_trip(self):
        cfg = dio.parse_config_text("perplexity = 12.5\nnormalize = zscore\n")
        again = dio.parse_config_text(dio.format_config(cfg))
        assert again == cfg

    def test_stage_plan_parsing(self):
        plan = dio.parse_stage_plan("tsne:raw:100,umap:dense100:50")
        assert [p.loss_kind for p in plan] == ["tsne", "umap"]
        assert [p.affinity_source for p in plan] == ["raw", "dense100"]
        assert [p.epochs for p in plan] == [100, 50]
        with pytest.raises(ValueError, match="loss:source:epochs"):
            dio.parse_stage_plan("tsne:raw")

    def test_default_plan_matches_trainer(self):
        from deepembed.trainer import default_plan
        assert dio.parse_stage_plan(dio.CONFIG_DEFAULTS["stage_plan"]) == \
            default_plan()

    def test_build_train_config(self):
        cfg = dio.parse_config_text("perplexity = 10\numap_k = 5\nseed = 2\n")
        tc = dio.build_train_config(cfg)
        assert tc.perplexity.perplexity == 10.0
        assert tc.umap_graph.k == 5
        assert tc.seed == 2
        assert len(tc.plan) == 5

    def test_build_spec(self):
        cfg = dio.parse_config_text("hidden_dims = 8,4\ntaps = a:0,b:1\n")
        spec = dio.build_spec(cfg, input_dim=6)
        assert spec.hidden_dims == (8, 4)
        assert spec.taps == {"a": 0, "b": 1}


class TestSniff:
    def test_sniff_idx_vs_csv(self, tmp_path, rng):
        ip = tmp_path / "img.idx"
        write_idx_images(ip, rng.integers(0, 256, (2, 2, 2), dtype=np.uint8))
        cp = tmp_path / "t.csv"
        cp.write_text("1,2\n3,4\n")
        assert dio.sniff_format(ip) == "idx"
        assert dio.sniff_format(cp) == "csv"

    def test_load_dataset_with_separate_labels_csv(self, tmp_path):
        dp = tmp_path / "d.csv"
        dp.write_text("1,2\n3,4\n5,6\n")
        lp = tmp_path / "l.csv"
        lp.write_text("x\ny\nx\n")
        ds = dio.load_dataset(dp, lp)
        assert np.array_equal(ds.labels, [0, 1, 0])

import pytest

from fewshot_splat.config import (DepthFitConfig, TrainConfig, config_from_mapping, default_threads,
                                  load_train_config, read_key_values, read_manifest, write_config, write_manifest,
                                  SceneManifest)
from fewshot_splat.errors import InputError


def test_defaults_are_the_few_shot_schedule():
    config = TrainConfig().validate()
    assert config.sh_degree == 1
    assert config.opacity_reset is False
    assert config.early_stop is True
    assert (config.lambda_ssim, config.lambda_depth, config.lambda_smooth) == (0.2, 0.1, 0.01)


def test_key_value_parsing_ignores_comments(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text("# schedule\nmax_iterations = 200   # short\n\nlambda_depth=0.5\n")
    assert read_key_values(path) == {"max_iterations": "200", "lambda_depth": "0.5"}


def test_flags_override_file(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text("max_iterations = 200\nlambda_depth = 0.5\ndepth_loss = no\nbackground = 1, 1, 1\n")
    config = load_train_config(path, {"lambda_depth": 0.25})
    assert config.max_iterations == 200
    assert config.lambda_depth == 0.25
    assert config.depth_loss is False
    assert config.background == (1.0, 1.0, 1.0)


def test_written_config_reads_back(tmp_path):
    original = TrainConfig(max_iterations=321, background=(0.5, 0.25, 1.0), threads=3, depth_target="sparse")
    path = tmp_path / "config.txt"
    write_config(original, path)
    assert load_train_config(path) == original


def test_unknown_key_is_rejected():
    with pytest.raises(InputError, match="lambda_color"):
        config_from_mapping(TrainConfig, {"lambda_color": "1"})


@pytest.mark.parametrize("values", [
    {"max_iterations": "-1"},
    {"lambda_ssim": "1.5"},
    {"feature_lr": "0"},
    {"sh_degree": "3"},
    {"depth_target": "everywhere"},
    {"early_stop": "maybe"},
    {"max_iterations": "ten"},
])
def test_invalid_values_are_rejected(values):
    with pytest.raises(InputError):
        config_from_mapping(TrainConfig, values)


def test_depth_fit_config_validation():
    assert config_from_mapping(DepthFitConfig, {"weighting": "residual", "min_views": "2"}).min_views == 2
    with pytest.raises(InputError):
        config_from_mapping(DepthFitConfig, {"weighting": "median"})
    with pytest.raises(InputError):
        config_from_mapping(DepthFitConfig, {"canny_low": "0.5", "canny_high": "0.2"})


def test_missing_config_file(tmp_path):
    with pytest.raises(InputError, match="not found"):
        load_train_config(tmp_path / "absent.txt")


def test_manifest_paths_resolve_against_its_directory(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("scene = fern\nimages = images\ncolmap = sparse/0\ndepths = depth\n"
                    "depth_format = png16\ndepth_scale = 0.0005\n")
    manifest = read_manifest(path)
    assert manifest.scene == "fern"
    assert manifest.images == tmp_path / "images"
    assert manifest.colmap == tmp_path / "sparse" / "0"
    assert manifest.depths == tmp_path / "depth"
    assert manifest.depth_format == "png16"
    assert manifest.depth_scale == 0.0005


def test_manifest_round_trip(tmp_path):
    manifest = SceneManifest(scene="room", images=tmp_path / "imgs", colmap=tmp_path / "model")
    write_manifest(manifest, tmp_path / "scene.txt")
    loaded = read_manifest(tmp_path / "scene.txt")
    assert loaded == manifest
    assert loaded.depths is None


@pytest.mark.parametrize("text, message", [
    ("images = a\ncolmap = b\n", "scene"),
    ("scene = x\nimages = a\ncolmap = b\nextra = 1\n", "unknown"),
    ("scene = x\nimages = a\ncolmap = b\ndepth_format = exr\n", "depth_format"),
    ("scene = x\nimages a\n", "key = value"),
])
def test_bad_manifests(tmp_path, text, message):
    path = tmp_path / "scene.txt"
    path.write_text(text)
    with pytest.raises(InputError, match=message):
        read_manifest(path)


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("FEWSHOT_SPLAT_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("FEWSHOT_SPLAT_THREADS", "zero")
    with pytest.raises(InputError):
        default_threads()
    monkeypatch.delenv("FEWSHOT_SPLAT_THREADS")
    assert default_threads() >= 1

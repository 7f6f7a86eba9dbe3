import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semifragile import checkpoint as ckpt
from semifragile import cli, pipeline
from semifragile.data import FaceSet
from semifragile.imaging import load_image, save_image
from semifragile.malicious import FacePolygons, polygon_record, read_sidecar, write_sidecar
from semifragile.messages import bits_to_hex, generate_message, harden
from semifragile.networks import ArchConfig, init_models
from semifragile.pipeline import FaceBox

TINY = ArchConfig.desk(32, 8, 4)


@pytest.fixture(scope="module")
def bundle():
    return init_models(TINY, seed=2).eval()


@pytest.fixture
def model_path(tmp_path, bundle):
    path = tmp_path / "model.ckpt"
    ckpt.save_model(bundle, path)
    return path


def canvas(rng, h=80, w=100):
    return rng.random((h, w, 3)).astype(np.float32)


# -- ingestion --------------------------------------------------------------

@pytest.mark.parametrize(
    "n, expected", [(5000, (1000, 3200, 800)), (10, (2, 6, 2)), (20000, (1000, 15200, 3800)), (1, (0, 1, 0))]
)
def test_split_sizes(n, expected):
    assert pipeline.split_sizes(n) == expected


def test_split_sizes_errors():
    with pytest.raises(ValueError):
        pipeline.split_sizes(0)
    with pytest.raises(ValueError):
        pipeline.split_sizes(10, test_size=10)
    assert pipeline.split_sizes(10, test_size=0) == (0, 8, 2)


@given(st.integers(1, 100_000))
def test_split_sizes_partition(n):
    test, train, val = pipeline.split_sizes(n)
    assert test + train + val == n and test <= 1000 and min(test, train, val) >= 0


def make_source(root, rng, n=10):
    root.mkdir()
    records = []
    for i in range(n):
        h, w = (40 + 4 * i, 64) if i % 2 else (64, 50 + 3 * i)
        save_image(canvas(rng, h, w), root / f"img{i:02d}.png")
        eye = [[10, 10], [20, 10], [15, 18]]
        records.append(polygon_record(f"img{i:02d}.png", FacePolygons([eye], None, [[5, 30], [30, 30], [18, 38]])))
    write_sidecar(root / "polygons.jsonl", records[::2])


def test_ingest_deterministic_and_square(tmp_path, rng):
    make_source(tmp_path / "src", rng)
    m1 = pipeline.ingest_dataset(tmp_path / "src", tmp_path / "a", side=32, seed=4)
    m2 = pipeline.ingest_dataset(tmp_path / "src", tmp_path / "b", side=32, seed=4)
    assert m1 == m2
    assert {k: len(v) for k, v in m1["splits"].items()} == {"test": 2, "train": 6, "val": 2}
    assert sorted(m1["files"]) == [f"img{i:02d}.png" for i in range(10)]
    for name in m1["files"]:
        assert load_image(tmp_path / "a" / "images" / name).shape == (32, 32, 3)
    m3 = pipeline.ingest_dataset(tmp_path / "src", tmp_path / "c", side=32, seed=5)
    assert m3["splits"] != m1["splits"]


def test_ingest_carries_polygons(tmp_path, rng):
    make_source(tmp_path / "src", rng)
    pipeline.ingest_dataset(tmp_path / "src", tmp_path / "out", side=32, seed=0)
    recs = read_sidecar(tmp_path / "out" / "polygons.jsonl")
    assert sorted(recs) == [f"img{i:02d}.png" for i in range(0, 10, 2)]
    # img00 is 64x50: crop rows 7..57, then scale 32/50
    eye = np.asarray(recs["img00.png"]["eyes"][0])
    np.testing.assert_allclose(eye, (np.array([[10, 10], [20, 10], [15, 18]]) - [0, 7]) * 32 / 50)
    data = FaceSet.from_directory(tmp_path / "out")
    assert len(data) == 10 and data.has_polygons(np.arange(10)).sum() == 5


def test_ingest_no_images(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no PNG"):
        pipeline.ingest_dataset(tmp_path / "empty", tmp_path / "out", side=32)


# -- messages and verdicts ----------------------------------------------------

def test_resolve_message():
    assert pipeline.resolve_message(8, message_hex="a5").tolist() == [1, 0, 1, 0, 0, 1, 0, 1]
    np.testing.assert_array_equal(
        pipeline.resolve_message(16, key=b"k" * 32, context="x"), generate_message(b"k" * 32, b"x", 16)
    )
    with pytest.raises(ValueError):
        pipeline.resolve_message(8)
    with pytest.raises(ValueError):
        pipeline.resolve_message(8, message_hex="a5", key=b"k" * 32)
    with pytest.raises(ValueError):
        pipeline.resolve_message(8, message_hex="a5a")


@settings(max_examples=200)
@given(
    st.lists(st.floats(0, 1), min_size=8, max_size=8),
    st.lists(st.integers(0, 1), min_size=8, max_size=8),
    st.floats(0, 100),
)
def test_verdict_rule(decoded, expected, threshold):
    decoded, expected = np.array(decoded), np.array(expected)
    r = pipeline.verdict(decoded, expected, threshold)
    assert r.authentic == (r.bra >= threshold)
    assert r.verdict == ("authentic" if r.authentic else "manipulated")
    assert r == pipeline.verdict(decoded.copy(), expected.copy(), threshold)
    assert r.message_hex == bits_to_hex(harden(decoded))


def test_verdict_threshold_range():
    with pytest.raises(ValueError):
        pipeline.verdict(np.ones(8), np.ones(8), 101)


def test_verify_result_dict():
    r = pipeline.verdict(np.array([0.9, 0.1, 0.8, 0.2]), np.array([1, 0, 0, 0]), 75)
    assert r.to_dict() == {"message_hex": "a", "bra": 75.0, "authentic": True, "threshold": 75.0, "verdict": "authentic"}


def test_embed_rejects_wrong_length_before_model(bundle, monkeypatch, rng):
    def boom(*a, **k):
        raise AssertionError("model called")

    monkeypatch.setattr(bundle.encoder, "forward", boom)
    with pytest.raises(ValueError, match="message length"):
        pipeline.embed_image(bundle, canvas(rng, 32, 32), np.ones(7))


def test_embed_rejects_wrong_side(bundle, rng):
    with pytest.raises(ValueError, match="face boxes"):
        pipeline.embed_image(bundle, canvas(rng, 40, 40), np.ones(8))


# -- multi-face ---------------------------------------------------------------

def test_facebox_validation():
    FaceBox(0, 0, 32).validate(32, 32)
    with pytest.raises(ValueError, match="32"):
        FaceBox(0, 0, 31).validate(64, 64)
    with pytest.raises(ValueError, match="outside"):
        FaceBox(40, 0, 32).validate(64, 64)
    with pytest.raises(ValueError, match="outside"):
        FaceBox(-1, 0, 32).validate(64, 64)
    assert FaceBox(3, 4, 40).shifted(-2, 5) == FaceBox(1, 9, 40)


def test_multiface_outside_untouched(bundle, rng):
    img = canvas(rng)
    boxes = [(2, 3, 40), (55, 30, 45)]
    out = pipeline.multiface_embed(bundle, img, boxes, rng.integers(0, 2, (2, 8)))
    inside = np.zeros(img.shape[:2], bool)
    for x0, y0, s in boxes:
        inside[y0 : y0 + s, x0 : x0 + s] = True
    np.testing.assert_array_equal(out[~inside], img[~inside])
    assert not np.array_equal(out[inside], img[inside])


def test_multiface_full_frame_equals_embed(bundle, rng):
    img = canvas(rng, 32, 32)
    bits = rng.integers(0, 2, 8)
    np.testing.assert_array_equal(
        pipeline.multiface_embed(bundle, img, [(0, 0, 32)], bits), pipeline.embed_image(bundle, img, bits)
    )
    v1 = pipeline.multiface_verify(bundle, img, [(0, 0, 32)], bits)[0]
    assert v1 == pipeline.verify_image(bundle, img, bits)


def test_multiface_overlap_later_wins(bundle, rng):
    img = canvas(rng)
    a, b = (0, 0, 48), (20, 20, 40)
    msgs = rng.integers(0, 2, (2, 8))
    both = pipeline.multiface_embed(bundle, img, [a, b], msgs)
    only_b = pipeline.multiface_embed(bundle, img, [b], msgs[1])
    np.testing.assert_array_equal(both[20:60, 20:60], only_b[20:60, 20:60])


def test_multiface_errors(bundle, rng):
    img = canvas(rng)
    with pytest.raises(ValueError, match="no face boxes"):
        pipeline.multiface_embed(bundle, img, [], np.ones(8))
    with pytest.raises(ValueError, match="no face boxes"):
        pipeline.multiface_verify(bundle, img, [], np.ones(8))
    with pytest.raises(ValueError, match="outside"):
        pipeline.multiface_embed(bundle, img, [(80, 0, 32)], np.ones(8))
    with pytest.raises(ValueError, match="messages"):
        pipeline.multiface_embed(bundle, img, [(0, 0, 32), (40, 40, 32)], np.ones((3, 8)))
    with pytest.raises(ValueError, match="L=8"):
        pipeline.multiface_embed(bundle, img, [(0, 0, 32)], np.ones(9))


def test_read_boxes_formats(tmp_path):
    (tmp_path / "a.json").write_text("[[1, 2, 40], [50, 2, 33]]")
    assert pipeline.read_boxes(tmp_path / "a.json") == [FaceBox(1, 2, 40), FaceBox(50, 2, 33)]
    (tmp_path / "b.json").write_text(json.dumps({"boxes": [[0, 0, 32]]}))
    assert pipeline.read_boxes(tmp_path / "b.json") == [FaceBox(0, 0, 32)]
    write_sidecar(tmp_path / "c.jsonl", [polygon_record("x.png", boxes=[(4, 5, 36)]), polygon_record("y.png")])
    assert pipeline.read_boxes(tmp_path / "c.jsonl", "x.png") == [FaceBox(4, 5, 36)]
    assert pipeline.read_boxes(tmp_path / "c.jsonl", "y.png") == []
    with pytest.raises(ValueError):
        pipeline.read_boxes(tmp_path / "c.jsonl")


# -- command line -------------------------------------------------------------

def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_embed_verify(tmp_path, model_path, bundle, rng, capsys):
    save_image(canvas(rng, 32, 32), tmp_path / "in.png")
    code, out, _ = run(capsys, "embed", tmp_path / "in.png", "--checkpoint", model_path,
                       "--out", tmp_path / "w.png", "--message", "3c")
    assert code == cli.EXIT_OK
    assert {"psnr", "ssim"} <= json.loads(out).keys()
    assert load_image(tmp_path / "w.png").shape == (32, 32, 3)

    expected = pipeline.verify_image(bundle, load_image(tmp_path / "w.png"), pipeline.resolve_message(8, "3c"))
    code, out, _ = run(capsys, "verify", tmp_path / "w.png", "--checkpoint", model_path, "--message", "3c")
    assert json.loads(out)["bra"] == expected.bra
    assert code == (cli.EXIT_OK if expected.authentic else cli.EXIT_MANIPULATED)
    code, _, _ = run(capsys, "verify", tmp_path / "w.png", "--checkpoint", model_path, "--message", "3c",
                     "--threshold", 0)
    assert code == cli.EXIT_OK
    if expected.bra < 100:
        code, _, _ = run(capsys, "verify", tmp_path / "w.png", "--checkpoint", model_path, "--message", "3c",
                         "--threshold", 100)
        assert code == cli.EXIT_MANIPULATED


def test_cli_jpeg_output(tmp_path, model_path, rng, capsys):
    save_image(canvas(rng, 32, 32), tmp_path / "in.png")
    code, _, _ = run(capsys, "embed", tmp_path / "in.png", "--checkpoint", model_path, "--out", tmp_path / "w.jpg",
                     "--format", "jpeg", "--quality", 90, "--message", "ff")
    assert code == 0 and (tmp_path / "w.jpg").read_bytes()[:2] == b"\xff\xd8"


def test_cli_key_message(tmp_path, model_path, rng, capsys):
    (tmp_path / "key").write_bytes(b"s" * 32)
    save_image(canvas(rng, 32, 32), tmp_path / "in.png")
    code, _, _ = run(capsys, "embed", tmp_path / "in.png", "--checkpoint", model_path, "--out", tmp_path / "w.png",
                     "--key", tmp_path / "key", "--context", "photo-1")
    assert code == 0
    code, out, _ = run(capsys, "verify", tmp_path / "w.png", "--checkpoint", model_path, "--key", tmp_path / "key",
                       "--context", "photo-1", "--threshold", 0)
    assert code == 0 and json.loads(out)["verdict"] == "authentic"


@pytest.mark.parametrize(
    "argv",
    [
        ["verify", "{missing}", "--checkpoint", "{model}", "--message", "aa"],
        ["verify", "{img}", "--checkpoint", "{model}", "--message", "aaa"],
        ["verify", "{img}", "--checkpoint", "{nockpt}", "--message", "aa"],
        ["verify", "{img}", "--checkpoint", "{garbage}", "--message", "aa"],
        ["embed", "{img}", "--checkpoint", "{model}", "--out", "{out}", "--message", "zz"],
        ["multiface-verify", "{img}", "--checkpoint", "{model}", "--boxes", "{empty}", "--message", "aa"],
        ["multiface-embed", "{img}", "--checkpoint", "{model}", "--boxes", "{bad}", "--out", "{out}", "--message", "aa"],
    ],
)
def test_cli_error_status(argv, tmp_path, model_path, rng, capsys):
    save_image(canvas(rng, 32, 32), tmp_path / "img.png")
    (tmp_path / "empty.json").write_text("[]")
    (tmp_path / "bad.json").write_text("[[10, 10, 32]]")
    (tmp_path / "garbage.ckpt").write_bytes(b"not a checkpoint")
    paths = {"missing": tmp_path / "nope.png", "model": model_path, "img": tmp_path / "img.png",
             "nockpt": tmp_path / "nope.ckpt", "garbage": tmp_path / "garbage.ckpt", "out": tmp_path / "o.png",
             "empty": tmp_path / "empty.json", "bad": tmp_path / "bad.json"}
    code, _, err = run(capsys, *[a.format(**paths) for a in argv])
    assert code == cli.EXIT_ERROR
    assert err.startswith("error:")


def test_cli_multiface(tmp_path, model_path, bundle, rng, capsys):
    img = canvas(rng)
    save_image(img, tmp_path / "group.png")
    write_sidecar(tmp_path / "boxes.jsonl", [polygon_record("group.png", boxes=[(0, 0, 40), (50, 30, 48)])])
    code, out, _ = run(capsys, "multiface-embed", tmp_path / "group.png", "--checkpoint", model_path,
                       "--boxes", tmp_path / "boxes.jsonl", "--out", tmp_path / "w.png", "--message", "0f,f0")
    assert code == 0 and json.loads(out)["faces"] == 2
    code, out, _ = run(capsys, "multiface-verify", tmp_path / "w.png", "--checkpoint", model_path,
                       "--boxes", tmp_path / "boxes.jsonl", "--message", "0f,f0", "--threshold", 0)
    rep = json.loads(out)
    assert code == 0 and rep["authentic"] and len(rep["faces"]) == 2
    code, _, _ = run(capsys, "multiface-verify", tmp_path / "w.png", "--checkpoint", model_path,
                     "--boxes", tmp_path / "boxes.jsonl", "--message", "0f,f0,00")
    assert code == cli.EXIT_ERROR


def test_cli_dataset_commands(tmp_path, rng, capsys):
    src = tmp_path / "src"
    src.mkdir()
    imgs, polys = FaceSet.synthetic(10, 48, seed=3).images, FaceSet.synthetic(10, 48, seed=3).polygons
    for i, (im, p) in enumerate(zip(imgs, polys)):
        save_image(im.astype(np.float32) / 255, src / f"f{i}.png")
    write_sidecar(src / "polygons.jsonl", [polygon_record(f"f{i}.png", p) for i, p in enumerate(polys)])
    code, out, _ = run(capsys, "ingest", src, "--out", tmp_path / "data", "--side", 32, "--seed", 1)
    assert code == 0 and json.loads(out) == {"test": 2, "train": 6, "val": 2}

    cfg = {"arch": TINY.to_dict(), "batch_size": 2, "iterations": 3, "checkpoint_every": 3, "validate_every": 3,
           "val_images": 2}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "train", "--data", tmp_path / "data", "--out", tmp_path / "run",
                       "--config", tmp_path / "cfg.json", "--seed", 7)
    assert code == 0 and json.loads(out)["step"] == 3
    model = tmp_path / "run" / "last.ckpt"

    code, out, _ = run(capsys, "evaluate", "--checkpoint", model, "--data", tmp_path / "data",
                       "--out", tmp_path / "report.json", "--plots", tmp_path / "plots")
    rep = json.loads(out)
    assert code == 0 and 0 <= rep["auc"] <= 1
    assert (tmp_path / "report.json").exists() and (tmp_path / "plots" / "roc.png").exists()

    code, out, _ = run(capsys, "attack-copy", "--checkpoint", model, "--data", tmp_path / "data",
                       "--pairs", 5, "--out", tmp_path / "attack.json")
    rep = json.loads(out)
    assert code == 0 and rep["pairs"] == 1 and 0 <= rep["attack_bra"] <= 100

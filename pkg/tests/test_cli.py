"""CLI subcommands: config validation, exit codes, outputs."""

import json

import numpy as np
import pytest

from metadr import cli


def run_config(tmp_path, **overrides):
    doc = {
        "name": "mini",
        "protocol": {
            "sample_cap": 80,
            "seed": 0,
            "domains": [
                {"name": "clean", "source": {"kind": "synthetic", "count": 80}},
                {
                    "name": "colorized",
                    "source": {"kind": "derived", "base": "clean", "recipe": "colorize"},
                },
            ],
        },
        "model": {"arch": "mlp", "input_shape": [3, 28, 28], "classes": 10,
                  "hidden": [8]},
        "trainer": {"steps": 3, "batch_size": 8},
        "methods": ["naive"],
        "seeds": [0, 1],
        "output_dir": str(tmp_path / "out"),
        "report_formats": ["json", "csv"],
    }
    doc.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path, doc


def test_run_writes_reports_and_aggregates(tmp_path, capsys):
    path, doc = run_config(tmp_path)
    assert cli.main(["run", str(path)]) == 0
    out = tmp_path / "out"
    for seed in (0, 1):
        assert (out / f"mini_naive_seed{seed}.json").exists()
        assert (out / f"mini_naive_seed{seed}.csv").exists()
    agg = json.loads((out / "mini_naive_aggregate.json").read_text())
    assert agg["seeds"] == [0, 1]
    assert agg["domains"] == ["clean", "colorized"]


def test_run_is_byte_identical_across_executions(tmp_path):
    path, doc = run_config(tmp_path)
    assert cli.main(["run", str(path)]) == 0
    first = {
        p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()
    }
    assert cli.main(["run", str(path)]) == 0
    second = {
        p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()
    }
    assert first == second


def test_run_schema_violation_names_field(tmp_path, capsys):
    path, doc = run_config(tmp_path, trainer={"steps": 3, "beta": -1.0})
    assert cli.main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "beta" in err


def test_run_rejects_unknown_method(tmp_path):
    path, _ = run_config(tmp_path, methods=["finetune_harder"])
    assert cli.main(["run", str(path)]) == 2


def test_run_missing_config_file(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.json")]) == 2


def test_run_flag_overrides(tmp_path):
    path, _ = run_config(tmp_path)
    other = tmp_path / "other"
    assert cli.main([
        "run", str(path), "--output-dir", str(other), "--steps", "2",
        "--seeds", "5",
    ]) == 0
    report = json.loads((other / "mini_naive_seed5.json").read_text())
    assert report["seed"] == 5
    assert report["config"]["steps"] == 2


def test_bundled_desk_config_validates():
    from importlib import resources

    with resources.files("metadr").joinpath("configs/desk_p1.json").open() as f:
        doc = json.load(f)
    cli.validate_config(doc)
    assert doc["methods"] == ["naive", "naive_dr", "metadr"]
    assert len(doc["seeds"]) == 3
    assert len(doc["protocol"]["domains"]) == 3


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--instances", "4"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "composite" in out and "excluded" in out
    assert cli.main(["gradcheck", "--instances", "2", "--fault-flip"]) == 1


def test_image_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for c, ext in ((3, "ppm"), (1, "pgm")):
        img = np.rint(rng.uniform(0, 255, (5, 7, c)))
        p = tmp_path / f"img.{ext}"
        cli.write_image(p, img)
        np.testing.assert_array_equal(cli.read_image(p), img)
    npy = tmp_path / "img.npy"
    np.save(npy, np.zeros((4, 4)))
    assert cli.read_image(npy).shape == (4, 4, 1)
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"GIF89a")
    with pytest.raises(ValueError):
        cli.read_image(bad)


def test_transforms_command(tmp_path, capsys):
    img = np.random.default_rng(0).uniform(0, 255, (16, 16, 3))
    src = tmp_path / "in.ppm"
    cli.write_image(src, img)
    out = tmp_path / "samples"
    rc = cli.main([
        "transforms", "psi2", str(src), "--seed", "9", "--samples", "4",
        "--out", str(out),
    ])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["samples"]) == 4
    for s in manifest["samples"]:
        assert len(s["entries"]) == 2  # N = 2 composition
        assert (out / s["file"]).exists()


def test_transforms_manifest_is_seed_stable(tmp_path):
    img = np.random.default_rng(0).uniform(0, 255, (8, 8, 3))
    src = tmp_path / "in.ppm"
    cli.write_image(src, img)
    texts = []
    for d in ("o1", "o2"):
        cli.main(["transforms", "psi3", str(src), "--seed", "3",
                  "--out", str(tmp_path / d)])
        texts.append((tmp_path / d / "manifest.json").read_text())
    assert texts[0] == texts[1]


def test_transforms_unknown_set(tmp_path):
    src = tmp_path / "in.ppm"
    cli.write_image(src, np.zeros((4, 4, 3)))
    assert cli.main(["transforms", "psi9", str(src), "--out", str(tmp_path)]) == 2


def test_report_single_table(tmp_path, capsys):
    path, _ = run_config(tmp_path, seeds=[0])
    cli.main(["run", str(path)])
    capsys.readouterr()
    rc = cli.main(["report", str(tmp_path / "out" / "mini_naive_seed0.json")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "after clean" in out and "colorized" in out


def test_report_aggregate_and_formats(tmp_path, capsys):
    path, _ = run_config(tmp_path)
    cli.main(["run", str(path)])
    capsys.readouterr()
    files = [str(tmp_path / "out" / f"mini_naive_seed{s}.json") for s in (0, 1)]
    for fmt, needle in (("table", "±"), ("csv", "stage,clean"), ("json", '"seeds"')):
        assert cli.main(["report", *files, "--format", fmt]) == 0
        assert needle in capsys.readouterr().out


def test_report_mixed_configs_refused(tmp_path, capsys):
    path, _ = run_config(tmp_path, seeds=[0])
    cli.main(["run", str(path)])
    path2, _ = run_config(tmp_path, trainer={"steps": 4, "batch_size": 8},
                          output_dir=str(tmp_path / "out2"), seeds=[1])
    cli.main(["run", str(path2)])
    capsys.readouterr()
    rc = cli.main([
        "report",
        str(tmp_path / "out" / "mini_naive_seed0.json"),
        str(tmp_path / "out2" / "mini_naive_seed1.json"),
    ])
    assert rc == 2


def test_report_unparseable_file(tmp_path):
    p = tmp_path / "junk.json"
    p.write_text("{}")
    assert cli.main(["report", str(p)]) == 2

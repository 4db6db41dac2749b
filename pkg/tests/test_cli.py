import json
import os

from mea_lab.bundle import read_manifest
from mea_lab.cli import main
from mea_lab.corpus import make_corpus


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_check_subcommand_json_and_exit(capsys):
    code, out, _ = run(capsys, "check", "--suite", "presoftmax",
                       "--trials", "10", "--seed", "1")
    assert code == 0
    reports = json.loads(out)
    assert reports[0]["name"] == "presoftmax-rewrite"
    assert reports[0]["passed"] is True
    assert reports[0]["trials"] == 10
    assert reports[0]["seed"] == 1


def test_usage_error_exit_code(capsys):
    code, _, _ = run(capsys, "check", "--nonsense")
    assert code == 2
    code, _, _ = run(capsys, "definitely-not-a-subcommand")
    assert code == 2


def test_fit_scaling_missing_file(capsys):
    code, _, err = run(capsys, "fit-scaling", "--in", "missing.csv")
    assert code == 3
    assert "missing.csv" in err


def _train(capsys, tmp_path, variant="mha", steps=25, extra=()):
    curve = str(tmp_path / f"run_{variant}.csv")
    model = str(tmp_path / f"model_{variant}.tb")
    code, out, _ = run(
        capsys, "train-toy", "--variant", variant, "--lr", "2e-3",
        "--steps", str(steps), "--seed", "3", "--corpus", "copy",
        "--corpus-size", "20000", "--layers", "1", "--d-model", "16",
        "--heads", "2", "--seq-len", "16", "--batch-tokens", "16",
        "--warmup", "5", "--out-curve", curve, "--out-model", model, *extra)
    assert code == 0
    return curve, model, json.loads(out)


def test_train_toy_writes_artifacts_and_manifest(capsys, tmp_path):
    curve, model, summary = _train(capsys, tmp_path)
    assert summary["steps_run"] == 25
    assert not summary["unstable"]
    lines = open(curve).read().splitlines()
    assert lines[0] == "step,tokens,loss,lr"
    assert len(lines) == 26
    manifest = json.loads(open(curve + ".manifest.json").read())
    assert manifest["subcommand"] == "train-toy"
    assert manifest["seed"] == 3
    assert manifest["outputs"] == [curve, model]
    assert manifest["config"]["lr"] == 2e-3


def test_train_toy_reruns_bit_identical(capsys, tmp_path):
    curve1, model1, _ = _train(capsys, tmp_path)
    body1 = open(curve1, "rb").read()
    model_body1 = open(model1, "rb").read()
    curve2, model2, _ = _train(capsys, tmp_path)
    assert open(curve2, "rb").read() == body1
    assert open(model2, "rb").read() == model_body1


def test_info_matches_bundle_manifest(capsys, tmp_path):
    _, model, _ = _train(capsys, tmp_path)
    code, out, _ = run(capsys, "info", model)
    assert code == 0
    assert json.loads(out) == read_manifest(model)


def test_compress_and_reload(capsys, tmp_path):
    _, model, _ = _train(capsys, tmp_path)
    comp = str(tmp_path / "comp.tb")
    code, out, _ = run(capsys, "compress", "--in", model, "--out", comp,
                       "--heads", "1")
    assert code == 0
    report = json.loads(out)
    assert report["virtual_heads"] == 1
    assert len(report["layers"]) == 1
    code, out, _ = run(capsys, "info", comp)
    names = [e["name"] for e in json.loads(out)]
    assert "layer0.attn.wk_basis" in names
    assert "layer0.attn.wkv" not in names
    # compressing a compressed model is a data error
    code, _, _ = run(capsys, "compress", "--in", comp, "--out",
                     str(tmp_path / "x.tb"), "--heads", "1")
    assert code == 3


def test_profile_layers_csv(capsys, tmp_path):
    _, model, _ = _train(capsys, tmp_path)
    data = tmp_path / "held.bin"
    data.write_bytes(bytes(make_corpus("copy", 600, seed=9)))
    out_csv = str(tmp_path / "profile.csv")
    svg = str(tmp_path / "profile.svg")
    code, _, _ = run(capsys, "profile-layers", "--model", model, "--data",
                     str(data), "--heads", "1", "--out", out_csv,
                     "--seq-len", "16", "--emit-plot", svg)
    assert code == 0
    lines = open(out_csv).read().splitlines()
    assert lines[0] == "layer,baseline_ce,compressed_ce,delta"
    assert len(lines) == 2
    assert open(svg).read().startswith("<svg")


def test_fit_scaling_end_to_end(capsys, tmp_path):
    import random
    for lr, spike in ((1e-3, False), (3e-3, True)):
        rows = ["step,tokens,loss,lr"]
        rng = random.Random(int(lr * 1e6))
        for i in range(48):
            d = (i + 1) * 500.0
            loss = (4e4 / d) ** 0.5 + 1.5 + rng.gauss(0, 1e-3)
            if spike and i >= 30:
                loss += 4.0
            rows.append(f"{i},{d},{loss},{lr}")
        (tmp_path / f"lr{lr:g}.csv").write_text("\n".join(rows) + "\n")
    out = str(tmp_path / "fits.json")
    svg = str(tmp_path / "fits.svg")
    code, stdout, _ = run(capsys, "fit-scaling", "--in",
                          str(tmp_path / "lr0.001.csv"),
                          str(tmp_path / "lr0.003.csv"),
                          "--out", out, "--emit-plot", svg)
    assert code == 0
    result = json.loads(stdout)
    assert result["selection"]["chosen_lr"] == 1e-3
    assert os.path.exists(out) and os.path.exists(svg)
    assert os.path.exists(out + ".manifest.json")


def test_exit_code_on_failed_selection(capsys, tmp_path):
    rows = ["tokens,loss,lr"]
    for i in range(48):
        loss = 2.0 if i < 30 else 6.0
        rows.append(f"{(i + 1) * 500.0},{loss},0.001")
    (tmp_path / "a.csv").write_text("\n".join(rows) + "\n")
    rows = ["tokens,loss,lr"]
    for i in range(48):
        loss = 2.0 if i < 20 else 6.5
        rows.append(f"{(i + 1) * 500.0},{loss},0.003")
    (tmp_path / "b.csv").write_text("\n".join(rows) + "\n")
    code, out, _ = run(capsys, "fit-scaling", "--in", str(tmp_path / "a.csv"),
                       str(tmp_path / "b.csv"))
    assert code == 1
    assert "error" in json.loads(out)["selection"]


def test_check_out_file_and_manifest(capsys, tmp_path):
    out = str(tmp_path / "checks.json")
    code, _, _ = run(capsys, "check", "--suite", "dfa-tha", "--trials", "5",
                     "--seed", "2", "--out", out)
    assert code == 0
    assert json.loads(open(out).read())[0]["name"] == "dfa-as-tha"
    assert os.path.exists(out + ".manifest.json")

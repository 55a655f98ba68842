import csv

import numpy as np
import pytest

from avae.cli import main
from avae.data import save_raw_tensor


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny raw-tensor dataset, a config over it and one trained run."""
    root = tmp_path_factory.mktemp("cli")
    images = np.random.default_rng(0).uniform(0, 1, (60, 1, 8, 8))
    save_raw_tensor(root / "tiny.avae", images, name="mnist")
    cfg = root / "exp.cfg"
    cfg.write_text(f"dataset_path = {root / 'tiny.avae'}\nlatent_size = 2\nepochs = 1\n"
                   f"batch = 2\nmax_iter = 5\nseed_noise = 3\n")
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["attack", "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest_hash(path):
    line = next(x for x in path.read_text().splitlines() if x.startswith("config_sha256"))
    return line.split("=", 1)[1].strip()


def test_train_writes_checkpoint_report_and_manifest(workspace):
    _, _, out = workspace
    for name in ("checkpoint.avae", "train_report.txt", "val_elbo.csv", "manifest_train.txt"):
        assert (out / name).exists()


def test_repeated_train_gives_identical_manifest_hash(workspace, tmp_path):
    _, cfg, out = workspace
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert manifest_hash(tmp_path / "manifest_train.txt") == manifest_hash(out / "manifest_train.txt")
    assert (tmp_path / "checkpoint.avae").read_bytes() == (out / "checkpoint.avae").read_bytes()


def test_attack_row_count(workspace):
    _, _, out = workspace
    rows = read_csv(out / "raw_attacks.csv")
    assert len(rows) == 5 * 11 + 5
    assert sum(r["C"] == "boundary" for r in rows) == 5
    # iteration-capped points are kept, not dropped
    assert any(r["converged"] == "0" for r in rows)


def test_attack_is_byte_identical_on_rerun(workspace, tmp_path):
    _, cfg, out = workspace
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path),
                 "--checkpoint", str(out / "checkpoint.avae")]) == 0
    assert (tmp_path / "raw_attacks.csv").read_bytes() == (out / "raw_attacks.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::avae.evaluation.DegenerateCurveWarning")
def test_evaluate_and_plot(workspace, tmp_path):
    _, _, out = workspace
    assert main(["evaluate", "--raw", str(out / "raw_attacks.csv"), "--out", str(tmp_path)]) == 0
    scores = read_csv(tmp_path / "scores.csv")
    assert len(scores) == 5 and all(0 <= float(s["auddc"]) <= 1 for s in scores)
    assert len(read_csv(tmp_path / "summary.csv")) == 1
    assert main(["plot", "--raw", str(out / "raw_attacks.csv"), "--pair", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ddplot_vae_pair2_latent.svg").exists()


def test_plot_unknown_pair_is_usage_error(workspace, capsys):
    _, _, out = workspace
    assert main(["plot", "--raw", str(out / "raw_attacks.csv"), "--pair", "99"]) == 2
    assert "available pairs" in capsys.readouterr().err


def test_architecture_mismatch_cites_both_descriptors(workspace, tmp_path, capsys):
    root, cfg, out = workspace
    other = tmp_path / "other.cfg"
    other.write_text(cfg.read_text().replace("latent_size = 2", "latent_size = 3"))
    code = main(["attack", "--config", str(other), "--out", str(tmp_path),
                 "--checkpoint", str(out / "checkpoint.avae")])
    err = capsys.readouterr().err
    assert code == 2 and "latent=2" in err and "latent=3" in err


def test_evaluate_synthetic_raw_csv(tmp_path):
    header = ("pair_id,layer,C,mean_input_distortion,mean_target_distance,objective,iterations,converged,"
              "dataset,model,latent_size,timesteps\n")
    body = ("0,latent,0.0,0.0,7.0,1.0,3,1,mnist,vae,32,1\n"
            "0,latent,1.0,2.0,3.0,1.0,3,1,mnist,vae,32,1\n"
            "0,latent,boundary,4.0,7.0,2.0,0,1,mnist,vae,32,1\n"
            "1,latent,0.0,0.0,1.0,0.0,3,1,mnist,vae,32,1\n"
            "1,latent,boundary,0.0000001,1.0,1.0,0,1,mnist,vae,32,1\n"
            "2,latent,0.0,0.0,1.0,0.0,3,1,mnist,vae,32,1\n")
    raw = tmp_path / "raw.csv"
    raw.write_text(header + body)
    with pytest.warns(UserWarning):
        assert main(["evaluate", "--raw", str(raw)]) == 0
    scores = {int(r["pair_id"]): float(r["auddc"]) for r in read_csv(tmp_path / "scores.csv")}
    assert abs(scores[0] - 0.4) < 1e-12      # hand-built curve
    assert scores[1] == 1.0                  # degenerate pair
    assert 2 not in scores                   # no boundary row


def test_identical_scores_have_zero_half_width(tmp_path):
    header = ("pair_id,layer,C,mean_input_distortion,mean_target_distance,objective,iterations,converged,"
              "dataset,model,latent_size,timesteps\n")
    rows = "".join(f"{p},latent,0.0,1.0,2.0,0,1,1,mnist,vae,32,1\n{p},latent,boundary,2.0,3.0,1.0,0,1,"
                   f"mnist,vae,32,1\n" for p in range(3))
    raw = tmp_path / "raw.csv"
    raw.write_text(header + rows)
    assert main(["evaluate", "--raw", str(raw)]) == 0
    (summary,) = read_csv(tmp_path / "summary.csv")
    assert summary["auddc_x100"] == "62.50" and summary["ci95_x100"] == "0.00"


def test_bad_level_in_full_profile_is_usage_error(tmp_path):
    (tmp_path / "bad.cfg").write_text("profile = full\nlatent_size = 7\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 2


def test_missing_raw_csv_is_data_error(tmp_path):
    assert main(["evaluate", "--raw", str(tmp_path / "does-not-exist.csv")]) == 3


def test_unknown_model_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("model = gan\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 2
    assert "vae, cvae, draw" in capsys.readouterr().err


def test_negative_pair_count_is_usage_error(workspace, tmp_path):
    _, cfg, out = workspace
    bad = tmp_path / "bad.cfg"
    bad.write_text(cfg.read_text() + "pairs = -1\n")
    assert main(["attack", "--config", str(bad), "--out", str(tmp_path),
                 "--checkpoint", str(out / "checkpoint.avae")]) == 2


def test_malformed_checkpoint_is_data_error(workspace, tmp_path):
    _, cfg, _ = workspace
    (tmp_path / "broken.avae").write_bytes(b"AVAE\x01\x00")
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "broken.avae")]) == 3


def test_sweep_writes_full_design(tmp_path):
    assert main(["sweep", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "configs").glob("*.cfg"))) == 36
    assert len((tmp_path / "batch.txt").read_text().splitlines()) == 3 * 36

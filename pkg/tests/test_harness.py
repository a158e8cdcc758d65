import json
import math

import numpy as np
import pytest

from alma import cli, nn
from alma.harness import campaign as camp
from alma.harness.campaign import Campaign, SampleRecord, run_campaign
from alma.harness.data import (
    DESK_DATASET,
    REFERENCE_MODEL,
    Dataset,
    DatasetFormatError,
    bundled_path,
    import_pnm_directory,
    load_dataset,
    make_desk_dataset,
    save_dataset,
)
from alma.harness.train import TrainingFailedError, accuracy, train_reference_model
from alma.solver import AlmaConfig, alma_attack

MODEL = str(bundled_path(REFERENCE_MODEL))
DATA = str(bundled_path(DESK_DATASET))


def _record(i, success, dist, correct=True):
    return SampleRecord(i, 0, -1, correct, correct, success, dist if success else math.inf)


# -- data ------------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = make_desk_dataset(25, seed=3)
    save_dataset(ds, tmp_path / "d.almads")
    back = load_dataset(tmp_path / "d.almads")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 10 and back.shape == (3, 8, 8)


def test_dataset_format_errors(tmp_path):
    ds = make_desk_dataset(4)
    path = tmp_path / "d.almads"
    save_dataset(ds, path)
    data = path.read_bytes()
    cases = {
        "magic": b"NOPE" + data[4:],
        "truncated": data[:-3],
        "padded": data + b"\0",
        "header": data.replace(b"count=4", b"count4"),
        "label_bytes": data.replace(b"label_bytes=8", b"label_bytes=4"),
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / name)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)


def test_pnm_import(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    expected = {}
    for label in (0, 2):
        (tmp_path / str(label)).mkdir()
        for k in range(2):
            arr = rng.integers(0, 256, size=(4, 5, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(tmp_path / str(label) / f"{k}.ppm")
            expected[(label, k)] = arr.transpose(2, 0, 1) / 255.0
    (tmp_path / "notes").mkdir()
    ds = import_pnm_directory(tmp_path)
    assert ds.shape == (3, 4, 5) and ds.num_classes == 3
    assert list(ds.labels) == [0, 0, 2, 2]
    np.testing.assert_array_equal(ds.images[2], expected[(2, 0)])


def test_pnm_import_errors(tmp_path):
    with pytest.raises(DatasetFormatError):
        import_pnm_directory(tmp_path)


def test_desk_dataset_is_deterministic_and_bundled():
    a, b = make_desk_dataset(50, seed=1), make_desk_dataset(50, seed=1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    bundled = load_dataset(DATA)
    fresh = make_desk_dataset(len(bundled), seed=0)
    assert np.array_equal(bundled.images, fresh.images)
    assert bundled.images.min() >= 0 and bundled.images.max() <= 1


# -- training --------------------------------------------------------------------


def test_training_is_bit_identical(tmp_path):
    ds = make_desk_dataset(200, seed=2)
    for k in range(2):
        nn.save_model(train_reference_model(ds, epochs=20, seed=4), tmp_path / f"m{k}.almann")
    assert (tmp_path / "m0.almann").read_bytes() == (tmp_path / "m1.almann").read_bytes()


def test_bundled_model_is_the_seeded_training_output(tmp_path, desk):
    nn.save_model(train_reference_model(desk), tmp_path / "ref.almann")
    assert (tmp_path / "ref.almann").read_bytes() == bundled_path(REFERENCE_MODEL).read_bytes()


def test_linearly_separable_blobs_reach_full_accuracy():
    rng = np.random.default_rng(0)
    centers = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])
    labels = np.repeat(np.arange(3), 40)
    pts = centers[labels] + rng.uniform(-0.08, 0.08, size=(120, 2))
    ds = Dataset(pts.reshape(120, 1, 1, 2), labels, 3)
    model = train_reference_model(ds, epochs=100, seed=0, hidden=(8,))
    assert accuracy(model, ds) == 1.0


def test_bundled_model_accuracy(reference_model, desk):
    assert accuracy(reference_model, desk) >= 0.95


def test_training_failure_is_reported():
    rng = np.random.default_rng(0)
    noise = Dataset(rng.uniform(size=(60, 1, 2, 2)), rng.integers(0, 3, size=60), 3)
    with pytest.raises(TrainingFailedError):
        train_reference_model(noise, epochs=1, min_accuracy=0.99)


# -- aggregation -----------------------------------------------------------------


def test_curve_counting_example():
    records = [_record(i, True, d) for i, d in enumerate((1.0, 2.0, 3.0))]
    assert camp.robust_accuracy_curve(records, [2.5]) == [(2.5, 1 / 3)]
    assert camp.median_distance(records) == 2.0


def test_all_failures_give_flat_curve_and_undefined_median():
    records = [_record(i, False, 0) for i in range(4)]
    curve = camp.robust_accuracy_curve(records, [0.0, 1.0, 100.0])
    assert [a for _, a in curve] == [1.0, 1.0, 1.0]
    assert math.isinf(camp.median_distance(records))
    assert camp.summarize(records).aggregates()["median_distance"] is None


def test_median_treats_failures_as_infinite():
    records = [_record(0, True, 1.0), _record(1, True, 3.0), _record(2, False, 0), _record(3, False, 0)]
    assert math.isinf(camp.median_distance(records))
    records.append(_record(4, True, 2.0))
    assert camp.median_distance(records) == 3.0


def test_curve_crosses_half_at_the_median():
    rng = np.random.default_rng(0)
    records = [_record(i, True, float(d)) for i, d in enumerate(rng.uniform(0, 2, size=51))]
    med = camp.median_distance(records)
    (_, below), (_, at) = camp.robust_accuracy_curve(records, [np.nextafter(med, 0), med])
    assert below > 0.5 >= at


def test_csv_round_trip_preserves_records():
    records = [_record(0, True, 0.1 + 0.2), _record(1, False, 0), SampleRecord(2, 3, 4, False, False, True, 0.0, error="x, y")]
    text = camp.records_to_csv(records)
    assert camp.records_from_csv(text) == records
    assert "0.30000000000000004" in text
    with pytest.raises(ValueError):
        camp.records_from_csv("index,label\n0,1\n")


def test_sample_selection():
    assert camp.select_samples(10, 3, None) == [0, 1, 2]
    chosen = camp.select_samples(100, 10, 7)
    assert chosen == sorted(chosen) and len(set(chosen)) == 10
    assert chosen == camp.select_samples(100, 10, 7)
    assert camp.select_samples(5, None, 0) == [0, 1, 2, 3, 4]


def test_target_rules():
    assert camp.parse_target_rule("second") == ("second", -1)
    assert camp.parse_target_rule("fixed:3") == ("fixed", 3)
    for bad in ("fixed:x", "first"):
        with pytest.raises(ValueError):
            camp.parse_target_rule(bad)


def test_worker_resolution(monkeypatch):
    monkeypatch.delenv(camp.WORKERS_ENV, raising=False)
    assert camp.resolve_workers(None) == 1
    monkeypatch.setenv(camp.WORKERS_ENV, "3")
    assert camp.resolve_workers(None) == 3
    assert camp.resolve_workers(2) == 2
    monkeypatch.setenv(camp.WORKERS_ENV, "many")
    with pytest.raises(ValueError):
        camp.resolve_workers(None)
    with pytest.raises(ValueError):
        camp.resolve_workers(0)


# -- campaigns -------------------------------------------------------------------


def _misclassified(model, data, count):
    """Copies of ``count`` samples relabelled to a class the model does not predict."""
    pred = model.predict(data.images[:count])
    return Dataset(data.images[:count], (pred + 1) % 10, 10)


def test_campaign_over_misclassified_samples(reference_model, desk):
    data = _misclassified(reference_model, desk, 10)
    report = run_campaign(Campaign(MODEL, DATA, config=AlmaConfig(iterations=50), seed=None), reference_model, data)
    assert report.asr == 100.0 and report.median_distance == 0.0
    assert report.clean_accuracy == 0.0
    assert not any(r.attacked for r in report.records)
    assert report.curve[0] == (0.0, 0.0)


def test_single_sample_campaign_equals_direct_attack(reference_model, desk):
    cfg = AlmaConfig(iterations=100)
    report = run_campaign(Campaign(MODEL, DATA, config=cfg, limit=1, seed=None), reference_model, desk)
    direct = alma_attack(reference_model, desk.images[0], int(desk.labels[0]), cfg)
    (rec,) = report.records
    assert rec.success == direct.success and rec.distance == direct.distance
    assert (rec.forwards, rec.backwards) == (direct.counters.forwards, direct.counters.backwards)
    assert report.median_distance == direct.distance


def test_curve_starts_at_clean_accuracy_and_never_rises(reference_model, desk):
    pred = reference_model.predict(desk.images[:8])
    labels = desk.labels[:8].copy()
    labels[:2] = (pred[:2] + 1) % 10  # two samples start out misclassified
    data = Dataset(desk.images[:8], labels, 10)
    report = run_campaign(Campaign(MODEL, DATA, config=AlmaConfig(iterations=100), seed=None), reference_model, data)
    acc = [a for _, a in report.curve]
    assert acc[0] == report.clean_accuracy == 0.75
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    again = camp.summarize(report.records)
    assert again.asr == report.asr and again.median_distance == report.median_distance


def test_parallel_campaign_matches_sequential(tmp_path, reference_model, desk):
    runs = {}
    for workers in (1, 3):
        out = tmp_path / f"w{workers}"
        run_campaign(Campaign(MODEL, DATA, config=AlmaConfig(iterations=60), limit=6, workers=workers, out_dir=str(out)))
        runs[workers] = (out / "samples.csv").read_bytes()
    assert runs[1] == runs[3]
    assert json.loads((tmp_path / "w1" / "report.json").read_text())["samples"] == 6


def test_campaign_rejects_bad_setup(tmp_path, reference_model):
    with pytest.raises(ValueError):
        Campaign(MODEL, DATA, attack="fgsm")
    with pytest.raises(ValueError):
        Campaign(MODEL, DATA, attack="bisect", config=AlmaConfig(distance="l1"))
    with pytest.raises(nn.ShapeError):
        run_campaign(Campaign(MODEL, DATA), reference_model, Dataset(np.zeros((2, 1, 8, 8)), np.zeros(2), 10))
    with pytest.raises(OSError):
        run_campaign(Campaign(str(tmp_path / "missing.almann"), DATA))


def test_sample_errors_are_recorded_not_raised():
    # targeted attacks need four classes, so every attacked sample of a 3-class model errors
    rng = np.random.default_rng(0)
    model = nn.mlp(rng, (1, 2, 2), (), 3)
    images = rng.uniform(size=(6, 1, 2, 2))
    data = Dataset(images, model.predict(images), 3)
    cfg = AlmaConfig(iterations=20, targeted=True)
    report = run_campaign(Campaign(MODEL, DATA, config=cfg, seed=None), model, data)
    assert report.errors == 6 and report.asr == 0.0
    assert all(r.attacked and r.error.startswith("ValueError") for r in report.records)


def test_fixed_target_out_of_range_is_a_campaign_error(reference_model, desk):
    cfg = AlmaConfig(iterations=20, targeted=True)
    with pytest.raises(ValueError, match="out of range"):
        run_campaign(Campaign(MODEL, DATA, config=cfg, target_rule="fixed:42", limit=2), reference_model, desk)


# -- CLI -------------------------------------------------------------------------


def test_cli_attack_writes_reports(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["attack", "--iterations", "30", "--limit", "3", "--out", str(out)])
    assert code == 0
    assert "asr" in capsys.readouterr().out
    assert {p.name for p in out.iterdir()} == {"samples.csv", "report.json", "curve.dat"}
    assert cli.main(["report", str(out), "--curve", "--points", "5"]) == 0
    lines = (out / "curve.dat").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 6


def test_cli_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\niterations = 40\ndistance=l1\ntargeted = yes\nlimit=2\n")
    args = cli.parse_args(["attack", "--config", str(cfg), "--iterations", "70"])
    assert args.iterations == 70 and args.distance == "l1" and args.targeted and args.limit == 2
    campaign = cli._campaign_from(args, "alma")
    assert campaign.config.iterations == 70 and campaign.config.targeted
    assert campaign.config.epsilon == 0.5


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["attack", "--config", str(tmp_path / "none.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus_key=1\n")
    assert cli.main(["attack", "--config", str(bad)]) == 2
    bad.write_text("distance=linf\n")
    assert cli.main(["attack", "--config", str(bad)]) == 2
    assert "alma:" in capsys.readouterr().err


def test_cli_other_subcommands(tmp_path, capsys):
    assert cli.main(["alm-demo", "--penalty", "p2"]) == 0
    table = capsys.readouterr().out
    assert "halfspace" in table and "inactive" in table
    assert cli.main(["penalty-attack", "--limit", "1", "--search-steps", "2", "--inner-iters", "20"]) == 0
    assert cli.main(["bisect-budget", "--limit", "1", "--pgd-steps", "20", "--precision", "0.1"]) == 0
    model = tmp_path / "m.almann"
    assert cli.main(["train-ref", "--write-data", str(tmp_path / "d.almads"), "--samples", "100", "--epochs", "30", "--out", str(model)]) == 0
    assert nn.load_model(model).num_classes == 10
    assert cli.main(["attack", "--model", str(tmp_path / "missing"), "--limit", "1"]) == 1

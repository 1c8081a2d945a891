"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 1-3 and 6 are fast numerical gates. Criteria 4, 5, 7 and 8 train
real models end to end and are marked 'slow'; they use canonical MNIST IDX
files from $OSRKIT_DATA_DIR (default ./data/mnist) when present, and
otherwise a deterministic synthetic digit corpus rendered into the same
binary formats, asserting identical thresholds either way.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from osrkit.dataio import load_dataset, make_open_set_split
from osrkit.evaluate import (
    auc_at_fpr,
    pairwise_auc,
    openness,
    roc_curve,
    welch_t_test,
)
from osrkit.losses import cross_entropy, dtae_loss, ii_loss, rotnet_loss, triplet_loss
from osrkit.osr import class_probability, outlier_score, predict
from osrkit.train import (
    PrototypeSet,
    TrainConfig,
    compute_prototypes,
    finetune,
    nearest_rank_threshold,
    pretrain,
)
from osrkit.synthetic import corpus_fingerprint, generate_corpus

from gradcheck import check_layer, numeric_grad, rel_error

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6
EXACT_TOL = 1e-9

HEADLINE_SEEDS = (0, 1, 2, 3, 4)
HEADLINE_SPLIT_SEED = 42


def _report(criterion: str, detail: str):
    print(f"[ACCEPTANCE] {criterion}: PASS ({detail})", flush=True)


# ---------------------------------------------------------------------------
# data source for the training-based criteria


def _mnist_files_present(root: Path) -> bool:
    stems = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    return all((root / s).exists() or (root / f"{s}.gz").exists() for s in stems)


@pytest.fixture(scope="session")
def acceptance_data(tmp_path_factory):
    """(train, test, source_tag): real MNIST when available, else the
    synthetic corpus written and re-read through the real IDX loaders."""
    root = Path(os.environ.get("OSRKIT_DATA_DIR", "data/mnist"))
    if _mnist_files_present(root):
        train, test = load_dataset("mnist", root)
        return train, test, "mnist"
    cache = (tmp_path_factory.getbasetemp().parent
             / f"osrkit-acceptance-{corpus_fingerprint()}")
    marker = cache / ".complete"
    if not marker.exists():
        generate_corpus(cache, n_train_per_class=1200, n_test_per_class=400)
        marker.write_text("ok")
    train, test = load_dataset("mnist", cache)
    return train, test, "synthetic"


@pytest.fixture(scope="session")
def headline_runs(acceptance_data):
    """Criteria 4+5 training grid: ce fine-tuning with and without
    detransformation pre-training, paired over the same five run seeds on
    one open-set split, at the default desk-scale config."""
    ds_train, ds_test, source = acceptance_data
    split = make_open_set_split(ds_train, ds_test, num_known=6,
                                seed=HEADLINE_SPLIT_SEED)
    results = {"none": [], "dtae": []}
    t0 = time.time()
    for seed in HEADLINE_SEEDS:
        for method in ("none", "dtae"):
            from osrkit.evaluate import evaluate_model
            cfg = TrainConfig(pretrain_method=method, finetune_loss="ce", seed=seed)
            init = pretrain(split, cfg) if method != "none" else None
            ckpt = finetune(split, cfg, init)
            protos = compute_prototypes(ckpt, split, contamination=0.01)
            report = evaluate_model(ckpt, protos, split, metadata={
                "seed": seed, "pretrain": method,
                "pretrain_history": init.meta["loss_history"] if init else [],
                "finetune_history": ckpt.meta["loss_history"],
            })
            results[method].append(report)
    return {"results": results, "source": source,
            "wall_seconds": time.time() - t0}


def _dump_diagnostics(runs, where: Path) -> Path:
    where.mkdir(parents=True, exist_ok=True)
    for method, reports in runs["results"].items():
        for rep in reports:
            seed = rep.metadata["seed"]
            payload = {
                "auc_100": rep.auc_100,
                "auc_10": rep.auc_10,
                "pretrain_history": rep.metadata["pretrain_history"],
                "finetune_history": rep.metadata["finetune_history"],
                "histogram": {
                    "edges": rep.histograms.edges.tolist(),
                    "known": rep.histograms.known.tolist(),
                    "unknown": rep.histograms.unknown.tolist(),
                },
            }
            (where / f"{method}_seed{seed}.json").write_text(
                json.dumps(payload, indent=2))
    return where


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def test_criterion_1_gradient_correctness():
    from osrkit.layers import (BatchNorm, Conv2D, Dense, Dropout, MaxPool2D,
                               ReLU, Sigmoid, Upsample2x)

    trials = 20
    worst = {}

    def run(name, make_layer, make_input, training=False):
        errs = []
        for t in range(trials):
            rng = np.random.default_rng(hash(name) % 10_000 + t)
            layer = make_layer(rng)
            x = make_input(rng)
            errors = check_layer(layer, x, training=training, rng=rng)
            errs.append(max(errors.values()))
            assert max(errors.values()) < GRAD_TOL, f"{name} trial {t}: {errors}"
        worst[name] = max(errs)

    run("conv", lambda r: Conv2D(2, 3, r, dtype=np.float64),
        lambda r: r.standard_normal((2, 5, 6, 2)))
    run("pool", lambda r: MaxPool2D(), lambda r: r.standard_normal((2, 6, 7, 2)))
    run("dense", lambda r: Dense(5, 4, r, dtype=np.float64),
        lambda r: r.standard_normal((3, 5)))
    run("batchnorm", lambda r: BatchNorm(4, dtype=np.float64),
        lambda r: r.standard_normal((6, 4)), training=True)
    run("dropout-off", lambda r: Dropout(0.5, r), lambda r: r.standard_normal((3, 4)))
    run("sigmoid", lambda r: Sigmoid(), lambda r: r.standard_normal((3, 4)) * 2)
    run("relu", lambda r: ReLU(),
        lambda r: np.where(np.abs(z := r.standard_normal((3, 4))) < 1e-3, z + 0.01, z))
    run("upsample", lambda r: Upsample2x(), lambda r: r.standard_normal((2, 3, 3, 2)))

    # every loss, through its analytic gradient
    for t in range(trials):
        rng = np.random.default_rng(9000 + t)
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, 5)
        assert rel_error(cross_entropy(logits, labels).grad,
                         numeric_grad(lambda: cross_entropy(logits, labels).scalar,
                                      logits)) < GRAD_TOL
        assert rel_error(rotnet_loss(logits, labels).grad,
                         numeric_grad(lambda: rotnet_loss(logits, labels).scalar,
                                      logits)) < GRAD_TOL
        z = rng.standard_normal((8, 6))
        cls = np.repeat(np.arange(2), 4)
        assert rel_error(ii_loss(z, cls).grad,
                         numeric_grad(lambda: ii_loss(z, cls).scalar, z)) < GRAD_TOL
        assert rel_error(triplet_loss(z, cls, 0.2).grad,
                         numeric_grad(lambda: triplet_loss(z, cls, 0.2).scalar,
                                      z)) < GRAD_TOL
        orig = rng.random((2, 3, 3, 1))
        rec = rng.random((8, 3, 3, 1))
        oi = np.tile(np.arange(2), 4)
        assert rel_error(dtae_loss(orig, rec, oi).grad,
                         numeric_grad(lambda: dtae_loss(orig, rec, oi).scalar,
                                      rec)) < GRAD_TOL
    _report("criterion 1 (gradient correctness)",
            f"8 layer types + 5 losses x {trials} trials, "
            f"worst layer rel err {max(worst.values()):.2e} < {GRAD_TOL}")


# ---------------------------------------------------------------------------
# criterion 2: oracle equivalence


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(271828)
    # AUC vs pairwise counting on 200 random instances
    worst_auc = 0.0
    for _ in range(200):
        nk, nu = rng.integers(2, 40, size=2)
        known = np.round(rng.random(nk), 2)
        unknown = np.round(rng.random(nu), 2)
        got = auc_at_fpr(roc_curve(known, unknown), 1.0)
        worst_auc = max(worst_auc, abs(got - pairwise_auc(known, unknown)))
    assert worst_auc < EXACT_TOL

    # losses vs brute-force loops
    from test_losses import _dtae_oracle, _ii_oracle, _triplet_oracle
    worst_loss = 0.0
    for _ in range(25):
        z = rng.standard_normal((9, 6))
        labels = np.repeat(np.arange(3), 3)
        worst_loss = max(worst_loss,
                         abs(ii_loss(z, labels).scalar - _ii_oracle(z, labels)),
                         abs(triplet_loss(z, labels, 0.2).scalar
                             - _triplet_oracle(z, labels, 0.2)))
        orig = rng.random((3, 4, 4, 1))
        rec = rng.random((12, 4, 4, 1))
        oi = np.tile(np.arange(3), 4)
        worst_loss = max(worst_loss, abs(dtae_loss(orig, rec, oi).raw_sum
                                         - _dtae_oracle(orig, rec, oi)))
    assert worst_loss < ORACLE_TOL

    # outlier score and distance-mode probabilities vs direct evaluation
    worst_osr = 0.0
    for _ in range(200):
        mu = rng.standard_normal((int(rng.integers(2, 8)), 6))
        z = rng.standard_normal(6)
        protos = PrototypeSet(mu=mu, threshold=1.0)
        d2 = np.array([float((m - z) @ (m - z)) for m in mu])
        worst_osr = max(worst_osr, abs(outlier_score(z, protos) - d2.min()))
        direct = np.exp(-d2) / np.exp(-d2).sum()
        worst_osr = max(worst_osr,
                        float(np.abs(class_probability(protos, z=z) - direct).max()))
    assert worst_osr < EXACT_TOL
    _report("criterion 2 (oracle equivalence)",
            f"auc {worst_auc:.1e}, losses {worst_loss:.1e}, osr {worst_osr:.1e}")


# ---------------------------------------------------------------------------
# criterion 3: formula reproduction


def test_criterion_3_formula_reproduction():
    o_low = openness(2, 10, 3)
    o_high = openness(8, 10, 9)
    assert round(o_low, 4) == 0.4453
    assert round(o_high, 4) == 0.0823

    rng = np.random.default_rng(5)
    for n in (50, 100, 137, 1000, 3600):
        scores = rng.random(n)
        thr = nearest_rank_threshold(scores, 0.01)
        above = int((scores > thr).sum())
        assert above <= int(np.ceil(0.01 * n)), (n, above)
    _report("criterion 3 (formula reproduction)",
            f"openness(2,10,3)={o_low:.4f}, openness(8,10,9)={o_high:.4f}, "
            "threshold contamination bound holds")


# ---------------------------------------------------------------------------
# criteria 4+5: desk-scale headline + directional claim


@pytest.mark.slow
def test_criterion_4_headline_reproduction(headline_runs):
    aucs = [r.auc_100 for r in headline_runs["results"]["dtae"]]
    mean_auc = float(np.mean(aucs))
    assert mean_auc >= 0.92, f"mean AUC {mean_auc:.4f} < 0.92 ({aucs})"
    assert abs(mean_auc - 0.9523) <= 0.03, \
        f"mean AUC {mean_auc:.4f} outside 0.9523 +/- 0.03 ({aucs})"
    _report("criterion 4 (headline reproduction)",
            f"ce+dtae mean AUC100 {mean_auc:.4f} over {len(aucs)} runs "
            f"on {headline_runs['source']} data, "
            f"wall {headline_runs['wall_seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_5_directional_claim(headline_runs, tmp_path):
    dtae = np.array([r.auc_100 for r in headline_runs["results"]["dtae"]])
    base = np.array([r.auc_100 for r in headline_runs["results"]["none"]])
    gap = float((dtae - base).mean())
    if gap < 0.01:
        where = _dump_diagnostics(headline_runs, tmp_path / "diagnostics")
        pytest.fail(f"mean paired AUC gap {gap:+.4f} < 0.01 "
                    f"(dtae {dtae.round(4).tolist()} vs none {base.round(4).tolist()}); "
                    f"loss curves and score histograms dumped to {where}")
    _report("criterion 5 (directional claim)",
            f"mean paired gap {gap:+.4f} >= 0.01 over {len(dtae)} seeds "
            f"on {headline_runs['source']} data")


# ---------------------------------------------------------------------------
# criterion 6: pipeline invariant suite


def test_criterion_6_pipeline_invariants(tiny_split, tmp_path):
    rng = np.random.default_rng(99)

    # class-probability simplex normalisation
    for _ in range(200):
        mu = rng.standard_normal((5, 6)) * rng.uniform(0.1, 20)
        probs = class_probability(PrototypeSet(mu=mu, threshold=1.0),
                                  z=rng.standard_normal(6))
        assert abs(probs.sum() - 1.0) < 1e-6 and probs.min() >= 0.0

    # strict-threshold boundary: equality stays known, epsilon above rejects
    mu = np.zeros((1, 6))
    protos = PrototypeSet(mu=mu, threshold=4.0)
    z_at = np.zeros(6)
    z_at[0] = 2.0
    assert not predict(protos, z_at).is_unknown
    z_above = z_at.copy()
    z_above[0] = 2.0 + 1e-6
    assert predict(protos, z_above).is_unknown

    # distance-mode argmax equals nearest prototype
    for _ in range(100):
        mu = rng.standard_normal((6, 6))
        z = rng.standard_normal(6)
        probs = class_probability(PrototypeSet(mu=mu, threshold=1.0), z=z)
        d2 = ((mu - z) ** 2).sum(axis=1)
        assert int(np.argmax(probs)) == int(np.argmin(d2))

    # rotation group property
    from osrkit.transforms import rotate90
    img = rng.random((8, 8, 1))
    for t1 in range(4):
        for t2 in range(4):
            np.testing.assert_array_equal(
                rotate90(rotate90(img, t1), t2), rotate90(img, (t1 + t2) % 4))

    # checkpoint round trip is bit-identical on a trained model
    from osrkit.checkpoint import load_checkpoint
    from osrkit.train import encode_images, rebuild_encoder, save_run_checkpoint
    cfg = TrainConfig(pretrain_method="none", seed=1, pretrain_epochs=1,
                      finetune_epochs=1, batch_size=16, train_limit=0)
    ckpt = finetune(tiny_split, cfg)
    before = encode_images(rebuild_encoder(ckpt), tiny_split, "test")
    save_run_checkpoint(tmp_path / "ck.npz", ckpt)
    after = encode_images(rebuild_encoder(load_checkpoint(tmp_path / "ck.npz")),
                          tiny_split, "test")
    np.testing.assert_array_equal(before, after)

    # full-run determinism under a fixed seed
    from osrkit.evaluate import evaluate_model
    reports = []
    for _ in range(2):
        ck = finetune(tiny_split, cfg)
        protos2 = compute_prototypes(ck, tiny_split)
        reports.append(evaluate_model(ck, protos2, tiny_split))
    assert reports[0].auc_100 == reports[1].auc_100
    np.testing.assert_array_equal(reports[0].confusion, reports[1].confusion)
    np.testing.assert_array_equal(reports[0].outlier_scores, reports[1].outlier_scores)
    _report("criterion 6 (pipeline invariants)",
            "simplex, strict boundary, argmax/argmin, rotation group, "
            "checkpoint round trip, full-run determinism")


# ---------------------------------------------------------------------------
# criterion 7: protocol fidelity


@pytest.mark.slow
def test_criterion_7_protocol_fidelity(tmp_path):
    from osrkit.cli import cmd_experiment
    from osrkit.config import ExperimentConfig
    from osrkit.synthetic import render_digits, write_idx

    data_dir = tmp_path / "data"
    images, labels = render_digits(8, seed=61)
    test_images, test_labels = render_digits(4, seed=62)
    write_idx(images, labels, data_dir / "train-images-idx3-ubyte",
              data_dir / "train-labels-idx1-ubyte")
    write_idx(test_images, test_labels, data_dir / "t10k-images-idx3-ubyte",
              data_dir / "t10k-labels-idx1-ubyte")

    cfg = ExperimentConfig(dataset="mnist", data_dir=str(data_dir),
                           output_dir=str(tmp_path / "runs"), batch_size=16,
                           train_limit=0, groups=3, runs_per_group=10)
    cfg.pretrain.epochs = 1
    cfg.finetune.epochs = 1
    cmd_experiment(cfg, force=False, pretrain_methods=("none", "dtae"),
                   losses=("ce",))

    # exactly 30 per-run reports per arm
    for arm in ("none-ce", "dtae-ce"):
        reports = sorted((tmp_path / "runs" / "mnist" / arm).glob(
            "group*/run*/report.json"))
        assert len(reports) == 30, f"{arm}: {len(reports)} reports"

    # Table-1-shaped CSV with significance markers from Welch at alpha=0.05
    table = (tmp_path / "runs" / "mnist" / "table_auc.csv").read_text().splitlines()
    assert table[0] == "loss,pretrain,fpr_cap,mean_auc,std_auc,p_vs_none,significant"
    assert len(table) == 1 + 2 * 2
    agg = json.loads((tmp_path / "runs" / "mnist" / "aggregate.json").read_text())
    sig = agg["significance"]["dtae-ce"]["auc_100"]
    a = agg["arms"]["dtae-ce"]["values"]["auc_100"]
    b = agg["arms"]["none-ce"]["values"]["auc_100"]
    expected = welch_t_test(a, b)
    assert sig["p"] == pytest.approx(expected.p, rel=1e-9)
    assert sig["significant_improvement"] == bool(
        expected.p < 0.05 and np.mean(a) > np.mean(b))
    _report("criterion 7 (protocol fidelity)",
            "30 reports per arm over 3 groups x 10 runs; Welch-marked table emitted")


# ---------------------------------------------------------------------------
# criterion 8: smoke end-to-end


@pytest.mark.slow
def test_criterion_8_smoke_end_to_end(acceptance_data, tmp_path, capsys):
    from osrkit.cli import main
    from osrkit.synthetic import write_idx

    ds_train, ds_test, source = acceptance_data
    data_dir = tmp_path / "data"
    write_idx(ds_train.images, ds_train.labels,
              data_dir / "train-images-idx3-ubyte", data_dir / "train-labels-idx1-ubyte")
    write_idx(ds_test.images, ds_test.labels,
              data_dir / "t10k-images-idx3-ubyte", data_dir / "t10k-labels-idx1-ubyte")
    out = tmp_path / "runs"
    args = ["--dataset", "mnist", "--data-dir", str(data_dir),
            "--output-dir", str(out), "--pretrain", "dtae", "--loss", "ce",
            "--pretrain-epochs", "2", "--finetune-epochs", "3"]
    t0 = time.time()
    assert main(["pretrain", *args]) == 0
    assert main(["finetune", *args]) == 0
    assert main(["evaluate", *args]) == 0
    elapsed = time.time() - t0
    capsys.readouterr()
    assert elapsed < 600, f"smoke pipeline took {elapsed:.0f}s (>= 10 min)"

    cell = out / "mnist" / "dtae-ce" / "group0" / "run0"
    expected_files = [
        "pretrained.npz", "pretrain_history.csv", "finetuned.npz",
        "finetune_history.csv", "prototypes.json", "report.json",
        "confusion.csv", "histograms.csv", "representations.csv", "config.toml",
    ]
    missing = [f for f in expected_files if not (cell / f).exists()]
    assert not missing, f"missing artifacts: {missing}"
    report = json.loads((cell / "report.json").read_text())
    assert 0.0 <= report["auc_100"] <= 1.0
    assert np.array(report["confusion"]).shape == (7, 7)
    _report("criterion 8 (smoke end-to-end)",
            f"pretrain->finetune->evaluate in {elapsed / 60:.1f} min "
            f"on {source} data; all {len(expected_files)} artifacts present")

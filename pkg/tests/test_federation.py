import numpy as np
import pytest
import torch
from torch import nn

from csac.aggregation import fuse_divergence_weighted
from csac.datasets import DomainDataset, leave_one_domain_out, synthetic_domains
from csac.errors import ConfigError, DataError
from csac.federation import (
    ROUNDS_CSV_FIELDS,
    AccessAudit,
    TrainingConfig,
    _order_seed,
    calibration_round,
    calibration_step_loss,
    evaluate,
    flatten_logs,
    local_acquisition,
    run_csac,
    run_deepall,
    run_fedavg,
    train_epochs,
)
from csac.models import build_mnist_cnn, build_projection, clone_model, export_parameters


@pytest.fixture(scope="module")
def split():
    doms = synthetic_domains(seed=3, H=4, C=4, shift=1.0, n_train_per_class=12, n_test_per_class=8)
    return leave_one_domain_out(doms, "S3")


def _init(ds, seed=5):
    h, w, ch = ds.image_shape
    return build_mnist_cnn(ds.num_classes, seed, (ch, h, w))


# --- config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(rounds=-1)
    with pytest.raises(ConfigError):
        TrainingConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainingConfig(attention="spatial")
    with pytest.raises(ConfigError, match="unknown training option"):
        TrainingConfig().replace(lambda_=1.0)


def test_config_defaults():
    cfg = TrainingConfig()
    assert (cfg.acquisition_epochs, cfg.rounds, cfg.calibration_epochs) == (30, 40, 5)
    assert (cfg.lam, cfg.smoothing, cfg.lr, cfg.momentum, cfg.batch_size) == (0.6, 0.1, 0.01, 0.5, 64)
    assert cfg.metric == "l2" and cfg.fusion == "divergence"
    assert not cfg.refresh_local_each_round


# --- local steps ---------------------------------------------------------------------

def test_zero_epoch_acquisition_keeps_init(split):
    ds = split.sources[0].train
    init = export_parameters(_init(ds))
    model = local_acquisition(ds, TrainingConfig(acquisition_epochs=0), init)
    assert export_parameters(model).equals(init)


def test_acquisition_beats_untrained():
    dom = synthetic_domains(seed=1, H=2, C=4, shift=0.5, n_train_per_class=40, n_test_per_class=30)[0]
    cfg = TrainingConfig(acquisition_epochs=30, seed=0, batch_size=32)
    untrained = evaluate(_init(dom.train, 0), dom.test)
    assert evaluate(local_acquisition(dom.train, cfg), dom.test) > untrained + 0.2


def test_lambda_zero_round_is_plain_finetuning(split):
    ds = split.sources[0].train
    cfg = TrainingConfig(lam=0.0, calibration_epochs=2, batch_size=16, seed=1)
    start = _init(ds, 2)
    fused = export_parameters(start)
    proj = build_projection(start.tap_shapes, 0)
    tree, losses = calibration_round(ds, fused, clone_model(start), proj, cfg, seed=11)
    plain = clone_model(start)
    hist = train_epochs(plain, ds, 2, cfg, seed=11)
    assert tree.equals(export_parameters(plain))
    assert losses["align"] == 0.0
    assert losses["retrain"] == pytest.approx(np.mean(hist), rel=1e-6)


def test_frozen_local_unchanged_by_round(split):
    ds = split.sources[0].train
    cfg = TrainingConfig(calibration_epochs=1, batch_size=16)
    frozen = _init(ds, 9)
    before = export_parameters(frozen)
    proj = build_projection(frozen.tap_shapes, 0)
    proj_before = [p.detach().clone() for p in proj.parameters()]
    calibration_round(ds, export_parameters(_init(ds, 3)), frozen, proj, cfg)
    assert export_parameters(frozen).equals(before)
    # the projection head is trained jointly and kept by the caller
    assert any(not torch.equal(a, b) for a, b in zip(proj_before, proj.parameters()))


def test_single_step_descends_in_double_precision(split):
    ds = split.sources[0].train
    torch.manual_seed(0)
    model, frozen = _init(ds, 0).double(), _init(ds, 1).double()
    proj = build_projection(model.tap_shapes, 2).double()
    x = torch.from_numpy(ds.images[:16]).permute(0, 3, 1, 2).double()
    y = torch.from_numpy(ds.labels[:16])
    cfg = TrainingConfig(lam=0.6)
    params = list(model.parameters()) + list(proj.parameters())
    loss, _, _ = calibration_step_loss(model, frozen, proj, x, y, cfg)
    grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p -= 1e-3 * g
    after, _, _ = calibration_step_loss(model, frozen, proj, x, y, cfg)
    assert float(after.detach()) < float(loss.detach())


def test_alignment_off_and_mse_variants_finite(split):
    ds = split.sources[0].train
    model, frozen = _init(ds, 0), _init(ds, 1)
    proj = build_projection(model.tap_shapes, 2)
    x = torch.from_numpy(ds.images[:8]).permute(0, 3, 1, 2)
    y = torch.from_numpy(ds.labels[:8])
    for over in ({"alignment": False}, {"discrepancy": "mse"}, {"same_layer_only": True},
                 {"attention": "uniform"}, {"retrain_ce": False}):
        loss, l_al, l_ar = calibration_step_loss(model, frozen, proj, x, y, TrainingConfig().replace(**over))
        assert torch.isfinite(loss)
        if over == {"alignment": False}:
            assert float(l_al) == 0.0
        if over == {"retrain_ce": False}:
            assert float(l_ar) == 0.0


# --- evaluation ------------------------------------------------------------------------

class _Fixed(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1))
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def _coded(labels, C):
    labels = np.asarray(labels)
    imgs = np.zeros((len(labels), 4, 4, 1), np.float32)
    imgs[:, 0, 0, 0] = labels / 10.0
    return DomainDataset("e", imgs, labels, C)


def test_evaluate_constant_and_lookup():
    ds = _coded(np.repeat(np.arange(5), 4), 5)
    always0 = _Fixed(lambda x: torch.eye(5)[torch.zeros(len(x), dtype=torch.long)])
    lookup = _Fixed(lambda x: torch.eye(5)[(x[:, 0, 0, 0] * 10).round().long()])
    assert evaluate(always0, ds) == pytest.approx(1 / 5)
    assert evaluate(lookup, ds) == 1.0


def test_evaluate_hand_counted():
    truth = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    preds = torch.tensor([0, 1, 1, 0, 2, 2, 1, 1, 2, 2])
    # hand count: indices 0,1,3,5,7,8 correct -> 6 / 10
    model = _Fixed(lambda x: torch.eye(3)[preds[: len(x)]])
    assert evaluate(model, _coded(truth, 3), batch_size=1000) == 0.6


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        DomainDataset("e", np.zeros((0, 4, 4, 1)), np.zeros(0, int), 3)


# --- runners ---------------------------------------------------------------------------

def test_rounds_zero_is_fusion_of_acquired_models(split):
    cfg = TrainingConfig(acquisition_epochs=1, rounds=0, batch_size=16, seed=5)
    final, logs = run_csac(split, cfg)
    assert [l.phase for l in logs] == ["acquisition", "final"]
    init = export_parameters(_init(split.target.train, cfg.seed))
    trees = [export_parameters(local_acquisition(d.train, cfg, init, _order_seed(cfg.seed, 1000 * i + 1)))
             for i, d in enumerate(split.sources)]
    expected, _ = fuse_divergence_weighted(trees)
    assert export_parameters(final).equals(expected)


def test_csac_is_bit_reproducible(split, tiny_cfg):
    a_model, a_logs = run_csac(split, tiny_cfg)
    b_model, b_logs = run_csac(split, tiny_cfg)
    assert export_parameters(a_model).equals(export_parameters(b_model))
    assert flatten_logs(a_logs) == flatten_logs(b_logs)


def test_parallel_clients_match_sequential(split, tiny_cfg):
    seq, seq_logs = run_csac(split, tiny_cfg)
    par, par_logs = run_csac(split, tiny_cfg.replace(max_workers=3))
    assert export_parameters(seq).equals(export_parameters(par))
    assert flatten_logs(seq_logs) == flatten_logs(par_logs)


def test_csac_logs_and_audit(split, tiny_cfg):
    audit = AccessAudit()
    _, logs = run_csac(split, tiny_cfg, audit=audit)
    assert [l.round for l in logs] == [0, 1, 2, 3]
    assert [l.phase for l in logs] == ["acquisition", "calibration", "calibration", "final"]
    for log in logs[1:]:
        assert 0.0 <= log.target_acc <= 1.0
        assert set(log.source_acc) == {"S0", "S1", "S2"}
        for w in log.fusion.weights.values():
            assert w.sum() == pytest.approx(1.0)
    assert logs[1].target_acc_after == logs[2].target_acc
    assert set(logs[1].losses) == {"S0", "S1", "S2"}
    assert audit.records and not audit.cross_client_reads()
    owners = {r.owner for r in audit.records}
    # the held-out target is owned by the evaluator, never by a client
    assert owners == {"S0", "S1", "S2", "evaluator"}


def test_csac_requires_two_sources(split, tiny_cfg):
    one = leave_one_domain_out([split.sources[0], split.target], "S3")
    with pytest.raises(DataError):
        run_csac(one, tiny_cfg)


def test_identical_sources_keep_weights_near_uniform():
    doms = synthetic_domains(seed=4, H=4, C=4, shift=0.0, n_train_per_class=15, n_test_per_class=5)
    cfg = TrainingConfig(acquisition_epochs=3, rounds=3, calibration_epochs=1, batch_size=16,
                         eval_sources=False)
    _, logs = run_csac(leave_one_domain_out(doms, "S3"), cfg)
    # distances to the average differ only by optimisation noise
    dev = [np.abs(w - 1 / 3).max() for log in logs[1:] for w in log.fusion.weights.values()]
    assert np.mean(dev) < 0.06
    assert max(dev) < 0.15


def test_switched_off_csac_equals_fedavg(split):
    cfg = TrainingConfig(acquisition_epochs=1, rounds=2, calibration_epochs=1, batch_size=16, seed=2,
                         fusion="average", alignment=False, label_smoothing=False)
    c_model, c_logs = run_csac(split, cfg)
    f_model, f_logs = run_fedavg(split, cfg)
    assert export_parameters(c_model).equals(export_parameters(f_model))
    assert [l.target_acc for l in c_logs[1:]] == [l.target_acc for l in f_logs[1:]]


def test_fedavg_single_client_is_local_training(split):
    one = leave_one_domain_out([split.sources[0], split.target], "S3")
    cfg = TrainingConfig(acquisition_epochs=2, rounds=2, calibration_epochs=1, batch_size=16, seed=4)
    model, logs = run_fedavg(one, cfg)
    local = _init(one.target.train, cfg.seed)
    for r in range(cfg.rounds + 1):
        epochs = cfg.acquisition_epochs if r == 0 else cfg.calibration_epochs
        train_epochs(local, one.sources[0].train, epochs, cfg, _order_seed(cfg.seed, r + 1))
    assert export_parameters(model).equals(export_parameters(local))
    assert len(logs) == cfg.rounds + 2


def test_fedavg_tiny_lr_stays_at_init(split):
    cfg = TrainingConfig(acquisition_epochs=1, rounds=0, batch_size=1000, lr=1e-12, seed=4)
    model, _ = run_fedavg(split, cfg)
    init = export_parameters(_init(split.target.train, cfg.seed))
    final = export_parameters(model)
    for g in init:
        np.testing.assert_allclose(final.flatten(g), init.flatten(g), atol=1e-7)


def test_deepall_single_source_is_local_training(split):
    one = leave_one_domain_out([split.sources[0], split.target], "S3")
    cfg = TrainingConfig(acquisition_epochs=2, rounds=1, calibration_epochs=1, batch_size=16, seed=4)
    model, logs = run_deepall(one, cfg)
    local = _init(one.target.train, cfg.seed)
    train_epochs(local, one.sources[0].train, 3, cfg, _order_seed(cfg.seed, 1))
    assert export_parameters(model).equals(export_parameters(local))
    assert len(logs) == 3


def test_deepall_source_accuracy_rises_early():
    doms = synthetic_domains(seed=1, H=3, C=4, shift=0.5, n_train_per_class=40, n_test_per_class=20)
    cfg = TrainingConfig(acquisition_epochs=25, rounds=0, batch_size=32, seed=0)
    audit = AccessAudit()
    _, logs = run_deepall(leave_one_domain_out(doms, "S2"), cfg, audit=audit)
    mean_acc = [np.mean(list(l.source_acc.values())) for l in logs]
    assert np.mean(mean_acc[-5:]) > np.mean(mean_acc[:3])
    # central pooling is the one place sources are read by a non-owner
    assert {r.reader for r in audit.cross_client_reads()} <= {"central", "evaluator"}


def test_checkpoints_and_flat_rows(split, tiny_cfg, tmp_path):
    from csac.models import load_checkpoint

    model, logs = run_csac(split, tiny_cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["round_001", "round_002", "round_003"]
    tree, manifest = load_checkpoint(tmp_path / "round_003")
    assert tree.equals(export_parameters(model)) and manifest["round"] == 3
    rows = flatten_logs(logs, seed=7, method="csac")
    assert all(set(r) == set(ROUNDS_CSV_FIELDS) for r in rows)
    assert sum(r["role"] == "target" for r in rows) == len(logs)

import csv

import numpy as np
import pytest

from fedrec import channel as ch
from fedrec import fed, nn
from fedrec.fed import FedConfig, ProtocolError
from fedrec.nn import LocalTrainer, ModelParams, TrainConfig
from fedrec.rng import stream


def user_data(U, n, snr=10.0, seed=0, scales=None):
    c = ch.Constellation.for_snr(snr)
    scales = np.ones(U) if scales is None else scales
    return [ch.gen_dataset(u, float(scales[u]), n, c, stream(seed, "data", u), stream(seed, "noise", u))
            for u in range(U)]


def test_config_validation_and_tau():
    cfg = FedConfig()
    assert (cfg.U, cfg.rounds, cfg.local_epochs_per_round) == (5, 5, 5)
    assert cfg.tau(4000) == 5 * 200
    assert cfg.tau(4001) == 5 * 201
    for bad in (dict(U=0), dict(rounds=-1), dict(local_epochs_per_round=0)):
        with pytest.raises(ValueError):
            FedConfig(**bad)


def test_single_user_fedrec_is_local_training():
    ds = user_data(1, 400)
    cfg = FedConfig(U=1, rounds=3, local_epochs_per_round=2, train=TrainConfig(epochs=6))
    a = fed.fedrec_train(ds, cfg, seed=11).params
    b = fed.noncollab_train(ds, cfg.train, seed=11)[0]
    np.testing.assert_array_equal(a.flat, b.flat)
    c = fed.centralized_train(ds, cfg.train, seed=11)
    np.testing.assert_array_equal(a.flat, c.flat)


def test_identical_users_give_the_single_user_result():
    d = user_data(1, 300)[0]
    theta = nn.init_params(stream(0, "init", 0))
    cfg = TrainConfig(shuffle_seed=5)
    users = [LocalTrainer.from_data(theta, d, cfg) for _ in range(4)]
    new, _ = fed.fed_round(theta, users, epochs=2)
    single = LocalTrainer.from_data(theta, d, cfg).run(2)
    np.testing.assert_allclose(new.flat, single.flat, rtol=0, atol=1e-12)


def test_delta_and_endpoint_aggregation_agree():
    ds = user_data(5, 200, scales=np.linspace(0.5, 1.5, 5))
    theta = nn.init_params(stream(1, "init", 0))
    users = [LocalTrainer.from_data(theta, d, TrainConfig(shuffle_seed=u)) for u, d in enumerate(ds)]
    new, _ = fed.fed_round(theta, users, epochs=1)
    deltas = [u.params.flat - theta.flat for u in users]
    np.testing.assert_allclose(fed.aggregate_deltas(theta.flat, deltas), new.flat, rtol=0, atol=1e-12)


def test_round_rejects_mismatched_models():
    d = user_data(1, 50)[0]
    theta = nn.init_params(stream(0, "init", 0))
    other = nn.init_params(stream(0, "init", 0), (2, 4, 16))
    users = [LocalTrainer.from_data(theta, d, TrainConfig()), LocalTrainer.from_data(other, d, TrainConfig())]
    with pytest.raises(ProtocolError):
        fed.fed_round(theta, users, epochs=1)


def test_zero_rounds_returns_initial_model():
    ds = user_data(2, 50)
    res = fed.fedrec_train(ds, FedConfig(U=2, rounds=0), seed=3)
    np.testing.assert_array_equal(res.params.flat, nn.init_params(stream(3, "init", 0)).flat)
    assert res.telemetry == []


def test_unequal_datasets_rejected():
    ds = user_data(2, 50)
    ds[1] = user_data(1, 40)[0]
    with pytest.raises(ValueError):
        fed.fedrec_train(ds, FedConfig(U=2), seed=0)


def test_parallel_users_do_not_change_the_result():
    ds = user_data(3, 200, scales=[0.6, 1.0, 1.4])
    cfg = FedConfig(U=3, rounds=2, local_epochs_per_round=2)
    a = fed.fedrec_train(ds, cfg, seed=4, workers=1)
    b = fed.fedrec_train(ds, cfg, seed=4, workers=3)
    np.testing.assert_array_equal(a.params.flat, b.params.flat)
    assert a.telemetry == b.telemetry


def test_telemetry_records_and_csv(tmp_path):
    ds = user_data(2, 200)
    res = fed.fedrec_train(ds, FedConfig(U=2, rounds=3, local_epochs_per_round=1), seed=0)
    assert [(r.round, r.user) for r in res.telemetry] == [(r, u) for r in range(3) for u in range(2)]
    assert all(r.local_loss_after < r.local_loss_before for r in res.telemetry)
    path = fed.write_telemetry_csv(res.telemetry, tmp_path / "t.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", "user", "local_loss_before", "local_loss_after", "delta_norm"]
    assert len(rows) == 7
    assert float(rows[1][4]) == res.telemetry[0].delta_norm


def test_fedrec_reduces_pooled_loss_for_most_seeds():
    wins = 0
    for seed in range(5):
        ds = user_data(5, 200, seed=seed, scales=ch.draw_user_scales(5, stream(seed, "scales")))
        res = fed.fedrec_train(ds, FedConfig(rounds=2, local_epochs_per_round=2), seed)
        init = nn.init_params(stream(seed, "init", 0))
        wins += fed.pooled_loss(res.params, ds) <= fed.pooled_loss(init, ds)
    assert wins >= 3


def test_centralized_pools_every_record():
    ds = user_data(3, 100)
    msgs, feats = fed._pool(ds)
    assert len(msgs) == 300 and feats.shape == (300, 2)
    with pytest.raises(ValueError):
        fed.centralized_train([], TrainConfig(), 0)


def test_noncollab_gives_one_model_per_user():
    ds = user_data(3, 100)
    models = fed.noncollab_train(ds, TrainConfig(epochs=1), 0)
    assert len(models) == 3
    assert not np.array_equal(models[0].flat, models[1].flat)


@pytest.mark.parametrize("U,ul", [(1, 240), (2, 480), (5, 1200)])
def test_overhead_table(U, ul):
    r = fed.comm_overhead("FedRec", U, 48, 5, 20_000)
    assert (r.ul_words, r.dl_words) == (ul, 240)
    cl = fed.comm_overhead("CL", U, 48, 5, 20_000)
    assert (cl.ul_words, cl.dl_words) == (40_000, 48)
    nl = fed.comm_overhead("NL", U, 48, 5, 20_000)
    assert (nl.ul_words, nl.dl_words) == (0, 0)


def test_overhead_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        fed.comm_overhead("MAP", 5, 48, 5, 20_000)

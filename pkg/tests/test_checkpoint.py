import pytest
import torch

from opcc.checkpoint import (
    dump_checkpoint,
    load_checkpoint,
    model_checksum,
    parse_checkpoint,
    save_checkpoint,
)
from opcc.context import ContextConfig, ContextModel
from opcc.errors import CorruptStreamError
from opcc.training import TrainConfig, load_train_config, train


def tiny():
    torch.manual_seed(0)
    return ContextModel(ContextConfig(8, channel_width=4, variant="gred"))


def test_round_trip(tmp_path):
    model = tiny()
    raw = save_checkpoint(tmp_path / "m.ckpt", model, step=7, meta={"note": "x"})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.step == 7 and ck.meta == {"note": "x"} and ck.model.cfg == model.cfg
    for (a, x), (b, y) in zip(sorted(model.state_dict().items()), sorted(ck.model.state_dict().items())):
        assert a == b and torch.equal(x, y)
    assert model_checksum(ck.model) == model_checksum(model)
    assert dump_checkpoint(ck.model, 7, meta={"note": "x"}) == raw


def test_checksum_tracks_weights():
    a, b = tiny(), tiny()
    assert model_checksum(a) == model_checksum(b)
    with torch.no_grad():
        next(b.parameters()).view(-1)[0] += 1e-3
    assert model_checksum(a) != model_checksum(b)


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:8],
    lambda r: r[:-4],
    lambda r: r[:-100] + bytes([r[-100] ^ 0x40]) + r[-99:],
])
def test_corrupt_checkpoints(mutate):
    with pytest.raises(CorruptStreamError):
        parse_checkpoint(mutate(dump_checkpoint(tiny())))


def small_train(steps, **kw):
    return TrainConfig(max_level=8, channel_width=4, steps=steps, scene="planes", box_size=64.0, **kw)


def test_training_is_deterministic():
    a = train(small_train(3))
    b = train(small_train(3))
    assert a.losses == b.losses and a.checkpoint == b.checkpoint


def test_resume_continues_step_and_state():
    full = train(small_train(4))
    first = train(small_train(2))
    ck = parse_checkpoint(first.checkpoint)
    assert ck.step == 2 and ck.optimizer_state is not None
    rest = train(small_train(2), resume=ck)
    assert rest.step == 4
    assert first.losses + rest.losses == full.losses
    assert model_checksum(rest.model) == model_checksum(full.model)


def test_resume_rejects_other_config():
    ck = parse_checkpoint(train(small_train(1)).checkpoint)
    with pytest.raises(ValueError):
        train(small_train(1, variant="gred"), resume=ck)


def test_train_config_json():
    cfg = small_train(5, seed=3)
    assert load_train_config(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        load_train_config('{"version": 1, "bogus": 1}')
    with pytest.raises(ValueError):
        load_train_config('{"version": 99}')


def test_divergence_aborts_with_last_good_state():
    first = train(small_train(1))
    ck = parse_checkpoint(first.checkpoint)
    with torch.no_grad():
        ck.model.heads["7"].fc2.bias.fill_(float("nan"))
    bad = train(small_train(3), resume=ck)
    assert bad.aborted is not None and bad.losses == [] and bad.step == 1
    assert parse_checkpoint(bad.checkpoint).step == 1

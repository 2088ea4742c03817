import numpy as np
import pytest
import torch

from opcc.context import UNIFORM_BITS, ContextConfig, ContextModel, TreeState, train_step
from opcc.errors import ContractViolation
from opcc.octree import build_levels, upsample_coords
from opcc.pcio import QuantConfig, quantize
from opcc.scenes import make_scene
from opcc.sparse_nn import make_adamw, oct_folding


def tree(seed=0, depth=8, kind="planes", n=1500):
    qc = quantize(make_scene(kind, seed=seed, n_points=n), QuantConfig(box_size=64, bit_depth=depth))
    return build_levels(qc, depth)


def small_cfg(variant="xfp", depth=8, width=4):
    return ContextConfig(depth, channel_width=width, variant=variant)


@pytest.mark.parametrize("kw", [dict(max_level=8, min_level=4, t_offset=4), dict(max_level=8, t_offset=0),
                                dict(max_level=8, t_offset=9), dict(max_level=8, variant="nope"),
                                dict(max_level=8, channel_width=0)])
def test_config_validation(kw):
    with pytest.raises((ValueError, ContractViolation)):
        ContextConfig(**kw)


def test_config_levels():
    cfg = ContextConfig(12)
    assert (cfg.min_level, cfg.decision_level) == (1, 8)
    assert list(cfg.coded_levels) == list(range(1, 12))


@pytest.mark.parametrize("variant", ["xfp", "gred"])
def test_logit_shapes(variant):
    torch.manual_seed(0)
    lv = tree()
    model = ContextModel(small_cfg(variant))
    out = model(TreeState.from_levels(lv))
    assert sorted(out) == list(model.cfg.coded_levels)
    for l, z in out.items():
        assert z.shape == (lv.count(l), 255) and len(lv.node_codes(l)) == lv.count(l)
        assert torch.isfinite(z).all()


def test_zero_head_is_uniform():
    torch.manual_seed(0)
    model = ContextModel(small_cfg()).double()
    for head in model.heads.values():
        for p in head.parameters():
            torch.nn.init.zeros_(p)
    st = TreeState.from_levels(tree())
    sums, counts = model.level_losses(st)
    bits = sum(float(s.detach()) for s in sums.values()) / sum(counts.values()) / np.log(2)
    assert abs(bits - UNIFORM_BITS) < 1e-9 and abs(UNIFORM_BITS - 7.9944) < 1e-4


def test_deep_fold_channels():
    # at l = t + 3 the folded map carries two levels below t: 8^2 slots
    cfg = ContextConfig(12, min_level=2, t_offset=4, channel_width=4)
    lv = tree(depth=12)
    t = cfg.decision_level
    st = TreeState.from_levels(lv)
    g = oct_folding(st.csets[t + 2], st.codes[t + 2], st.csets[t])
    assert g.channels == 64
    blocks = ContextModel(cfg).blocks
    assert blocks[f"d{t + 3}_fuse"].conv1.weight.shape[1] == 64 + 4
    assert ContextModel(ContextConfig(12, 2, 4, 4, "gred")).blocks[f"d{t + 3}_fuse"].conv1.weight.shape[1] == 64


@pytest.mark.parametrize("variant", ["xfp", "gred"])
def test_incremental_state_matches_full_state(variant):
    torch.manual_seed(3)
    lv = tree(seed=2)
    model = ContextModel(small_cfg(variant))
    with torch.no_grad():
        full = model(TreeState.from_levels(lv))
        st = TreeState(lv.min_level, lv.coords[lv.min_level])
        for l in model.cfg.coded_levels:
            z = model.level_logits(st, l)
            assert torch.equal(z, full[l])
            st.add_codes(l, lv.node_codes(l))
            assert np.array_equal(st.csets[l + 1].coords, lv.coords[l + 1])


@pytest.mark.parametrize("variant", ["xfp", "gred"])
def test_future_levels_do_not_leak(variant, rng):
    torch.manual_seed(4)
    lv = tree(seed=5)
    model = ContextModel(small_cfg(variant))
    clean = TreeState.from_levels(lv)
    with torch.no_grad():
        ref = model(clean)
        for level in model.cfg.coded_levels:
            st = TreeState.from_levels(lv)
            # poison X^k for k >= level and every coordinate set derived from it
            for k in range(level, lv.max_level):
                st.codes[k] = rng.integers(1, 256, size=len(st.csets[k]))
                st.csets[k + 1] = type(st.csets[k])(upsample_coords(st.csets[k].coords, st.codes[k]), k + 1)
            assert torch.equal(model.level_logits(st, level), ref[level])


def test_missing_codes_rejected():
    lv = tree()
    model = ContextModel(small_cfg())
    st = TreeState(lv.min_level, lv.coords[lv.min_level])
    with pytest.raises(ContractViolation):
        model.level_logits(st, lv.min_level + 2)


def test_zero_lr_gives_identical_losses():
    torch.manual_seed(0)
    model = ContextModel(small_cfg())
    opt = make_adamw(model.parameters(), lr=0.0, weight_decay=0.0)
    batch = [TreeState.from_levels(tree())]
    a = train_step(model, batch, opt)
    b = train_step(model, batch, opt)
    assert a.mean_bits == b.mean_bits and a.level_bits == b.level_bits


def test_planes_training_drops_below_uniform():
    torch.manual_seed(0)
    model = ContextModel(small_cfg(width=8))
    opt = make_adamw(model.parameters(), lr=1e-3)
    bits = []
    for step in range(200):
        bits.append(train_step(model, [TreeState.from_levels(tree(seed=step, n=800))], opt).mean_bits)
    assert bits[0] > np.mean(bits[-20:])
    assert np.mean(bits[-20:]) < UNIFORM_BITS


def test_overfit_fixed_scene():
    torch.manual_seed(1)
    model = ContextModel(small_cfg(width=8))
    opt = make_adamw(model.parameters(), lr=1e-3)
    batch = [TreeState.from_levels(tree(seed=7, n=800))]
    bits = [train_step(model, batch, opt).mean_bits for _ in range(20)]
    assert bits[0] > bits[-1]


def test_model_gradients_match_finite_differences():
    torch.manual_seed(2)
    lv = build_levels(np.random.default_rng(0).integers(0, 8, size=(12, 3)), 3, 1)
    cfg = ContextConfig(3, min_level=1, t_offset=1, channel_width=2)
    model = ContextModel(cfg).double()
    st = TreeState.from_levels(lv)

    def loss():
        sums, counts = model.level_losses(st)
        return sum(sums.values()) / sum(counts.values())

    params = dict(model.named_parameters())
    model.zero_grad()
    loss().backward()
    eps = 1e-6
    worst = 0.0
    for name in ("heads.1.fc2.bias", "heads.2.fc1.weight", "init.conv1.weight"):
        p = params[name]
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 5)):
            keep = float(flat[i])
            with torch.no_grad():
                flat[i] = keep + eps
                up = float(loss())
                flat[i] = keep - eps
                down = float(loss())
                flat[i] = keep
            num = (up - down) / (2 * eps)
            ana = float(p.grad.view(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    assert worst < 1e-3


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_non_finite_logits_raise(bad):
    from opcc.errors import NumericError
    torch.manual_seed(0)
    model = ContextModel(small_cfg())
    with torch.no_grad():
        model.heads["3"].fc2.bias[5] = bad
    st = TreeState.from_levels(tree())
    with pytest.raises(NumericError):
        model.predict_level(st, 3)

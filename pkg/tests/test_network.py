"""Network contracts: shape preservation, deterministic init, the hand
parameter count, encoder sharing between tasks, receptive field, and the
checkpoint round-trip."""

import numpy as np
import pytest

from voxseg.autodiff import Graph, Tensor, gradcheck, mul, tsum
from voxseg.errors import ConfigError, IntegrityError, ShapeError
from voxseg.network import (MultiTaskNet, TaskSpec, build_multitask_net,
                            load_checkpoint, receptive_field, save_checkpoint)

KIDNEY = TaskSpec("kidney", 3, ("background", "left_kidney", "right_kidney"))
LIVER = TaskSpec("liver", 2, ("background", "liver"))


def tiny_net(seed=0, dtype=np.float32):
    return build_multitask_net(2, 4, [KIDNEY, LIVER], seed=seed, dtype=dtype)


def test_output_shape_matches_input():
    net = tiny_net()
    x = np.zeros((1, 1, 16, 16, 16), dtype=np.float32)
    for task, classes in (("kidney", 3), ("liver", 2)):
        y = net.forward(None, x, task, mode="eval")
        assert y.shape == (1, classes, 16, 16, 16)


def test_same_seed_bit_identical_parameters():
    a, b = tiny_net(seed=7), tiny_net(seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    c = tiny_net(seed=8)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_parameter_count_hand_oracle():
    # depth 2, base 4, channels [4, 8], tasks kidney(3) + liver(2):
    #   encoder: (108+4+4+4 + 432+4+4+4) + (864+8+8+8 + 1728+8+8+8) = 3204
    #   per-task decoder: (256+4) + (864+12 + 432+12) = 1580
    #   heads: (12+3) + (8+2) = 25
    net = tiny_net()
    assert net.parameter_count() == 3204 + 2 * 1580 + 25 == 6389


def test_parameter_names_unique():
    names = [p.name for p in tiny_net().parameters()]
    assert len(names) == len(set(names))


def test_channel_schedule_cap():
    net = build_multitask_net(3, 4, [LIVER], seed=0, channel_cap=8)
    assert net.channels == [4, 8, 8]


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        build_multitask_net(1, 4, [KIDNEY], seed=0)
    with pytest.raises(ConfigError):
        build_multitask_net(2, 0, [KIDNEY], seed=0)
    with pytest.raises(ConfigError):
        build_multitask_net(2, 4, [], seed=0)
    with pytest.raises(ConfigError):
        TaskSpec("solo", 1)
    with pytest.raises(ConfigError):
        TaskSpec("dup", 2, ("a", "a"))


def test_indivisible_extent_names_axis():
    net = tiny_net()
    with pytest.raises(ShapeError, match="y extent 18"):
        net.forward(None, np.zeros((1, 1, 16, 18, 16), np.float32), "kidney")


def test_unknown_task_is_lookup_error():
    net = tiny_net()
    with pytest.raises(KeyError):
        net.forward(None, np.zeros((1, 1, 16, 16, 16), np.float32), "spleen")


def test_decoder_perturbation_leaves_other_task_unchanged():
    net = tiny_net(seed=3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 16, 16, 16)).astype(np.float32)
    before = net.forward(None, x, "kidney", mode="eval").data.copy()
    for p in net.task_parameters("liver"):
        p.data += 0.25
    after = net.forward(None, x, "kidney", mode="eval").data
    np.testing.assert_array_equal(before, after)
    # and the liver logits did change
    liver = net.forward(None, x, "liver", mode="eval").data
    net2 = tiny_net(seed=3)
    assert not np.array_equal(liver, net2.forward(None, x, "liver", mode="eval").data)


def test_encoder_perturbation_changes_both_tasks():
    net = tiny_net(seed=4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 16, 16, 16)).astype(np.float32)
    base = {t: net.forward(None, x, t, mode="eval").data.copy()
            for t in ("kidney", "liver")}
    net.encoder[0].kernel1.data += 0.1
    for t in ("kidney", "liver"):
        assert not np.array_equal(base[t], net.forward(None, x, t, mode="eval").data)


def test_encoder_receives_gradient_from_both_tasks():
    net = tiny_net(seed=5)
    rng = np.random.default_rng(2)
    xk = rng.normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    xl = rng.normal(size=(1, 1, 8, 8, 8)).astype(np.float32)

    def grads_for(tasks):
        g = Graph()
        losses = [tsum(mul(net.forward(g, g.leaf(x), t, mode="train"),
                           Tensor(np.random.default_rng(9).normal(size=(1, n, 8, 8, 8))
                                  .astype(np.float32))))
                  for x, t, n in tasks]
        total = losses[0] if len(losses) == 1 else losses[0] + losses[1]
        return g.backward(total * 0.5)

    both = grads_for([(xk, "kidney", 3), (xl, "liver", 2)])
    kidney_only = grads_for([(xk, "kidney", 3)])
    liver_only = grads_for([(xl, "liver", 2)])
    for p in net.encoder_parameters():
        assert np.abs(both[p]).max() > 0.0
        # shared encoder accumulates both traces; each single-task run used
        # the same 0.5 seed, so the combined gradient is exactly their sum
        np.testing.assert_allclose(both[p], kidney_only[p] + liver_only[p],
                                   rtol=1e-6, atol=1e-7)
    # decoder disjointness: liver loss sends nothing to kidney parameters
    for p in net.task_parameters("kidney"):
        assert p not in liver_only


def test_eval_forward_is_pure_and_tape_free():
    net = tiny_net(seed=6)
    x = np.random.default_rng(3).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    states_before = [(s.mean.copy(), s.var.copy()) for _, s in net.named_states()]
    y1 = net.forward(None, x, "kidney", mode="eval")
    y2 = net.forward(None, x, "kidney", mode="eval")
    assert y1.graph is None
    np.testing.assert_array_equal(y1.data, y2.data)
    for (m0, v0), (_, s) in zip(states_before, net.named_states()):
        np.testing.assert_array_equal(m0, s.mean)
        np.testing.assert_array_equal(v0, s.var)


def test_train_forward_updates_running_stats():
    net = tiny_net(seed=6)
    x = np.random.default_rng(3).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    before = [s.mean.copy() for _, s in net.named_states()]
    net.forward(None, x, "kidney", mode="train")
    changed = [not np.array_equal(b, s.mean)
               for b, (_, s) in zip(before, net.named_states())]
    assert any(changed)


def test_end_to_end_gradcheck_wrt_input():
    net = build_multitask_net(2, 2, [KIDNEY], seed=11, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 4, 4, 4))
    w = rng.normal(size=(1, 3, 4, 4, 4))

    def f(xs):
        logits = net.forward(xs.graph, xs, "kidney", mode="train")
        return tsum(mul(logits, Tensor(w)))

    assert gradcheck(f, [x]) < 1e-3


def test_receptive_field_closed_form():
    assert receptive_field(1) == 5
    assert receptive_field(2) == 14
    fields = [receptive_field(d) for d in range(1, 7)]
    assert all(b > a for a, b in zip(fields, fields[1:]))
    with pytest.raises(ConfigError):
        receptive_field(0)


def test_receptive_field_matches_perturbation_probe():
    # count input voxels along z that influence one bottom encoder voxel
    net = build_multitask_net(2, 4, [LIVER], seed=12, dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 32, 16, 16))
    bottom, _ = net.encode(None, Tensor(x), mode="eval")
    zb, yb, xb = 4, 2, 2
    base = bottom.data[0, :, zb, yb, xb].copy()
    touched = []
    for z in range(32):
        xp = x.copy()
        xp[0, 0, z, 8, 8] += 3.0
        pert, _ = net.encode(None, Tensor(xp), mode="eval")
        if not np.array_equal(pert.data[0, :, zb, yb, xb], base):
            touched.append(z)
    assert len(touched) == receptive_field(2) == 14
    assert touched == list(range(touched[0], touched[0] + 14))


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = tiny_net(seed=13)
    # give the running stats non-default values
    x = np.random.default_rng(6).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    net.forward(None, x, "kidney", mode="train")
    net.forward(None, x, "liver", mode="train")
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.depth == net.depth
    assert loaded.channels == net.channels
    assert [t.name for t in loaded.tasks] == ["kidney", "liver"]
    assert loaded.task("kidney").class_names == KIDNEY.class_names
    for pa, pb in zip(net.parameters(), loaded.parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    for (na, sa), (nb, sb) in zip(net.named_states(), loaded.named_states()):
        assert na == nb
        np.testing.assert_array_equal(sa.mean, sb.mean)
        np.testing.assert_array_equal(sa.var, sb.var)
    # and the loaded net computes the same function
    y = net.forward(None, x, "kidney", mode="eval")
    y2 = loaded.forward(None, x, "kidney", mode="eval")
    np.testing.assert_array_equal(y.data, y2.data)


def test_checkpoint_save_is_deterministic(tmp_path):
    net = tiny_net(seed=14)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, p1)
    save_checkpoint(net, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_checkpoint_truncated_record(tmp_path):
    net = tiny_net(seed=15)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(Exception):
        load_checkpoint(path)

import numpy as np
import pytest

from stvla import tensor as T
from stvla.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from stvla.policy import (InstructionVocab, PolicyError, PolicyNet,
                          PolicyNetConfig, UnknownWordError, action_loss)
from stvla.sim import (ExpertReplayPolicy, SimConfig, all_subtasks,
                       evaluate_rollout, generate_episode, make_task,
                       template_words)
from stvla.stack import PolicyStack, StackConfig
from stvla.tensor import Tensor, grad_check

SMALL = StackConfig(d_fourier=8, d_embed=12, d_model=24, n_blocks=2, ff_mult=2,
                    history_frames=2)


def small_net(seed=0, **kw):
    cfg = PolicyNetConfig(d_model=16, n_blocks=2, ff_mult=2, vocab_size=10,
                          lang_len=4, n_visual=6, **kw)
    return PolicyNet(cfg, np.random.default_rng(seed)), cfg


def random_inputs(cfg, rng, batch=2):
    f_v4d = Tensor(rng.normal(size=(batch, cfg.n_visual, cfg.d_model)))
    prop = Tensor(rng.normal(size=(batch, cfg.proprio_dim)))
    lang = rng.integers(0, cfg.vocab_size, size=(batch, cfg.lang_len))
    return f_v4d, prop, lang


# ---------------------------------------------------------------------------
# vocabulary


def test_tokenize_is_table_lookup():
    v = InstructionVocab(["pick", "the", "red", "cube"])
    ids = v.tokenize("pick the red cube")
    assert ids == [v.tokenize(w)[0] for w in ["pick", "the", "red", "cube"]]
    assert len(set(ids)) == 4


def test_tokenize_empty_string():
    v = InstructionVocab(["a"])
    assert v.tokenize("") == []


def test_tokenize_unknown_word_lists_it():
    v = InstructionVocab(["move", "cube"])
    with pytest.raises(UnknownWordError, match="banana"):
        v.tokenize("move banana")


def test_round_trip_over_all_template_instructions():
    v = InstructionVocab(template_words())
    for suite, variant in all_subtasks(40):
        text = make_task(suite, variant, 0).instruction
        assert v.detokenize(v.tokenize(text)) == text.lower()


def test_encode_padded_layout():
    v = InstructionVocab(["move", "cube"])
    ids = v.encode_padded("move cube", 5)
    assert ids.shape == (5,)
    assert ids[2] == v.EOS and ids[3] == v.PAD and ids[4] == v.PAD


def test_vocab_deterministic():
    a = InstructionVocab(["b", "a", "c"])
    b = InstructionVocab(["c", "a", "b"])
    assert a.tokenize("a b c") == b.tokenize("a b c")
    assert a.vocab_hash == b.vocab_hash


# ---------------------------------------------------------------------------
# token projection


def test_project_tokens_zero_weights_zero_tokens():
    net, cfg = small_net()
    for lin in (net.vis_proj1, net.vis_proj2, net.prop_proj1, net.prop_proj2):
        lin.w.data[:] = 0.0
        lin.b.data[:] = 0.0
    rng = np.random.default_rng(1)
    f_v4d, prop, _ = random_inputs(cfg, rng)
    tokens = net.project_tokens(f_v4d, prop)
    np.testing.assert_array_equal(tokens.data, np.zeros(tokens.shape))


def test_project_tokens_matches_manual_mlp():
    net, cfg = small_net(seed=2)
    rng = np.random.default_rng(3)
    f_v4d, prop, _ = random_inputs(cfg, rng, batch=1)
    tokens = net.project_tokens(f_v4d, prop).data

    x = f_v4d.data[0]
    ref_v = np.tanh(x @ net.vis_proj1.w.data + net.vis_proj1.b.data) \
        @ net.vis_proj2.w.data + net.vis_proj2.b.data
    ref_p = np.tanh(prop.data[0] @ net.prop_proj1.w.data + net.prop_proj1.b.data) \
        @ net.prop_proj2.w.data + net.prop_proj2.b.data
    np.testing.assert_allclose(tokens[0, :cfg.n_visual], ref_v, atol=1e-12, rtol=0)
    np.testing.assert_allclose(tokens[0, cfg.n_visual], ref_p, atol=1e-12, rtol=0)


def test_token_count_is_nvisual_plus_one():
    net, cfg = small_net()
    rng = np.random.default_rng(4)
    f_v4d, prop, _ = random_inputs(cfg, rng, batch=3)
    assert net.project_tokens(f_v4d, prop).shape == (3, cfg.n_visual + 1, cfg.d_model)


def test_project_tokens_width_mismatch():
    net, cfg = small_net()
    with pytest.raises(PolicyError):
        net.project_tokens(Tensor(np.zeros((1, cfg.n_visual, cfg.d_model + 1))),
                           Tensor(np.zeros((1, 7))))


# ---------------------------------------------------------------------------
# forward and squashers


def test_zeroed_final_head_gives_squasher_fixed_points():
    net, cfg = small_net(seed=5)
    net.head2.w.data[:] = 0.0
    net.head2.b.data[:] = 0.0
    rng = np.random.default_rng(6)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    out = net.forward(f_v4d, prop, lang).data
    np.testing.assert_array_equal(out[:, 0:6], np.zeros((2, 6)))
    np.testing.assert_array_equal(out[:, 6], np.full(2, 0.5))
    np.testing.assert_allclose(out[:, 7], np.full(2, np.log(2.0) + cfg.dt_min),
                               atol=1e-15, rtol=0)


def test_head2_init_keeps_actions_near_neutral():
    net, cfg = small_net(seed=11)
    rng = np.random.default_rng(12)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    out = net.forward(f_v4d, prop, lang).data
    assert np.abs(out[:, 0:6]).max() < 0.1
    assert np.abs(out[:, 6] - 0.5).max() < 0.1


def test_output_ranges_hold_for_wild_inputs():
    net, cfg = small_net(seed=7)
    rng = np.random.default_rng(8)
    for trial in range(5):
        f_v4d = Tensor(rng.normal(size=(3, cfg.n_visual, cfg.d_model)) * 50)
        prop = Tensor(rng.normal(size=(3, cfg.proprio_dim)) * 50)
        lang = rng.integers(0, cfg.vocab_size, size=(3, cfg.lang_len))
        out = net.forward(f_v4d, prop, lang).data
        assert (np.abs(out[:, 0:3]) <= cfg.dx_scale).all()
        assert (np.abs(out[:, 3:6]) <= cfg.dtheta_scale).all()
        assert ((out[:, 6] >= 0) & (out[:, 6] <= 1)).all()
        assert ((out[:, 7] >= cfg.dt_min) & (out[:, 7] <= cfg.dt_max)).all()


def test_forward_deterministic():
    net, cfg = small_net(seed=9)
    rng = np.random.default_rng(10)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    a = net.forward(f_v4d, prop, lang).data
    b = net.forward(Tensor(f_v4d.data.copy()), Tensor(prop.data.copy()), lang).data
    np.testing.assert_array_equal(a, b)


def test_numeric_blowup_names_block():
    net, cfg = small_net(seed=12)
    net.blocks[1].ff2.w.data[:] = 1e308  # force an overflow to inf
    rng = np.random.default_rng(13)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    with pytest.raises(PolicyError, match="block 1"):
        net.forward(f_v4d, prop, lang)


def test_full_forward_gradients_match_finite_differences():
    net, cfg = small_net(seed=14)
    rng = np.random.default_rng(15)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    target = rng.normal(size=(2, 8)) * 0.1

    def loss():
        return action_loss(net.forward(f_v4d, prop, lang), Tensor(target))

    params = list(net.params().values())
    report = grad_check(loss, params, rng=rng, dense_limit=8, n_dirs=2)
    assert report.passed, report.worst()


# ---------------------------------------------------------------------------
# action loss


def test_action_loss_zero_at_equality():
    rng = np.random.default_rng(16)
    batch = Tensor(rng.normal(size=(3, 8)))
    assert action_loss(batch, Tensor(batch.data.copy())).item() == 0.0


def test_action_loss_single_dt_offset():
    rng = np.random.default_rng(17)
    gt = rng.normal(size=(4, 8))
    pred = gt.copy()
    pred[:, 7] += 0.5
    loss = action_loss(Tensor(pred), Tensor(gt))
    assert abs(loss.item() - 0.5) <= 1e-12


def test_action_loss_matches_scalar_reference():
    rng = np.random.default_rng(18)
    pred = rng.normal(size=(5, 8))
    gt = rng.normal(size=(5, 8))
    w = (1.0, 0.7, 2.0, 1.3)
    got = action_loss(Tensor(pred), Tensor(gt), weights=w).item()
    ref = 0.0
    for i in range(5):
        ref += w[0] * sum(abs(pred[i, j] - gt[i, j]) for j in range(3))
        ref += w[1] * sum(abs(pred[i, j] - gt[i, j]) for j in range(3, 6))
        ref += w[2] * abs(pred[i, 6] - gt[i, 6])
        ref += w[3] * abs(pred[i, 7] - gt[i, 7])
    ref /= 5
    assert abs(got - ref) <= 1e-12


def test_action_loss_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(19)
    pred = rng.normal(size=(3, 8))
    gt = pred.copy()
    gt[1, 2] += 1e-9
    loss = action_loss(Tensor(pred), Tensor(gt)).item()
    assert loss > 0


def test_action_loss_shape_guard():
    with pytest.raises(PolicyError):
        action_loss(Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 8))))


# ---------------------------------------------------------------------------
# LoRA adapters


def test_lora_zero_b_is_bitwise_identity():
    net, cfg = small_net(seed=20)
    rng = np.random.default_rng(21)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    before = net.forward(f_v4d, prop, lang).data.copy()
    net.apply_lora(rank=2, alpha=4.0, rng=rng)
    after = net.forward(f_v4d, prop, lang).data
    np.testing.assert_array_equal(before, after)


def test_lora_trainable_count_formula():
    net, cfg = small_net(seed=22)
    rank = 3
    net.apply_lora(rank=rank, alpha=6.0, rng=np.random.default_rng(0))
    expected = 0
    for block in net.blocks:
        for lin in block.linears():
            expected += rank * (lin.d_in + lin.d_out)
    assert net.lora_trainable_count() == expected
    assert sum(p.size for p in net.param_groups()["transformer_lora"].values()) == expected


def test_lora_invalid_rank():
    net, _ = small_net()
    with pytest.raises(PolicyError):
        net.apply_lora(rank=0, alpha=1.0, rng=np.random.default_rng(0))
    with pytest.raises(PolicyError):
        net.apply_lora(rank=16, alpha=1.0, rng=np.random.default_rng(0))


def test_gradient_step_moves_lora_not_base():
    net, cfg = small_net(seed=23)
    net.apply_lora(rank=2, alpha=4.0, rng=np.random.default_rng(1))
    rng = np.random.default_rng(24)
    f_v4d, prop, lang = random_inputs(cfg, rng)
    target = Tensor(rng.normal(size=(2, 8)) * 0.1)

    groups = net.param_groups()
    base_before = {n: p.data.copy() for n, p in groups["transformer_base"].items()}
    lora_before = {n: p.data.copy() for n, p in groups["transformer_lora"].items()}

    for p in net.params().values():
        p.zero_grad()
    action_loss(net.forward(f_v4d, prop, lang), target).backward()
    # one plain gradient step on the adapters only
    for p in groups["transformer_lora"].values():
        if p.grad is not None:
            p.data -= 0.1 * p.grad
    for n, p in groups["transformer_base"].items():
        np.testing.assert_array_equal(p.data, base_before[n])
    moved = any(not np.array_equal(p.data, lora_before[n])
                for n, p in groups["transformer_lora"].items())
    assert moved


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    net, _ = small_net(seed=25)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.params(), {"d_model": 16})
    header, arrays = load_checkpoint(path)
    assert header["d_model"] == 16
    for name, param in net.params().items():
        np.testing.assert_array_equal(arrays[name], param.data)


def test_checkpoint_shape_validation(tmp_path):
    net, _ = small_net(seed=26)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.params(), {"d_model": 16})
    other, _ = small_net(seed=26, dx_scale=0.4)
    other.head1.w = Tensor(np.zeros((16, 17)), requires_grad=True, name="net.head1.w")
    from stvla.checkpoint import load_into
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_into(path, other.params())


def test_checkpoint_name_set_validation(tmp_path):
    net, _ = small_net(seed=27)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.params(), {})
    lora_net, _ = small_net(seed=27)
    lora_net.apply_lora(2, 4.0, np.random.default_rng(0))
    from stvla.checkpoint import load_into
    with pytest.raises(CheckpointError, match="mismatch"):
        load_into(path, lora_net.params())


# ---------------------------------------------------------------------------
# the full stack


def make_history(seed=31, n=2):
    ep = generate_episode(make_task("object", 0, seed), hz=20.0)
    return [ep.frames[i] for i in range(n)], ep.spec.instruction


def test_stack_act_returns_valid_action():
    stack = PolicyStack(SMALL, seed=1)
    history, instruction = make_history()
    action = stack.act(history, instruction)
    assert np.isfinite(action.as_vector()).all()
    assert SMALL.dt_min <= action.delta_t <= SMALL.dt_max


def test_stack_act_bitwise_deterministic():
    history, instruction = make_history()
    a = PolicyStack(SMALL, seed=2).act(history, instruction)
    b = PolicyStack(SMALL, seed=2).act(history, instruction)
    np.testing.assert_array_equal(a.as_vector(), b.as_vector())


def test_stack_short_history_padded():
    stack = PolicyStack(SMALL, seed=3)
    history, instruction = make_history(n=1)
    feats = stack.featurize(history, instruction)
    assert feats["pixels"].shape[0] == SMALL.n_visual
    half = SMALL.n_visual // 2
    np.testing.assert_array_equal(feats["pixels"][:half], feats["pixels"][half:])


def test_stack_save_load_round_trip(tmp_path):
    stack = PolicyStack(SMALL, seed=4)
    stack.add_transformer_lora(2, 4.0)
    path = tmp_path / "stack.ckpt"
    stack.save(path)
    again = PolicyStack.from_checkpoint(path)
    history, instruction = make_history()
    a = stack.act(history, instruction)
    b = again.act(history, instruction)
    np.testing.assert_array_equal(a.as_vector(), b.as_vector())


def test_stack_dt_head_disabled_uses_fixed_cadence():
    cfg = StackConfig(**{**SMALL.__dict__, "use_dt_head": False})
    stack = PolicyStack(cfg, seed=5)
    history, instruction = make_history()
    action = stack.act(history, instruction)
    assert action.delta_t == cfg.fixed_chunk_dt


def test_stack_no_proprio_zeroes_proprio_features():
    cfg = StackConfig(**{**SMALL.__dict__, "use_proprio": False})
    stack = PolicyStack(cfg, seed=6)
    history, instruction = make_history()
    feats = stack.featurize(history, instruction)
    np.testing.assert_array_equal(feats["proprio"], np.zeros(7))


def test_stack_full_gradient_check():
    # the fused-policy action loss: gradients reach every component
    stack = PolicyStack(SMALL, seed=7)
    history, instruction = make_history()
    batch = stack.collate([stack.featurize(history, instruction)])
    rng = np.random.default_rng(8)
    target = rng.normal(size=(1, 8)) * 0.1

    def loss():
        return action_loss(stack.forward_batch(batch), Tensor(target))

    params = list(stack.params().values())
    report = grad_check(loss, params, rng=rng, dense_limit=4, n_dirs=1)
    assert report.passed, report.worst()

    for group in ("embed", "fusion_base", "projectors", "head"):
        for name, p in stack.param_groups()[group].items():
            assert p.grad is not None and np.abs(p.grad).max() > 0, name

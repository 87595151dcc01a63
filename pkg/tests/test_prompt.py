import numpy as np
import pytest

from spectrack.config import DESK_PROFILE
from spectrack.model import Tracker, init_params
from spectrack.numerics import ParamStore, Tensor, grad_check
from spectrack.prompt import PromptState, encode, init_prompt_params

CFG = DESK_PROFILE.with_(channels=32, heads=4)


def _store(seed=0):
    store = ParamStore()
    init_prompt_params(store, CFG, np.random.default_rng(seed))
    return store


def test_constant_template_pools_to_itself():
    store = _store()
    rng = np.random.default_rng(1)
    t_row = rng.normal(size=32)
    prompt = Tensor(rng.normal(size=(1, 32)))
    template = Tensor(np.tile(t_row, (9, 1)))
    # the pooled half of the squeeze input equals the constant row exactly
    pooled = template.mean(axis=0, keepdims=True).data
    assert np.abs(pooled - t_row).max() < 1e-12
    p_hat, t_hat = encode(prompt, template, store, CFG)
    assert p_hat.shape == (1, 32) and t_hat.shape == (1, 32)


def test_zero_inputs_zero_biases_give_zero():
    store = _store()
    for name in store.names():
        if name.endswith("bias"):
            store.set_value(name, np.zeros_like(store[name].data))
    p_hat, t_hat = encode(Tensor(np.zeros((1, 32))), Tensor(np.zeros((5, 32))),
                          store, CFG)
    assert np.abs(p_hat.data).max() == 0.0
    assert np.abs(t_hat.data).max() == 0.0


def test_stage_by_stage_oracle():
    # independently composed squeeze -> excite -> residual MLP
    store = _store(seed=3)
    rng = np.random.default_rng(4)
    prompt = rng.normal(size=(1, 32))
    template = rng.normal(size=(7, 32))

    from scipy.special import erf

    def gelu(x):
        return x * 0.5 * (1.0 + erf(x / np.sqrt(2)))

    z = np.concatenate([prompt, template.mean(axis=0, keepdims=True)], axis=1)
    a1 = gelu(z @ store["prompt_enc.fc1.weight"].data + store["prompt_enc.fc1.bias"].data)
    a2 = a1 @ store["prompt_enc.fc2.weight"].data + store["prompt_enc.fc2.bias"].data
    hidden = gelu(a2 @ store["prompt_enc.mlp.fc1.weight"].data
                  + store["prompt_enc.mlp.fc1.bias"].data)
    out = a2 + hidden @ store["prompt_enc.mlp.fc2.weight"].data \
        + store["prompt_enc.mlp.fc2.bias"].data
    p_hat, t_hat = encode(Tensor(prompt), Tensor(template), store, CFG)
    assert np.abs(p_hat.data - out[:, :32]).max() <= 1e-12
    assert np.abs(t_hat.data - out[:, 32:]).max() <= 1e-12


def test_channel_split_round_trip():
    store = _store()
    rng = np.random.default_rng(5)
    p_hat, t_hat = encode(Tensor(rng.normal(size=(1, 32))),
                          Tensor(rng.normal(size=(4, 32))), store, CFG)
    rebuilt = np.concatenate([p_hat.data, t_hat.data], axis=1)
    assert rebuilt.shape == (1, 64)


def test_gpool_permutation_invariance():
    store = _store()
    rng = np.random.default_rng(6)
    prompt = Tensor(rng.normal(size=(1, 32)))
    template = rng.normal(size=(6, 32))
    p1, t1 = encode(prompt, Tensor(template), store, CFG)
    perm = rng.permutation(6)
    p2, t2 = encode(prompt, Tensor(template[perm]), store, CFG)
    assert np.abs(p1.data - p2.data).max() < 1e-12
    assert np.abs(t1.data - t2.data).max() < 1e-12


def test_encode_grad_check():
    store = _store(seed=8)

    def fn(p, t):
        p_hat, t_hat = encode(p, t, store, CFG)
        return (p_hat * np.arange(1, 33)).sum() + t_hat.sum()

    rng = np.random.default_rng(9)
    err = grad_check(fn, [rng.normal(size=(1, 32)), rng.normal(size=(5, 32))])
    assert err <= 1e-6


def test_width_mismatch_rejected():
    store = _store()
    with pytest.raises(ValueError):
        encode(Tensor(np.zeros((1, 16))), Tensor(np.zeros((4, 32))), store, CFG)


# -- prompt propagation -----------------------------------------------------------


def test_first_frame_uses_learned_init():
    params = init_params(CFG, seed=0)
    state = PromptState(params, CFG)
    assert state.current.frame_index == -1
    assert state.current.tokens is params["prompt_enc.init_prompt"]


def test_update_replaces_prompt():
    params = init_params(CFG, seed=0)
    state = PromptState(params, CFG)
    new = Tensor(np.ones((1, 32)))
    state.update(new, frame_index=3)
    assert state.current.frame_index == 3
    assert np.array_equal(state.current.tokens.data, new.data)


def test_nonfinite_update_keeps_previous_and_flags():
    params = init_params(CFG, seed=0)
    state = PromptState(params, CFG)
    good = Tensor(np.ones((1, 32)))
    state.update(good, frame_index=2)
    bad = Tensor.__new__(Tensor)
    bad.data = np.full((1, 32), np.nan)
    bad.grad = None
    bad.requires_grad = False
    bad._parents = ()
    bad._backward = None
    state.update(bad, frame_index=3)
    assert state.current.frame_index == 2
    assert state.flagged_frames == [3]


def test_random_mode_never_updates():
    cfg = CFG.with_(prompt_mode="random")
    params = init_params(cfg, seed=0)
    state = PromptState(params, cfg)
    state.update(Tensor(np.ones((1, 32))), frame_index=5)
    assert state.current.frame_index == -1  # frozen init for every frame
    assert not params.is_trainable("prompt_enc.init_prompt")


def test_disabled_mode_has_no_prompt():
    cfg = CFG.with_(prompt_mode="none")
    params = init_params(cfg, seed=0)
    assert "prompt_enc.init_prompt" not in params
    state = PromptState(params, cfg)
    assert state.current is None


def test_tracker_trace_prompt_equals_previous_encode(tmp_path):
    # frame t's stored prompt is the encoder output of frame t-1
    from spectrack.synth import plain_scene, synth_sequence
    from spectrack.track import track

    cfg = DESK_PROFILE
    params = init_params(cfg, seed=0)
    tracker = Tracker(cfg, params)
    seq = synth_sequence(plain_scene(np.random.default_rng(3), n_frames=5,
                                     height=96, width=96), seed=9)
    res = track(tracker, seq)
    # prompt used at tracked step k came from the previous step's pass
    assert res.prompt_frames[0] == -1
    assert res.prompt_frames[1:] == [1, 2, 3]

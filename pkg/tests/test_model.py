import math

import numpy as np
import pytest
import torch

from conftest import QUERIES, tiny_config
from opendas.errors import ShapeError, TruncationError, ValidationError
from opendas.model import (TEXT_INIT_PHRASE, DualEncoder, EncoderConfig, PromptConfig,
                           Tokenizer, count_prompt_params, inject_prompts, predict,
                           tokenize_text)


def _encoders(d_v, d_t, depth=24):
    return (EncoderConfig(depth=depth, width=d_v, heads=16, patch_size=14),
            EncoderConfig(depth=12, width=d_t, heads=12, context_length=77))


@pytest.mark.parametrize("k_v,k_t,expected", [
    (8, 4, 135168), (8, 8, 172032), (8, 12, 208896),
    (12, 4, 184320), (12, 8, 221184), (12, 12, 258048)])
def test_param_count_width_table(k_v, k_t, expected):
    pc = PromptConfig(depth_v=12, depth_t=12, width_v=k_v, width_t=k_t)
    assert count_prompt_params(_encoders(1024, 768), pc) == expected


def test_param_count_main_config():
    pc = PromptConfig(depth_v=24, depth_t=12, width_v=8, width_t=4)
    assert count_prompt_params(_encoders(1024, 768), pc) == 233472
    assert round(233472 / 1000) == 233


def test_param_count_tiny_and_zero():
    enc = (EncoderConfig(depth=2, width=32, heads=4), EncoderConfig(depth=2, width=32, heads=4))
    assert count_prompt_params(enc, PromptConfig(depth_v=2, depth_t=2)) == 2 * 8 * 32 + 2 * 4 * 32
    assert count_prompt_params(enc, PromptConfig(depth_v=0, depth_t=0)) == 0


def test_model_param_count_matches_bank(model):
    n = sum(p.numel() for p in model.prompts.parameters())
    assert n == count_prompt_params((model.cfg.vision, model.cfg.text), model.cfg.prompt)


@pytest.mark.parametrize("bad", [
    dict(depth_v=0), dict(depth_t=0), dict(depth_v=3), dict(width_v=0), dict(text_init="x")])
def test_prompt_config_validation(bad):
    vis = EncoderConfig(depth=2, width=32, heads=4)
    txt = EncoderConfig(depth=2, width=32, heads=4)
    with pytest.raises(ValidationError):
        PromptConfig(**{"depth_v": 1, "depth_t": 1, **bad}).validate(vis, txt)


def test_encoder_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(depth=2, width=30, heads=4).validate()
    with pytest.raises(ValidationError):
        EncoderConfig(depth=0, width=32, heads=4).validate()


def test_inject_layer0_appends():
    x = torch.randn(2, 5, 4)
    p = torch.randn(3, 4)
    y = inject_prompts(x, p, 0, 2)
    assert y.shape == (2, 8, 4)
    assert torch.equal(y[:, :5], x)
    assert torch.equal(y[0, 5:], p) and torch.equal(y[1, 5:], p)


def test_inject_deep_layer_replaces_tail():
    x = torch.randn(2, 8, 4)
    p = torch.randn(3, 4)
    y = inject_prompts(x, p, 1, 2)
    assert y.shape == x.shape
    assert torch.equal(y[:, :5], x[:, :5])
    assert torch.equal(y[1, 5:], p)


def test_inject_beyond_depth_passes_through():
    x = torch.randn(2, 8, 4)
    assert inject_prompts(x, None, 2, 2) is x
    assert inject_prompts(x, torch.randn(3, 4), 5, 2) is x


def test_inject_errors():
    x = torch.randn(1, 5, 4)
    with pytest.raises(ShapeError):
        inject_prompts(x, torch.randn(3, 5), 0, 1)
    with pytest.raises(ValidationError):
        inject_prompts(x, None, 0, 1)
    with pytest.raises(ValidationError):
        inject_prompts(x, torch.randn(3, 4), -1, 1)


def _layer_inputs(model, images):
    trace = []
    model.encode_image(images, trace=trace)
    return trace


def test_shallow_prompting_has_no_deep_replacement(tokenizer):
    # depth 1: only the input layer receives prompts; later layers see the
    # previous block's output unchanged, prompt slots included
    model = DualEncoder(tiny_config(depth_v=1, depth_t=1, layers=3), tokenizer)
    images = torch.rand(2, 32, 32, 3)
    trace = _layer_inputs(model, images)
    k = model.cfg.prompt.width_v
    assert torch.equal(trace[0][0, -k:], model.prompts.visual[0].detach())
    with torch.no_grad():
        for j in range(1, len(trace)):
            expected = model.visual.blocks[j - 1](trace[j - 1], None)
            assert torch.equal(trace[j], expected)


def test_deep_prompting_replaces_every_layer_below_depth(tokenizer):
    model = DualEncoder(tiny_config(depth_v=2, depth_t=2, layers=3), tokenizer)
    trace = _layer_inputs(model, torch.rand(1, 32, 32, 3))
    k = model.cfg.prompt.width_v
    for j in range(2):
        assert torch.equal(trace[j][0, -k:], model.prompts.visual[j].detach())
    with torch.no_grad():
        assert torch.equal(trace[2], model.visual.blocks[1](trace[1], None))


def test_sequence_layout_special_first(model):
    trace = []
    model.encode_text(["red square"], trace=trace)
    seq_len = 1 + model.cfg.text.context_length + model.cfg.prompt.width_t
    assert trace[0].shape == (1, seq_len, 32)
    eos = model.text.token_embedding.weight[model.tokenizer.eos_id]
    pos0 = model.text.positional_embedding[0]
    assert torch.allclose(trace[0][0, 0], (eos + pos0).detach())


def test_embeddings_unit_norm(model):
    v = model.encode_image(torch.rand(4, 32, 32, 3))
    t = model.encode_text(QUERIES)
    assert v.shape == (4, 32) and t.shape == (len(QUERIES), 32)
    assert torch.allclose(v.norm(dim=1), torch.ones(4), atol=1e-5)
    assert torch.allclose(t.norm(dim=1), torch.ones(len(QUERIES)), atol=1e-5)


def test_image_shape_errors(model):
    with pytest.raises(ShapeError):
        model.encode_image(torch.rand(1, 30, 30, 3))
    with pytest.raises(ShapeError):
        model.encode_image(torch.rand(1, 64, 64, 3))


def test_text_prompt_phrase_init(model):
    ids = model.tokenizer.encode_words(TEXT_INIT_PHRASE)
    assert len(ids) == 4 == model.cfg.prompt.width_t
    assert torch.equal(model.prompts.textual[0].detach(),
                       model.text.token_embedding.weight[ids].detach())


def test_visual_prompt_random_init_scale(tokenizer):
    cfg = tiny_config(k_v=64)
    model = DualEncoder(cfg, tokenizer)
    std = torch.cat([p.flatten() for p in model.prompts.visual]).std().item()
    assert 0.015 < std < 0.025


def test_only_prompts_trainable(model):
    names = {n for n, p in model.named_parameters() if p.requires_grad}
    assert names and all(n.startswith("prompts.") for n in names)
    model.set_trainable(True, False)
    assert all(p.requires_grad for p in model.prompts.visual)
    assert not any(p.requires_grad for p in model.prompts.textual)
    assert not any(p.requires_grad for p in model.backbone_parameters())


def test_seeded_construction_is_deterministic(tokenizer):
    a = DualEncoder(tiny_config(seed=7), tokenizer).state_dict()
    b = DualEncoder(tiny_config(seed=7), tokenizer).state_dict()
    c = DualEncoder(tiny_config(seed=8), tokenizer).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_tokenizer_and_truncation():
    tok = Tokenizer.from_texts(["Red Square"])
    ids = tokenize_text("red SQUARE", tok)
    assert ids[-1] == tok.eos_id and len(ids) == 3
    assert tokenize_text("purple square", tok)[0] == tok.unk_id
    with pytest.raises(ValidationError):
        tokenize_text("  ", tok)
    with pytest.raises(TruncationError):
        tokenize_text("a b c d", tok, context_length=3)
    assert len(tokenize_text("a b c d", tok, context_length=3, truncate=True)) == 4


def test_long_query_rejected(model):
    with pytest.raises(TruncationError):
        model.encode_text(["red " * 9])


def test_predict_cosine_argmax_and_ties():
    t = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    idx, scores = predict(np.array([2.0, 0.1]), t)
    assert idx == 0
    assert scores[0] == pytest.approx(scores[2])
    assert scores[0] == pytest.approx(2.0 / math.hypot(2.0, 0.1))
    idx, _ = predict(np.array([1.0, 1.0]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert idx == 0


def test_predict_errors():
    with pytest.raises(ValidationError):
        predict(np.ones(2), np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        predict(np.ones(3), np.ones((2, 2)))


def test_logits_scale(model):
    v = model.encode_image(torch.rand(2, 32, 32, 3))
    t = model.encode_text(QUERIES[:3])
    assert torch.allclose(model.logits(v, t), 100.0 * v @ t.t())

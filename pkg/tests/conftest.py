import warnings
from pathlib import Path

import pytest
import torch

from opendas.data import generate_synthetic, load_manifest, load_segments
from opendas.mining import build_label_space, load_negative_bank
from opendas.model import DualEncoder, EncoderConfig, ModelConfig, PromptConfig, Tokenizer

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]

# acceptance criterion -> (status, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        line = f"[{status}] criterion {n:>2}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


def tiny_config(depth_v=2, depth_t=2, width=32, layers=2, k_v=8, k_t=4, seed=0,
                patch=8, image=32, ctx=8, logit_scale=100.0, heads=4) -> ModelConfig:
    return ModelConfig(
        vision=EncoderConfig(depth=layers, width=width, heads=heads, patch_size=patch),
        text=EncoderConfig(depth=layers, width=width, heads=heads, context_length=ctx),
        prompt=PromptConfig(depth_v=depth_v, depth_t=depth_t, width_v=k_v, width_t=k_t),
        image_size=image, embed_dim=width, logit_scale=logit_scale, seed=seed)


QUERIES = ["red square", "blue circle", "green triangle", "crimson square",
           "navy circle", "lime triangle", "yellow diamond"]


@pytest.fixture
def tokenizer():
    return Tokenizer.from_texts(QUERIES)


@pytest.fixture
def model(tokenizer):
    return DualEncoder(tiny_config(), tokenizer)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """4 base + 1 novel classes, 12 segments each; fast enough for unit tests."""
    out = tmp_path_factory.mktemp("synth_small")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        generate_synthetic(5, 12, 32, seed=3, out_dir=out, novel_fraction=0.2)
    return out


@pytest.fixture(scope="session")
def small_training(synth_small):
    records = load_manifest(synth_small / "train.jsonl")
    bank = load_negative_bank(synth_small / "negatives.json")
    base = []
    for r in records:
        if r.label not in base:
            base.append(r.label)
    segs = load_segments(records, 32)
    test = load_manifest(synth_small / "test.jsonl")
    tok = Tokenizer.from_texts(base + [r.label for r in test]
                               + [n for v in bank.entries.values() for n in v])
    return segs, base, bank, build_label_space(base, bank), tok

#!/usr/bin/env python3
"""Regenerate the reference fixtures under crates/core/tests/fixtures/.

Reference outputs come from HuggingFace `transformers` (GPT2LMHeadModel,
eager attention, float32) and from two independent GPT-2 tokenizers
(HuggingFace `tokenizers` byte-level BPE and `tiktoken`), which must agree.

By default the model weights are the deterministic synthetic GPT-2-small
checkpoint that `glassgpt_core::weights::synthetic` produces bit-for-bit.
Pass `--checkpoint DIR` to generate fixtures from a real checkpoint
directory (model.safetensors) instead; those go to `fixtures/real/`.

Usage:
    python3 scripts/make_fixtures.py [--checkpoint DIR]
"""

import argparse
import json
import os
import random
import struct
import sys

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ASSETS = os.path.join(ROOT, "assets", "gpt2")
FIXTURES = os.path.join(ROOT, "crates", "core", "tests", "fixtures")

N_LAYER, N_HEAD, D_MODEL, D_MLP, VOCAB, CTX = 12, 12, 768, 3072, 50257, 1024

PARITY_PROMPTS = [
    "the quick brown",
    "Hello world",
    "Data visualization empowers users to",
    "Artificial Intelligence is transforming the",
    "When I was a child, I",
]
GREEDY_PROMPTS = PARITY_PROMPTS[:3]
GREEDY_STEPS = 10

# ---------------------------------------------------------------------------
# Synthetic checkpoint (must match crates/core/src/weights/synthetic.rs)
# ---------------------------------------------------------------------------

MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK
    return h


def role(name: str):
    """(scale, offset) for a tensor name; values are offset + scale * U(-1, 1)."""
    if name == "wte.weight":
        return 0.2, 0.0
    if name == "wpe.weight":
        return 0.05, 0.0
    leaf = name.split(".")[-2] if name.startswith("h.") else name.split(".")[0]
    kind = name.split(".")[-1]
    if leaf.startswith("ln"):
        return (0.2, 1.0) if kind == "weight" else (0.05, 0.0)
    if kind == "bias":
        return 0.02, 0.0
    if name.endswith("mlp.c_proj.weight"):
        return 0.03, 0.0
    return 0.05, 0.0


def synth(name: str, shape, seed: int = 0) -> np.ndarray:
    n = int(np.prod(shape))
    base = np.uint64(fnv1a64(name.encode()) ^ seed)
    with np.errstate(over="ignore"):
        i = np.arange(1, n + 1, dtype=np.uint64)
        z = base + i * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(40)).astype(np.float64) / 16777216.0
    scale, offset = role(name)
    v = (u * 2.0 - 1.0) * scale + offset
    return v.astype(np.float32).reshape(shape)


def tensor_shapes():
    shapes = {"wte.weight": (VOCAB, D_MODEL), "wpe.weight": (CTX, D_MODEL)}
    for i in range(N_LAYER):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.weight": (D_MODEL,),
            p + "ln_1.bias": (D_MODEL,),
            p + "attn.c_attn.weight": (D_MODEL, 3 * D_MODEL),
            p + "attn.c_attn.bias": (3 * D_MODEL,),
            p + "attn.c_proj.weight": (D_MODEL, D_MODEL),
            p + "attn.c_proj.bias": (D_MODEL,),
            p + "ln_2.weight": (D_MODEL,),
            p + "ln_2.bias": (D_MODEL,),
            p + "mlp.c_fc.weight": (D_MODEL, D_MLP),
            p + "mlp.c_fc.bias": (D_MLP,),
            p + "mlp.c_proj.weight": (D_MLP, D_MODEL),
            p + "mlp.c_proj.bias": (D_MODEL,),
        })
    shapes["ln_f.weight"] = (D_MODEL,)
    shapes["ln_f.bias"] = (D_MODEL,)
    return shapes


def synthetic_state():
    return {name: synth(name, shape) for name, shape in tensor_shapes().items()}


def real_state(directory):
    from safetensors.numpy import load_file

    raw = load_file(os.path.join(directory, "model.safetensors"))
    return {k: v.astype(np.float32) for k, v in raw.items() if k in tensor_shapes()}


# ---------------------------------------------------------------------------
# Reference model
# ---------------------------------------------------------------------------


def build_reference(state):
    import torch
    from transformers import GPT2Config, GPT2LMHeadModel

    cfg = GPT2Config(
        n_layer=N_LAYER, n_head=N_HEAD, n_embd=D_MODEL, n_positions=CTX,
        vocab_size=VOCAB, activation_function="gelu_new", layer_norm_epsilon=1e-5,
        resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0, tie_word_embeddings=True,
    )
    cfg._attn_implementation = "eager"
    model = GPT2LMHeadModel(cfg)
    sd = {k: torch.from_numpy(v.copy()) for k, v in state.items()}
    missing, unexpected = model.transformer.load_state_dict(sd, strict=False)
    missing = [m for m in missing if not m.endswith("attn.bias") and not m.endswith("masked_bias")]
    assert not missing and not unexpected, (missing, unexpected)
    model.tie_weights()
    assert model.lm_head.weight.data_ptr() == model.transformer.wte.weight.data_ptr()
    model.eval()
    return model


def write_f32(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def model_fixtures(state, tokenizer, out_dir):
    import torch

    model = build_reference(state)
    os.makedirs(os.path.join(out_dir, "logits"), exist_ok=True)
    parity = []
    with torch.no_grad():
        for i, prompt in enumerate(PARITY_PROMPTS):
            ids = tokenizer.encode_ordinary(prompt)
            out = model(torch.tensor([ids]))
            logits = out.logits[0, -1].numpy().astype(np.float32)
            write_f32(os.path.join(out_dir, "logits", f"prompt{i}.f32"), logits)
            order = sorted(range(VOCAB), key=lambda t: (-float(logits[t]), t))
            top = order[:10]
            gaps = [float(logits[order[j]] - logits[order[j + 1]]) for j in range(10)]
            parity.append({
                "prompt": prompt,
                "ids": ids,
                "top10": top,
                "min_top10_gap": min(gaps),
                "logits_file": f"logits/prompt{i}.f32",
            })

        greedy = []
        for prompt in GREEDY_PROMPTS:
            ids = tokenizer.encode_ordinary(prompt)
            seq = list(ids)
            generated = []
            for _ in range(GREEDY_STEPS):
                logits = model(torch.tensor([seq])).logits[0, -1].numpy()
                best = int(max(range(VOCAB), key=lambda t: (float(logits[t]), -t)))
                generated.append(best)
                seq.append(best)
                if best == 50256:
                    break
            greedy.append({"prompt": prompt, "ids": ids, "generated": generated})

        # Hidden-state fixtures for the first prompt: embedding, block 0 after
        # the attention sublayer, block 0 after the MLP sublayer.
        # The attention module only applies the causal mask the outer model
        # hands it, so capture block 0 with hooks during a full pass.
        ids = tokenizer.encode_ordinary(PARITY_PROMPTS[0])
        tr = model.transformer
        seen = {}
        hooks = [
            tr.h[0].register_forward_pre_hook(lambda m, args: seen.__setitem__("x", args[0])),
            tr.h[0].attn.register_forward_hook(lambda m, args, out: seen.__setitem__("attn", out[0])),
            tr.h[0].register_forward_hook(lambda m, args, out: seen.__setitem__(
                "out", out[0] if isinstance(out, tuple) else out)),
        ]
        model(torch.tensor([ids]))
        for h in hooks:
            h.remove()
        x = seen["x"]
        after_attn = x + seen["attn"]
        after_mlp = seen["out"]
        hidden = {"prompt": PARITY_PROMPTS[0], "ids": ids, "rows": len(ids), "cols": D_MODEL}
        write_f32(os.path.join(out_dir, "hidden_embed.f32"), x[0].numpy())
        write_f32(os.path.join(out_dir, "hidden_block0_attn.f32"), after_attn[0].numpy())
        write_f32(os.path.join(out_dir, "hidden_block0_mlp.f32"), after_mlp[0].numpy())

    with open(os.path.join(out_dir, "parity.json"), "w") as f:
        json.dump({"prompts": parity, "greedy": greedy, "hidden": hidden}, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# Tokenizer corpus
# ---------------------------------------------------------------------------

WORDS = (
    "the of and to in is was that for it with as his on be at by had are but from "
    "not have they this which you were her all she there would their we him been "
    "has when who will more no if out so said what up its about into than them can "
    "only other new some could time these two may then do first any my now such like "
    "our over man me even most made after also did many before must through back "
    "transformer attention embedding token probability temperature softmax layer "
    "visualization GPT OpenAI Hello World HELLO CamelCase snake_case kebab-case "
    "naïve café résumé façade Ångström Zürich São Paulo Москва привет мир Ελλάδα "
    "مرحبا שלום नमस्ते ภาษาไทย 你好 世界 東京 日本語 こんにちは カタカナ 한국어 안녕하세요"
).split()

EMOJI = ["😀", "🎉", "👍🏽", "👨‍👩‍👧‍👦", "🏳️‍🌈", "❤️", "🚀", "🤖", "🧠", "🇯🇵", "✨", "🔥", "🥲", "🫠"]
PUNCT = list(".,;:!?-—–()[]{}<>\"'`~@#$%^&*_+=|\\/…«»¿¡")
CONTRACTIONS = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d", "'S", "'T", "’s", "'x"]
CONTROL = [chr(c) for c in list(range(0, 32)) + [127]] + ["\u0085", " ", " ", "​", "　", "﻿"]
NUMBERS = ["0", "7", "42", "1234", "3.14159", "1,000,000", "2024-10-18", "٣", "²", "Ⅻ", "½", "१२३", "0x1F"]
CJK = "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学对可她里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头面公同三已老从动两长知民样现分将外但身些与高意进把法此实回二理美点月明其"


def corpus_lines(n=1200, seed=20241018):
    rng = random.Random(seed)
    lines = [
        "",
        "Hello world",
        "Hello, world!",
        " leading space",
        "trailing space ",
        "  two leading spaces",
        "multiple   inner    spaces",
        "tabs\tand\t\ttabs",
        "line\nbreak",
        "CRLF\r\nline",
        "\n\n\n",
        "   ",
        "I'm sure they'll say it's what we've done, isn't it? You'd know.",
        "DON'T SHOUT I'M HERE",
        "<|endoftext|> is just text here",
        "emoji only 😀😀😀",
        "👨‍👩‍👧‍👦",
        "日本語のテキストです。",
        "中文文本测试，包括标点符号。",
        "한국어 텍스트",
        "\x00\x01\x02\x1b[31mred\x1b[0m\x7f",
        "numbers 1234567890 and 3.14",
        "https://example.com/path?query=1&x=y#frag",
        "def f(x):\n    return x ** 2\n",
        "a" * 300,
        " " * 50 + "x",
        "é vs é (precomposed vs combining)",
    ]
    pieces = [
        lambda: rng.choice(WORDS),
        lambda: rng.choice(WORDS).capitalize(),
        lambda: rng.choice(EMOJI),
        lambda: rng.choice(PUNCT),
        lambda: rng.choice(CONTRACTIONS),
        lambda: rng.choice(CONTROL),
        lambda: rng.choice(NUMBERS),
        lambda: "".join(rng.choice(CJK) for _ in range(rng.randint(1, 6))),
        lambda: " " * rng.randint(2, 5),
        lambda: chr(rng.randint(0x20, 0x2FFF)),
        lambda: chr(rng.randint(0x1F300, 0x1FAFF)),
        lambda: chr(rng.randint(0x10000, 0x10FFFF)) if rng.random() < 0.3 else "\t",
    ]
    weights = [30, 6, 4, 8, 3, 3, 4, 4, 2, 3, 2, 1]
    while len(lines) < n:
        k = rng.randint(1, 25)
        out = []
        for _ in range(k):
            piece = rng.choices(pieces, weights)[0]()
            sep = rng.choice([" ", " ", " ", "", "\n", "  "])
            out.append(piece + sep)
        s = "".join(out)
        # Drop lone surrogates (not valid UTF-8 scalar values).
        if any(0xD800 <= ord(c) <= 0xDFFF for c in s):
            continue
        lines.append(s)
    return lines


def tokenizer_fixtures(out_dir):
    import tiktoken
    from tiktoken.load import data_gym_to_mergeable_bpe_ranks
    from tokenizers import Tokenizer, models, pre_tokenizers

    hf = Tokenizer(models.BPE.from_file(os.path.join(ASSETS, "vocab.json"), os.path.join(ASSETS, "merges.txt")))
    hf.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False, use_regex=True)
    ranks = data_gym_to_mergeable_bpe_ranks(
        vocab_bpe_file=os.path.join(ASSETS, "merges.txt"),
        encoder_json_file=os.path.join(ASSETS, "vocab.json"),
    )
    tk = tiktoken.Encoding(
        name="gpt2-local",
        pat_str=r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""",
        mergeable_ranks=ranks,
        special_tokens={"<|endoftext|>": 50256},
    )
    records = []
    for line in corpus_lines():
        a = tk.encode_ordinary(line)
        b = hf.encode(line, add_special_tokens=False).ids
        if a != b:
            sys.exit(f"reference tokenizers disagree on {line!r}: {a} vs {b}")
        records.append({"text": line, "ids": a})
    with open(os.path.join(out_dir, "tokenizer_corpus.json"), "w", encoding="utf-8") as f:
        json.dump(records, f, ensure_ascii=True, indent=0)
        f.write("\n")
    return tk


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="directory holding a real model.safetensors")
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args()

    os.makedirs(FIXTURES, exist_ok=True)
    tokenizer = tokenizer_fixtures(FIXTURES)
    if args.skip_model:
        return
    if args.checkpoint:
        state = real_state(args.checkpoint)
        out = os.path.join(FIXTURES, "real")
    else:
        state = synthetic_state()
        out = os.path.join(FIXTURES, "synthetic")
    os.makedirs(out, exist_ok=True)
    # Spot values let the Rust generator prove it is bit-identical.
    probes = {}
    for name in ["wte.weight", "wpe.weight", "h.0.ln_1.weight", "h.11.mlp.c_proj.weight", "ln_f.bias"]:
        flat = state[name].reshape(-1)
        probes[name] = [struct.unpack("<I", struct.pack("<f", float(flat[j])))[0] for j in (0, 1, 2, len(flat) - 1)]
    with open(os.path.join(out, "probes.json"), "w") as f:
        json.dump(probes, f, indent=1, sort_keys=True)
        f.write("\n")
    model_fixtures(state, tokenizer, out)


if __name__ == "__main__":
    main()

# SPDX-License-Identifier: Apache-2.0
"""Export a Hugging Face Llama-style checkpoint to the ATGW weight format.

With --checkpoint, loads a local model directory. Without it, builds a small
randomly initialised LlamaForCausalLM so fixtures need no download.
Writes <out>.atgw and <out>.json; the JSON holds the prompt, the greedy token
and last-position logits from the source runtime, for comparison on load.
"""
import argparse
import json
import struct
import zlib

import torch
from transformers import AutoModelForCausalLM, LlamaConfig, LlamaForCausalLM


def build_random(seed):
    torch.manual_seed(seed)
    cfg = LlamaConfig(
        vocab_size=61,
        hidden_size=32,
        intermediate_size=48,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=4,
        rms_norm_eps=1e-6,
        rope_theta=10000.0,
        max_position_embeddings=256,
        tie_word_embeddings=False,
        attention_bias=False,
        mlp_bias=False,
        initializer_range=0.2,
    )
    model = LlamaForCausalLM(cfg)
    with torch.no_grad():
        # Non-unit norm scales so a swapped or dropped norm shows up.
        for name, p in model.named_parameters():
            if name.endswith("norm.weight") or "layernorm" in name:
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
    return model


def tensors_of(model):
    """ATGW names and row-major [in, out] arrays."""
    cfg = model.config
    sd = {k: v.detach().to(torch.float32) for k, v in model.state_dict().items()}
    out = {"embed": sd["model.embed_tokens.weight"]}
    out["unembed"] = sd["lm_head.weight"].T.contiguous() if "lm_head.weight" in sd else out["embed"].T.contiguous()
    for l in range(cfg.num_hidden_layers):
        p = f"model.layers.{l}."
        for ours, theirs in (("wq", "q_proj"), ("wk", "k_proj"), ("wv", "v_proj"), ("wo", "o_proj")):
            out[f"layer.{l}.attn.{ours}"] = sd[p + f"self_attn.{theirs}.weight"].T.contiguous()
        for ours in ("gate", "up", "down"):
            out[f"layer.{l}.mlp.{ours}"] = sd[p + f"mlp.{ours}_proj.weight"].T.contiguous()
        out[f"layer.{l}.norm1"] = sd[p + "input_layernorm.weight"]
        out[f"layer.{l}.norm2"] = sd[p + "post_attention_layernorm.weight"]
    out["final_norm"] = sd["model.norm.weight"]
    return out


def rope_params(cfg):
    # Newer transformers keep theta inside rope_parameters / rope_scaling.
    for attr in ("rope_parameters", "rope_scaling"):
        v = getattr(cfg, attr, None)
        if isinstance(v, dict):
            return v
    return {}


def rope_theta(cfg):
    theta = getattr(cfg, "rope_theta", None)
    return float(theta if theta is not None else rope_params(cfg).get("rope_theta", 10000.0))


def check_supported(cfg):
    heads = cfg.num_attention_heads
    kv = getattr(cfg, "num_key_value_heads", heads) or heads
    if kv != heads:
        raise SystemExit("grouped-query attention is not supported")
    if getattr(cfg, "attention_bias", False) or getattr(cfg, "mlp_bias", False):
        raise SystemExit("bias terms are not supported")
    rope = rope_params(cfg)
    if rope.get("rope_type", "default") != "default":
        raise SystemExit("rope scaling is not supported")
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // heads
    if head_dim * heads != cfg.hidden_size:
        raise SystemExit("head_dim * heads must equal hidden_size")


def write_atgw(path, cfg, tensors, special):
    manifest, payload = [], bytearray()
    for name, t in tensors.items():
        manifest.append({"name": name, "dtype": "f32", "shape": list(t.shape), "offset": len(payload)})
        payload += t.numpy().astype("<f4").tobytes()
    header = {
        "config": {
            "num_layers": cfg.num_hidden_layers,
            "hidden_dim": cfg.hidden_size,
            "num_heads": cfg.num_attention_heads,
            "vocab_size": cfg.vocab_size,
            "ffn_dim": cfg.intermediate_size,
            "norm_epsilon": cfg.rms_norm_eps,
            "rope_base": rope_theta(cfg),
            "tied_unembedding": bool(cfg.tie_word_embeddings),
            "special_token_ids": sorted(special),
        },
        "tensors": manifest,
    }
    text = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"ATGW" + struct.pack("<II", 1, len(text)) + text + payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="local Hugging Face model directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompt", default="0,17,5,42,9,33,21,8", help="comma-separated token ids")
    ap.add_argument("--out", required=True, help="output path without extension")
    args = ap.parse_args()

    model = AutoModelForCausalLM.from_pretrained(args.checkpoint) if args.checkpoint else build_random(args.seed)
    model.eval()
    cfg = model.config
    check_supported(cfg)
    tensors = tensors_of(model)

    special = {0, 1, 2}
    for attr in ("bos_token_id", "eos_token_id", "pad_token_id"):
        v = getattr(cfg, attr, None)
        if isinstance(v, int) and v < cfg.vocab_size:
            special.add(v)
    write_atgw(args.out + ".atgw", cfg, tensors, special)

    # Reference run on the f32-rounded weights, in double precision.
    model = model.to(torch.float64)
    prompt = [int(t) for t in args.prompt.split(",")]
    with torch.no_grad():
        logits = model(torch.tensor([prompt])).logits[0, -1]
    ref = {
        "prompt": prompt,
        "greedy_token": int(torch.argmax(logits)),
        "logits": [float(v) for v in logits],
        "source": args.checkpoint or f"random LlamaForCausalLM seed={args.seed}",
    }
    with open(args.out + ".json", "w") as f:
        json.dump(ref, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()

//! The original two-way-transformer mask decoder and the high-quality
//! branch that fuses early encoder features into the mask features.
//!
//! Each head runs the shared transformer with its own output token, so the
//! original head never reads the HQ token or the early features.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::tensor::Mat;

use super::prompt::dense_positional_encoding;
use super::{no_grad, Binder, EncoderOutput, ModelState};

pub(crate) const DECODER_LAYERS: usize = 2;

/// Which decoder head produces a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sam,
    Hq,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Sam => "sam",
            Head::Hq => "hq",
        }
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam" => Ok(Head::Sam),
            "hq" => Ok(Head::Hq),
            other => Err(Error::input(format!("unknown head `{other}` (expected sam or hq)"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub sam_logits: MaskGrid,
    pub hq_logits: MaskGrid,
    pub sam_token: Vec<f64>,
    pub hq_token: Vec<f64>,
}

#[derive(Clone, Copy)]
pub(crate) struct DecoderInputs {
    pub early: Var,
    pub embedding: Var,
    pub prompt: Var,
    pub dense_pe: Var,
}

impl DecoderInputs {
    pub(crate) fn new(b: &Binder, g: &mut Graph, early: Var, embedding: Var, prompt: Var) -> Self {
        let dense_pe = g.constant(dense_positional_encoding(b.config()));
        DecoderInputs {
            early,
            embedding,
            prompt,
            dense_pe,
        }
    }
}

fn attend(b: &Binder, g: &mut Graph, prefix: &str, q_in: Var, k_in: Var, v_in: Var) -> Var {
    let q = b.linear(g, &format!("{prefix}.q"), q_in);
    let k = b.linear(g, &format!("{prefix}.k"), k_in);
    let v = b.linear(g, &format!("{prefix}.v"), v_in);
    let o = g.attention(q, k, v, b.config().num_heads);
    b.linear(g, &format!("{prefix}.out"), o)
}

/// Two-way transformer: tokens and image embedding attend to each other.
fn two_way(b: &Binder, g: &mut Graph, tokens: Var, image: Var, image_pe: Var) -> (Var, Var) {
    let mut queries = tokens;
    let mut keys = image;
    for l in 0..DECODER_LAYERS {
        let p = format!("sam_decoder.transformer.layers.{l}");
        let q = if l == 0 { queries } else { g.add(queries, tokens) };
        let a = attend(b, g, &format!("{p}.self_attn"), q, q, queries);
        let s = g.add(queries, a);
        queries = b.layer_norm(g, &format!("{p}.norm1"), s);

        let q = g.add(queries, tokens);
        let k = g.add(keys, image_pe);
        let a = attend(b, g, &format!("{p}.cross_token_to_image"), q, k, keys);
        let s = g.add(queries, a);
        queries = b.layer_norm(g, &format!("{p}.norm2"), s);

        let h = b.linear(g, &format!("{p}.mlp.fc1"), queries);
        let h = g.gelu(h);
        let h = b.linear(g, &format!("{p}.mlp.fc2"), h);
        let s = g.add(queries, h);
        queries = b.layer_norm(g, &format!("{p}.norm3"), s);

        let q = g.add(queries, tokens);
        let k = g.add(keys, image_pe);
        let a = attend(b, g, &format!("{p}.cross_image_to_token"), k, q, queries);
        let s = g.add(keys, a);
        keys = b.layer_norm(g, &format!("{p}.norm4"), s);
    }
    let q = g.add(queries, tokens);
    let k = g.add(keys, image_pe);
    let a = attend(b, g, "sam_decoder.transformer.final_attn", q, k, keys);
    let s = g.add(queries, a);
    queries = b.layer_norm(g, "sam_decoder.transformer.final_norm", s);
    (queries, keys)
}

/// Three-layer MLP mapping an output token to per-channel dynamic weights.
fn hypernetwork(b: &Binder, g: &mut Graph, prefix: &str, token: Var) -> Var {
    let h = b.linear(g, &format!("{prefix}.0"), token);
    let h = g.gelu(h);
    let h = b.linear(g, &format!("{prefix}.1"), h);
    let h = g.gelu(h);
    b.linear(g, &format!("{prefix}.2"), h)
}

/// Logit column (`mask_size² × 1`) and output token (`1 × embed_dim`) of one head.
pub(crate) fn decode_head_graph(b: &Binder, g: &mut Graph, inputs: DecoderInputs, head: Head) -> (Var, Var) {
    let cfg = b.config().clone();
    let grid = cfg.grid_size();
    let up = cfg.upscale_factor();
    let token_name = match head {
        Head::Sam => "sam_decoder.mask_token",
        Head::Hq => "hq_decoder.hq_token",
    };
    let out_token = b.get(g, token_name);
    let tokens = g.concat_rows(&[out_token, inputs.prompt]);
    let (queries, keys) = two_way(b, g, tokens, inputs.embedding, inputs.dense_pe);
    let token = g.slice_rows(queries, 0, 1);

    let up_feats = b.linear(g, "sam_decoder.upscale", keys);
    let up_feats = g.depth_to_space(up_feats, grid, grid, up);
    let mask_feats = g.gelu(up_feats);

    let (features, mlp) = match head {
        Head::Sam => (mask_feats, "sam_decoder.mask_mlp"),
        Head::Hq => {
            let side = cfg.mask_size();
            let early = b.linear(g, "hq_decoder.early_proj", inputs.early);
            let early = g.depth_to_space(early, grid, grid, up);
            let projected = b.linear(g, "hq_decoder.feature_proj", mask_feats);
            let fused = g.add(early, projected);
            let w1 = b.get(g, "hq_decoder.fuse_conv1.weight");
            let b1 = b.get(g, "hq_decoder.fuse_conv1.bias");
            let h = g.conv3x3(fused, w1, b1, side, side);
            let h = g.gelu(h);
            let w2 = b.get(g, "hq_decoder.fuse_conv2.weight");
            let b2 = b.get(g, "hq_decoder.fuse_conv2.bias");
            (g.conv3x3(h, w2, b2, side, side), "hq_decoder.mask_mlp")
        }
    };
    let weights = hypernetwork(b, g, mlp, token);
    (g.matmul_nt(features, weights), token)
}

fn check_inputs(state: &ModelState, enc: &EncoderOutput, prompt: &Mat) -> Result<()> {
    let cfg = &state.config;
    let tokens = cfg.grid_size() * cfg.grid_size();
    let d = cfg.embed_dim;
    if enc.grid != cfg.grid_size()
        || enc.early_features.shape() != (tokens, d)
        || enc.final_embedding.shape() != (tokens, d)
    {
        return Err(Error::input("encoder output does not match the model configuration"));
    }
    if prompt.shape() != (2, d) {
        return Err(Error::input(format!(
            "prompt tokens must be 2x{d}, got {}x{}",
            prompt.rows, prompt.cols
        )));
    }
    Ok(())
}

/// Runs both heads for one box prompt.
pub fn decode(state: &ModelState, enc: &EncoderOutput, prompt: &Mat) -> Result<DecoderOutput> {
    check_inputs(state, enc, prompt)?;
    let b = Binder::new(state, &no_grad);
    let mut g = Graph::inference();
    let early = g.constant(enc.early_features.clone());
    let emb = g.constant(enc.final_embedding.clone());
    let p = g.constant(prompt.clone());
    let inputs = DecoderInputs::new(&b, &mut g, early, emb, p);
    let side = state.config.mask_size();
    let (sam, sam_tok) = decode_head_graph(&b, &mut g, inputs, Head::Sam);
    let (hq, hq_tok) = decode_head_graph(&b, &mut g, inputs, Head::Hq);
    let to_grid = |m: &Mat| MaskGrid::logits(side, side, m.data.iter().map(|&v| v as f32).collect());
    Ok(DecoderOutput {
        sam_logits: to_grid(g.value(sam)),
        hq_logits: to_grid(g.value(hq)),
        sam_token: g.value(sam_tok).data.clone(),
        hq_token: g.value(hq_tok).data.clone(),
    })
}

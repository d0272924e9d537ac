//! Model configuration, the named parameter store, and initialisation.

mod decoder;
mod encoder;
mod prompt;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::seed::mix_seed;
use crate::tensor::Mat;

pub use decoder::{decode, DecoderOutput, Head};
pub use encoder::{encoder_forward, EncoderOutput};
pub use prompt::{box_positional_encoding, encode_box_prompt, sinusoidal_encoding};

pub(crate) use decoder::{decode_head_graph, DecoderInputs};
pub(crate) use encoder::encoder_graph;
pub(crate) use prompt::prompt_graph;

/// Geometry and width hyperparameters of the segmentation model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub canvas_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub lora_rank: usize,
    pub mask_stride: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas_size: 256,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            lora_rank: 4,
            mask_stride: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 1024-pixel canvas geometry with toy channel widths.
    pub fn full_geometry() -> Self {
        ModelConfig {
            canvas_size: 1024,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("canvas_size", self.canvas_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mask_stride", self.mask_stride),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.canvas_size % self.patch_size != 0 {
            return Err(Error::config("canvas_size", "must be divisible by patch_size"));
        }
        if self.canvas_size % self.mask_stride != 0 {
            return Err(Error::config("canvas_size", "must be divisible by mask_stride"));
        }
        if self.patch_size % self.mask_stride != 0 {
            return Err(Error::config("mask_stride", "must divide patch_size"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config("num_heads", "must divide embed_dim"));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::config("embed_dim", "must be a multiple of 4"));
        }
        self.validate_rank(self.lora_rank)
    }

    pub(crate) fn validate_rank(&self, rank: usize) -> Result<()> {
        // Q and V projections are embed_dim × embed_dim.
        if rank == 0 || rank >= self.embed_dim {
            return Err(Error::config(
                "lora_rank",
                format!("must satisfy 0 < r < {} (got {rank})", self.embed_dim),
            ));
        }
        Ok(())
    }

    /// Side length of the patch-token grid.
    pub fn grid_size(&self) -> usize {
        self.canvas_size / self.patch_size
    }

    /// Side length of the decoder logit grid.
    pub fn mask_size(&self) -> usize {
        self.canvas_size / self.mask_stride
    }

    pub(crate) fn upscale_factor(&self) -> usize {
        self.patch_size / self.mask_stride
    }

    pub(crate) fn mask_channels(&self) -> usize {
        (self.embed_dim / 4).max(1)
    }

    pub(crate) fn mlp_dim(&self) -> usize {
        self.embed_dim * 4
    }
}

/// A named, shaped parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data }
    }

    /// Two-dimensional view; vectors become a single row.
    pub fn to_mat(&self) -> Mat {
        match self.shape.as_slice() {
            [n] => Mat::from_vec(1, *n, self.data.clone()),
            [r, c] => Mat::from_vec(*r, *c, self.data.clone()),
            other => panic!("parameter rank {} not supported", other.len()),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Parameter groups used by the freezing policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Adapter,
    LastBlock,
    FrozenEncoder,
    PromptEncoder,
    SamDecoder,
    HqDecoder,
}

/// All model weights plus per-parameter trainability flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
    pub trainable: BTreeMap<String, bool>,
}

impl ModelState {
    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn group_of(&self, name: &str) -> ParamGroup {
        if name.contains(".lora.") {
            ParamGroup::Adapter
        } else if name.starts_with(&format!("encoder.blocks.{}.", self.config.num_blocks - 1)) {
            ParamGroup::LastBlock
        } else if name.starts_with("encoder.") {
            ParamGroup::FrozenEncoder
        } else if name.starts_with("prompt.") {
            ParamGroup::PromptEncoder
        } else if name.starts_with("sam_decoder.") {
            ParamGroup::SamDecoder
        } else {
            ParamGroup::HqDecoder
        }
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| self.group_of(n) == group)
            .cloned()
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.params.keys().any(|n| n.contains(".lora."))
    }

    pub(crate) fn insert(&mut self, name: String, param: Param) {
        self.trainable.insert(name.clone(), false);
        self.params.insert(name, param);
    }

    pub(crate) fn remove(&mut self, name: &str) {
        self.params.remove(name);
        self.trainable.remove(name);
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }
}

/// Chooses which named parameters become gradient-requiring graph leaves.
pub(crate) struct Binder<'a> {
    state: &'a ModelState,
    wants_grad: &'a dyn Fn(&str) -> bool,
}

impl<'a> Binder<'a> {
    pub(crate) fn new(state: &'a ModelState, wants_grad: &'a dyn Fn(&str) -> bool) -> Self {
        Binder { state, wants_grad }
    }

    pub(crate) fn config(&self) -> &ModelConfig {
        &self.state.config
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.state.params.contains_key(name)
    }

    pub(crate) fn get(&self, g: &mut Graph, name: &str) -> Var {
        let state = self.state;
        let wants = self.wants_grad;
        g.param(name, || {
            let p = state
                .params
                .get(name)
                .unwrap_or_else(|| panic!("parameter `{name}` not in model state"));
            (p.to_mat(), wants(name))
        })
    }

    /// `x · Wᵀ + b` for the layer stored under `prefix`.
    pub(crate) fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = self.get(g, &format!("{prefix}.weight"));
        let b = self.get(g, &format!("{prefix}.bias"));
        let y = g.matmul_nt(x, w);
        g.add_row(y, b)
    }

    pub(crate) fn layer_norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let gamma = self.get(g, &format!("{prefix}.weight"));
        let beta = self.get(g, &format!("{prefix}.bias"));
        g.layer_norm(x, gamma, beta)
    }
}

pub(crate) fn no_grad(_: &str) -> bool {
    false
}

/// Rounds to the nearest `f32`; weights are stored at single precision.
pub(crate) fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_specs(specs: &mut Vec<Spec>, prefix: &str, out: usize, inp: usize) {
    specs.push(Spec {
        name: format!("{prefix}.weight"),
        shape: vec![out, inp],
        init: Init::Normal(1.0 / (inp as f64).sqrt()),
    });
    specs.push(Spec {
        name: format!("{prefix}.bias"),
        shape: vec![out],
        init: Init::Zeros,
    });
}

fn norm_specs(specs: &mut Vec<Spec>, prefix: &str, dim: usize) {
    specs.push(Spec {
        name: format!("{prefix}.weight"),
        shape: vec![dim],
        init: Init::Ones,
    });
    specs.push(Spec {
        name: format!("{prefix}.bias"),
        shape: vec![dim],
        init: Init::Zeros,
    });
}

fn attention_specs(specs: &mut Vec<Spec>, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "out"] {
        linear_specs(specs, &format!("{prefix}.{p}"), dim, dim);
    }
}

fn mlp_head_specs(specs: &mut Vec<Spec>, prefix: &str, dim: usize, out: usize) {
    linear_specs(specs, &format!("{prefix}.0"), dim, dim);
    linear_specs(specs, &format!("{prefix}.1"), dim, dim);
    linear_specs(specs, &format!("{prefix}.2"), out, dim);
}

fn conv_specs(specs: &mut Vec<Spec>, prefix: &str, cout: usize, cin: usize) {
    specs.push(Spec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, 9 * cin],
        init: Init::Normal(1.0 / ((9 * cin) as f64).sqrt()),
    });
    specs.push(Spec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn base_specs(c: &ModelConfig) -> Vec<Spec> {
    let d = c.embed_dim;
    let grid = c.grid_size();
    let mc = c.mask_channels();
    let up = c.upscale_factor();
    let mut s = Vec::new();

    linear_specs(&mut s, "encoder.patch_embed", d, c.patch_size * c.patch_size * 3);
    s.push(Spec {
        name: "encoder.pos_embed".into(),
        shape: vec![grid * grid, d],
        init: Init::Normal(0.02),
    });
    for b in 0..c.num_blocks {
        let p = format!("encoder.blocks.{b}");
        norm_specs(&mut s, &format!("{p}.norm1"), d);
        for proj in ["q", "k", "v", "proj"] {
            linear_specs(&mut s, &format!("{p}.attn.{proj}"), d, d);
        }
        norm_specs(&mut s, &format!("{p}.norm2"), d);
        linear_specs(&mut s, &format!("{p}.mlp.fc1"), c.mlp_dim(), d);
        linear_specs(&mut s, &format!("{p}.mlp.fc2"), d, c.mlp_dim());
    }
    linear_specs(&mut s, "encoder.neck", d, d);
    norm_specs(&mut s, "encoder.neck_norm", d);

    s.push(Spec {
        name: "prompt.corner_embed".into(),
        shape: vec![2, d],
        init: Init::Normal(0.5),
    });

    s.push(Spec {
        name: "sam_decoder.mask_token".into(),
        shape: vec![1, d],
        init: Init::Normal(0.5),
    });
    for l in 0..decoder::DECODER_LAYERS {
        let p = format!("sam_decoder.transformer.layers.{l}");
        attention_specs(&mut s, &format!("{p}.self_attn"), d);
        norm_specs(&mut s, &format!("{p}.norm1"), d);
        attention_specs(&mut s, &format!("{p}.cross_token_to_image"), d);
        norm_specs(&mut s, &format!("{p}.norm2"), d);
        linear_specs(&mut s, &format!("{p}.mlp.fc1"), 2 * d, d);
        linear_specs(&mut s, &format!("{p}.mlp.fc2"), d, 2 * d);
        norm_specs(&mut s, &format!("{p}.norm3"), d);
        attention_specs(&mut s, &format!("{p}.cross_image_to_token"), d);
        norm_specs(&mut s, &format!("{p}.norm4"), d);
    }
    attention_specs(&mut s, "sam_decoder.transformer.final_attn", d);
    norm_specs(&mut s, "sam_decoder.transformer.final_norm", d);
    linear_specs(&mut s, "sam_decoder.upscale", up * up * mc, d);
    mlp_head_specs(&mut s, "sam_decoder.mask_mlp", d, mc);

    s.push(Spec {
        name: "hq_decoder.hq_token".into(),
        shape: vec![1, d],
        init: Init::Normal(0.5),
    });
    mlp_head_specs(&mut s, "hq_decoder.mask_mlp", d, mc);
    linear_specs(&mut s, "hq_decoder.early_proj", up * up * mc, d);
    linear_specs(&mut s, "hq_decoder.feature_proj", mc, mc);
    conv_specs(&mut s, "hq_decoder.fuse_conv1", mc, mc);
    conv_specs(&mut s, "hq_decoder.fuse_conv2", mc, mc);
    s
}

/// Stable 64-bit FNV-1a hash of a parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn materialize(seed: u64, spec: &Spec) -> Param {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, name_hash(&spec.name)]));
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| to_storage(dist.sample(&mut rng))).collect()
        }
    };
    Param::new(spec.shape.clone(), data)
}

/// Builds the adapter-free model with seeded, name-keyed initialisation.
///
/// Each parameter draws from its own generator keyed by `(seed, name)`, so
/// the values of one array never depend on which other arrays exist.
pub fn build_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut state = ModelState {
        config: config.clone(),
        params: BTreeMap::new(),
        trainable: BTreeMap::new(),
    };
    for spec in base_specs(config) {
        let p = materialize(config.seed, &spec);
        state.insert(spec.name, p);
    }
    Ok(state)
}

/// [`build_model`] followed by LoRA injection at the configured rank.
pub fn build_adapted_model(config: &ModelConfig) -> Result<ModelState> {
    let mut state = build_model(config)?;
    crate::lora::inject_lora(&mut state, config.lora_rank)?;
    Ok(state)
}

pub(crate) fn lora_init(seed: u64, name: &str, shape: Vec<usize>, std: Option<f64>) -> Param {
    let init = match std {
        Some(s) => Init::Normal(s),
        None => Init::Zeros,
    };
    materialize(
        seed,
        &Spec {
            name: name.to_string(),
            shape,
            init,
        },
    )
}

//! Low-rank adapters on the query and value projections.
//!
//! A frozen weight `W0 (m×n)` gains an encoder `We (r×n)` and a decoder
//! `Wd (m×r)`; the adapted layer computes `W0·x + Wd·(We·x)`. Adapters live
//! next to their base weight as `<layer>.lora.we` / `<layer>.lora.wd`.

use crate::error::{Error, Result};
use crate::model::{lora_init, ModelState, Param};
use crate::tensor::{matmul, matmul_nt, Mat};

/// Standard deviation of the adapter encoder initialisation.
pub const LORA_INIT_STD: f64 = 0.02;

/// Projections that receive adapters in every encoder block.
pub const ADAPTED_PROJECTIONS: [&str; 2] = ["q", "v"];

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `r × n`
    pub we: Mat,
    /// `m × r`
    pub wd: Mat,
    /// Name of the adapted base weight.
    pub target: String,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.we.rows
    }

    fn check(&self, w0: &Mat) -> Result<()> {
        let (m, n) = w0.shape();
        let r = self.we.rows;
        if self.we.cols != n || self.wd.shape() != (m, r) {
            return Err(Error::input(format!(
                "adapter shapes We {:?} / Wd {:?} do not fit base weight {m}x{n}",
                self.we.shape(),
                self.wd.shape()
            )));
        }
        Ok(())
    }
}

/// Names of the layers adapted in a model with `num_blocks` blocks.
pub fn adapted_layers(num_blocks: usize) -> Vec<String> {
    (0..num_blocks)
        .flat_map(|b| ADAPTED_PROJECTIONS.iter().map(move |p| format!("encoder.blocks.{b}.attn.{p}")))
        .collect()
}

/// Adds a zero-initialised-decoder adapter pair to every Q and V projection.
pub fn inject_lora(state: &mut ModelState, rank: usize) -> Result<()> {
    if state.has_adapters() {
        return Err(Error::State("adapters are already injected".into()));
    }
    state.config.validate_rank(rank)?;
    let seed = state.config.seed;
    for layer in adapted_layers(state.config.num_blocks) {
        let base = state.param(&format!("{layer}.weight"))?;
        let (m, n) = (base.shape[0], base.shape[1]);
        if rank >= m.min(n) {
            return Err(Error::config("lora_rank", format!("rank {rank} must be below min({m}, {n})")));
        }
        let we = format!("{layer}.lora.we");
        let wd = format!("{layer}.lora.wd");
        let we_p = lora_init(seed, &we, vec![rank, n], Some(LORA_INIT_STD));
        let wd_p = lora_init(seed, &wd, vec![m, rank], None);
        state.insert(we, we_p);
        state.insert(wd, wd_p);
    }
    state.config.lora_rank = rank;
    Ok(())
}

/// `W0·x + Wd·(We·x)` for each row `x` of `x`, as two thin products.
pub fn lora_forward(x: &Mat, w0: &Mat, pair: &LoraPair) -> Result<Mat> {
    pair.check(w0)?;
    if x.cols != w0.cols {
        return Err(Error::input(format!(
            "input width {} does not match base weight width {}",
            x.cols, w0.cols
        )));
    }
    let mut out = matmul_nt(x, w0);
    let low = matmul_nt(x, &pair.we);
    out.add_assign(&matmul_nt(&low, &pair.wd));
    Ok(out)
}

/// `W0 + Wd·We`.
pub fn merge_lora(w0: &Mat, pair: &LoraPair) -> Result<Mat> {
    pair.check(w0)?;
    let mut merged = w0.clone();
    merged.add_assign(&matmul(&pair.wd, &pair.we));
    Ok(merged)
}

/// The adapter pair attached to `layer`, if any.
pub fn lora_pair(state: &ModelState, layer: &str) -> Option<LoraPair> {
    let we = state.params.get(&format!("{layer}.lora.we"))?;
    let wd = state.params.get(&format!("{layer}.lora.wd"))?;
    Some(LoraPair {
        we: we.to_mat(),
        wd: wd.to_mat(),
        target: format!("{layer}.weight"),
    })
}

/// Folds every adapter into its base weight and removes the adapter arrays.
pub fn merge_adapters(state: &ModelState) -> Result<ModelState> {
    let mut merged = state.clone();
    for layer in adapted_layers(state.config.num_blocks) {
        let Some(pair) = lora_pair(state, &layer) else { continue };
        let base = state.param(&pair.target)?;
        let w = merge_lora(&base.to_mat(), &pair)?;
        merged
            .params
            .insert(pair.target.clone(), Param::new(base.shape.clone(), w.data));
        merged.remove(&format!("{layer}.lora.we"));
        merged.remove(&format!("{layer}.lora.wd"));
    }
    Ok(merged)
}

/// Names of all adapter arrays, sorted.
pub fn adapter_parameters(state: &ModelState) -> Vec<String> {
    state.names().filter(|n| n.contains(".lora.")).map(str::to_string).collect()
}

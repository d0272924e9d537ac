//! Freezing policy, alternating decoder updates, and the optimisation loop.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{fit_to_canvas, large_scale_jitter, random_rotate, LabeledImage, TrainingSample, LSJ_SCALE_RANGE};
use crate::error::{Error, Result};
use crate::loss::{bce_dice_forward, LossWeights};
use crate::model::{
    decode_head_graph, encoder_graph, no_grad, prompt_graph, Binder, DecoderInputs, Head, ModelState, ParamGroup,
};
use crate::raster::Normalization;
use crate::resample::{Interpolation, ResizePlan};
use crate::seed::mix_seed;
use crate::tensor::Mat;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig, Moments};

/// Which decoder receives updates in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "sam")]
    SamTurn,
    #[serde(rename = "hq")]
    HqTurn,
}

impl Phase {
    /// Per-iteration alternation: even steps update the original decoder.
    pub fn for_step(step: u64) -> Phase {
        if step % 2 == 0 {
            Phase::SamTurn
        } else {
            Phase::HqTurn
        }
    }

    pub fn head(self) -> Head {
        match self {
            Phase::SamTurn => Head::Sam,
            Phase::HqTurn => Head::Hq,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.head().as_str()
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam" | "sam_turn" => Ok(Phase::SamTurn),
            "hq" | "hq_turn" => Ok(Phase::HqTurn),
            other => Err(Error::input(format!("unknown phase `{other}` (expected sam_turn or hq_turn)"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    #[default]
    PerIteration,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alternation: Alternation,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Large-scale jitter; when off, images are fitted to the canvas.
    pub lsj: bool,
    pub scale_range: (f64, f64),
    pub rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            learning_rate: 1e-3,
            batch_size: 2,
            alternation: Alternation::PerIteration,
            bce_weight: 1.0,
            dice_weight: 1.0,
            weight_decay: 1e-4,
            seed: 0,
            lsj: true,
            scale_range: LSJ_SCALE_RANGE,
            rotation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::config("scale_range", "needs 0 < low <= high"));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            bce: self.bce_weight,
            dice: self.dice_weight,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn phase(&self, step: u64, epoch: usize) -> Phase {
        match self.alternation {
            Alternation::PerIteration => Phase::for_step(step),
            Alternation::PerEpoch => Phase::for_step(epoch as u64),
        }
    }
}

/// Marks adapters, the last encoder block, and the active decoder trainable;
/// everything else is frozen.
pub fn set_trainability(state: &mut ModelState, phase: Phase) -> Result<()> {
    if !state.has_adapters() {
        return Err(Error::State("set_trainability needs injected adapters".into()));
    }
    let active = match phase {
        Phase::SamTurn => ParamGroup::SamDecoder,
        Phase::HqTurn => ParamGroup::HqDecoder,
    };
    let flags: Vec<(String, bool)> = state
        .names()
        .map(|n| {
            let g = state.group_of(n);
            (n.to_string(), matches!(g, ParamGroup::Adapter | ParamGroup::LastBlock) || g == active)
        })
        .collect();
    for (n, t) in flags {
        state.trainable.insert(n, t);
    }
    Ok(())
}

/// Object-averaged loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Loss history as CSV with header `step,phase,bce,dice,total`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,bce,dice,total\n");
    for r in history {
        out.push_str(&format!("{},{},{:e},{:e},{:e}\n", r.step, r.phase, r.bce, r.dice, r.total));
    }
    out
}

struct SampleOutcome {
    loss: LossValue,
    grads: BTreeMap<String, Mat>,
}

/// Forward (and optionally backward) pass of one sample with every object
/// prompted separately; the loss is divided by `denom` objects.
fn run_sample(
    state: &ModelState,
    sample: &TrainingSample,
    head: Head,
    weights: LossWeights,
    denom: usize,
    with_grads: bool,
) -> Result<SampleOutcome> {
    let cfg = &state.config;
    let canvas = cfg.canvas_size;
    if sample.image.width != canvas || sample.image.height != canvas {
        return Err(Error::input(format!(
            "training sample is {}x{}, canvas is {canvas}",
            sample.image.width, sample.image.height
        )));
    }
    let trainable = |n: &str| state.is_trainable(n);
    let wants: &dyn Fn(&str) -> bool = if with_grads { &trainable } else { &no_grad };
    let b = Binder::new(state, wants);
    let mut g = if with_grads { Graph::training() } else { Graph::inference() };
    let image = sample.image.normalized(&Normalization::default());
    let (early, emb) = encoder_graph(&b, &mut g, &image);
    let side = cfg.mask_size();
    let plan = Arc::new(ResizePlan::new(side, side, canvas, canvas, Interpolation::Bilinear));
    let scale = 1.0 / denom as f64;
    let mut loss = LossValue::default();
    let mut sum: Option<Var> = None;
    let mut inputs: Option<DecoderInputs> = None;
    for obj in &sample.objects {
        let prompt = prompt_graph(&b, &mut g, &obj.bbox)?;
        let mut inp = *inputs.get_or_insert_with(|| DecoderInputs::new(&b, &mut g, early, emb, prompt));
        inp.prompt = prompt;
        let (logits, _) = decode_head_graph(&b, &mut g, inp, head);
        let up = g.resize(logits, plan.clone());
        let target: Arc<Vec<f64>> = Arc::new(obj.mask.values.iter().map(|&v| f64::from(u8::from(v > 0.5))).collect());
        let parts = bce_dice_forward(&g.value(up).data, &target, weights);
        loss.bce += parts.bce * scale;
        loss.dice += parts.dice * scale;
        loss.total += parts.total * scale;
        if with_grads {
            let l = g.bce_dice(up, target, weights);
            let l = g.scale(l, scale);
            sum = Some(match sum {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
    }
    let grads = match sum {
        Some(l) => g.param_grads(&g.backward(l)),
        None => BTreeMap::new(),
    };
    Ok(SampleOutcome { loss, grads })
}

fn run_batch(
    state: &ModelState,
    batch: &[TrainingSample],
    head: Head,
    weights: LossWeights,
    with_grads: bool,
) -> Result<(LossValue, BTreeMap<String, Mat>)> {
    let objects: usize = batch.iter().map(|s| s.objects.len()).sum();
    if objects == 0 {
        return Err(Error::input("batch contains no objects"));
    }
    let outcomes: Vec<Result<SampleOutcome>> = batch
        .par_iter()
        .map(|s| run_sample(state, s, head, weights, objects, with_grads))
        .collect();
    let mut loss = LossValue::default();
    let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
    for o in outcomes {
        let o = o?;
        loss.bce += o.loss.bce;
        loss.dice += o.loss.dice;
        loss.total += o.loss.total;
        for (name, g) in o.grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Object-averaged loss of `head` over a batch, without gradients.
pub fn batch_loss(state: &ModelState, batch: &[TrainingSample], head: Head, weights: LossWeights) -> Result<LossValue> {
    run_batch(state, batch, head, weights, false).map(|(l, _)| l)
}

/// Loss and gradients of every currently trainable parameter.
pub fn batch_gradients(
    state: &ModelState,
    batch: &[TrainingSample],
    head: Head,
    weights: LossWeights,
) -> Result<(LossValue, BTreeMap<String, Mat>)> {
    run_batch(state, batch, head, weights, true)
}

/// One update in an explicit phase: freeze, forward the active head,
/// backpropagate, step the optimiser.
pub fn step_in_phase(
    state: &mut ModelState,
    optimizer: &mut AdamW,
    batch: &[TrainingSample],
    step: u64,
    epoch: usize,
    phase: Phase,
    weights: LossWeights,
) -> Result<LossRecord> {
    set_trainability(state, phase)?;
    let (loss, grads) = run_batch(state, batch, phase.head(), weights, true)?;
    if !loss.total.is_finite() || grads.values().any(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            step,
            phase: phase.as_str(),
        });
    }
    optimizer.step(state, &grads);
    Ok(LossRecord {
        step,
        epoch,
        phase,
        bce: loss.bce,
        dice: loss.dice,
        total: loss.total,
    })
}

/// One per-iteration-alternation update; the phase follows the step parity.
pub fn training_step(
    state: &mut ModelState,
    optimizer: &mut AdamW,
    batch: &[TrainingSample],
    step_index: u64,
    weights: LossWeights,
) -> Result<LossRecord> {
    step_in_phase(state, optimizer, batch, step_index, 0, Phase::for_step(step_index), weights)
}

/// Augmented canvas sample for `item`, drawn from the `(seed, epoch, index)`
/// substream.
pub fn prepare_sample(item: &LabeledImage, canvas: usize, config: &TrainConfig, epoch: usize, index: usize) -> TrainingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, index as u64]));
    let sample = if config.lsj {
        large_scale_jitter(item, canvas, config.scale_range, &mut rng)
    } else {
        fit_to_canvas(item, canvas)
    };
    if config.rotation {
        random_rotate(&sample, &mut rng)
    } else {
        sample
    }
}

/// Owns the model and optimiser across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(state: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !state.has_adapters() {
            return Err(Error::State("training needs injected adapters".into()));
        }
        Ok(Trainer {
            state,
            optimizer: AdamW::new(config.optimizer()),
            config,
            step: 0,
            epoch: 0,
        })
    }

    /// Continues a run; `config` overrides the stored one (e.g. more epochs).
    pub fn from_checkpoint(ckpt: Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let config = match (config, ckpt.train_config) {
            (Some(c), _) | (None, Some(c)) => c,
            (None, None) => return Err(Error::State("checkpoint carries no training configuration".into())),
        };
        let mut t = Trainer::new(ckpt.state, config)?;
        t.optimizer = ckpt.optimizer;
        t.optimizer.config = t.config.optimizer();
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            optimizer: self.optimizer.clone(),
            train_config: Some(self.config.clone()),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Samples of epoch `epoch` in their shuffled visiting order.
    pub fn epoch_samples(&self, data: &[LabeledImage], epoch: usize) -> Vec<TrainingSample> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch as u64, u64::MAX]));
        order.shuffle(&mut rng);
        let canvas = self.state.config.canvas_size;
        order
            .par_iter()
            .map(|&i| prepare_sample(&data[i], canvas, &self.config, epoch, i))
            .collect()
    }

    pub fn run_epoch(&mut self, data: &[LabeledImage]) -> Result<Vec<LossRecord>> {
        let samples = self.epoch_samples(data, self.epoch);
        let weights = self.config.weights();
        let mut records = Vec::new();
        for batch in samples.chunks(self.config.batch_size) {
            if batch.iter().all(|s| s.objects.is_empty()) {
                log::warn!("epoch {}: skipping a batch whose objects were all cropped out", self.epoch);
                continue;
            }
            let phase = self.config.phase(self.step, self.epoch);
            let rec = step_in_phase(
                &mut self.state,
                &mut self.optimizer,
                batch,
                self.step,
                self.epoch,
                phase,
                weights,
            )?;
            log::debug!("step {} ({}) loss {:.5}", rec.step, rec.phase, rec.total);
            records.push(rec);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        data: &[LabeledImage],
        mut on_epoch: impl FnMut(&Trainer, &[LossRecord]) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::input("training dataset is empty"));
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let records = self.run_epoch(data)?;
            if let Some(last) = records.last() {
                log::info!("epoch {} done, last loss {:.5}", self.epoch, last.total);
            }
            on_epoch(self, &records)?;
            history.extend(records);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// Trains `state` from scratch for `config.epochs` epochs.
pub fn train(state: ModelState, data: &[LabeledImage], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(state, config.clone())?;
    let history = trainer.run(data, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObjectAnnotation;
    use crate::mask::MaskGrid;
    use crate::model::{build_adapted_model, build_model, ModelConfig};
    use crate::raster::RgbImage;

    pub(crate) fn toy_item(name: &str, size: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> LabeledImage {
        let mut image = RgbImage::filled(size, size, 40);
        let mask = MaskGrid::from_bools(
            size,
            size,
            (0..size * size).map(|i| {
                let (x, y) = (i % size, i / size);
                x >= x0 && x < x1 && y >= y0 && y < y1
            }),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                image.put(x, y, [220, 200, 90]);
            }
        }
        LabeledImage {
            name: name.into(),
            image,
            objects: vec![ObjectAnnotation {
                bbox: mask.tight_bbox().unwrap(),
                mask,
                category: "ship".into(),
            }],
        }
    }

    fn plain_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            lsj: false,
            rotation: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trainable_sets_per_phase() {
        let mut state = build_adapted_model(&ModelConfig::default()).unwrap();
        set_trainability(&mut state, Phase::SamTurn).unwrap();
        assert!(state.is_trainable("sam_decoder.mask_token"));
        assert!(!state.is_trainable("hq_decoder.fuse_conv1.weight"));
        assert!(state.is_trainable("encoder.blocks.3.mlp.fc1.weight"));
        assert!(state.is_trainable("encoder.blocks.0.attn.q.lora.we"));
        assert!(!state.is_trainable("encoder.blocks.0.attn.q.weight"));
        assert!(!state.is_trainable("encoder.patch_embed.weight"));
        assert!(!state.is_trainable("prompt.corner_embed"));
        set_trainability(&mut state, Phase::HqTurn).unwrap();
        assert!(!state.is_trainable("sam_decoder.mask_token"));
        assert!(state.is_trainable("hq_decoder.hq_token"));
        assert!("both".parse::<Phase>().is_err());
        assert_eq!("hq_turn".parse::<Phase>().unwrap(), Phase::HqTurn);

        let mut bare = build_model(&ModelConfig::default()).unwrap();
        assert!(matches!(set_trainability(&mut bare, Phase::SamTurn), Err(Error::State(_))));
    }

    #[test]
    fn empty_batch_is_an_input_error() {
        let mut state = build_adapted_model(&ModelConfig::default()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let r = training_step(&mut state, &mut opt, &[], 0, LossWeights::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn alternation_follows_parity() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.phase(4, 1), Phase::SamTurn);
        assert_eq!(cfg.phase(5, 0), Phase::HqTurn);
        let per_epoch = TrainConfig {
            alternation: Alternation::PerEpoch,
            ..cfg
        };
        assert_eq!(per_epoch.phase(5, 2), Phase::SamTurn);
        assert_eq!(per_epoch.phase(4, 3), Phase::HqTurn);
    }

    #[test]
    fn zero_epochs_keep_the_initialisation() {
        let state = build_adapted_model(&ModelConfig::default()).unwrap();
        let data = vec![toy_item("a", 128, 20, 30, 60, 70)];
        let cfg = TrainConfig {
            epochs: 0,
            ..plain_config()
        };
        let out = train(state.clone(), &data, &cfg).unwrap();
        assert_eq!(out.checkpoint.state.params, state.params);
        assert!(out.history.is_empty());
    }

    #[test]
    fn loss_history_is_reproducible() {
        let state = build_adapted_model(&ModelConfig::default()).unwrap();
        let data = vec![toy_item("a", 128, 20, 30, 60, 70), toy_item("b", 128, 50, 10, 90, 40)];
        let a = train(state.clone(), &data, &plain_config()).unwrap();
        let b = train(state, &data, &plain_config()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert!(a.history.iter().all(|r| r.total.is_finite()));
        assert_eq!(a.history[1].phase, Phase::HqTurn);
        assert!(history_csv(&a.history).starts_with("step,phase,bce,dice,total\n0,sam,"));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "batch_size", .. })));
        let bad = TrainConfig {
            bce_weight: 0.0,
            dice_weight: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::sync::OnceLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{criterion, ensure, overfit_pair, random_box, random_float_image, random_mask, synthetic_item, Shape};
use rosam::cli::{cmd_convert, write_initial_checkpoint, ConvertArgs, InferFlags, RunConfig, Shared};
use rosam::data::{
    boxes_match_masks, fit_to_canvas, jitter_with_scale, large_scale_jitter, load_dataset, random_rotate, rotate,
    LabeledImage, LSJ_SCALE_RANGE,
};
use rosam::infer::{
    ablation_configs, extract_and_upsample, plan_crops, restore_mask, segment_objects, InferenceConfig,
};
use rosam::lora::merge_adapters;
use rosam::loss::{bce_dice_loss, LossWeights};
use rosam::metrics::{biou, boundary_region, iou};
use rosam::model::{decode, encode_box_prompt, encoder_forward, ParamGroup};
use rosam::raster::RgbImage;
use rosam::train::{
    batch_gradients, batch_loss, checkpoint_to_bytes, load_checkpoint, prepare_sample, save_checkpoint,
    set_trainability, training_step, AdamW, LossRecord, Phase, TrainConfig, Trainer,
};
use rosam::{build_adapted_model, build_model, BoxPrompt, Head, MaskGrid, ModelConfig, ModelState};

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn max_abs(v: &[f32]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()))
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()))
}

#[test]
fn c01_lora_identity() {
    criterion(1, "LoRA identity at injection", secs(10), || {
        let cfg = ModelConfig::default();
        let bare = build_model(&cfg).unwrap();
        let adapted = build_adapted_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let img = random_float_image(&mut rng, cfg.canvas_size);
            let bx = random_box(&mut rng, cfg.canvas_size);
            let (ea, eb) = (encoder_forward(&bare, &img).unwrap(), encoder_forward(&adapted, &img).unwrap());
            worst = worst.max(ea.final_embedding.max_abs_diff(&eb.final_embedding));
            worst = worst.max(ea.early_features.max_abs_diff(&eb.early_features));
            let p = encode_box_prompt(&bare, &bx).unwrap();
            let (da, db) = (decode(&bare, &ea, &p).unwrap(), decode(&adapted, &eb, &p).unwrap());
            worst = worst.max(max_diff(&da.sam_logits.values, &db.sam_logits.values));
            worst = worst.max(max_diff(&da.hq_logits.values, &db.hq_logits.values));
        }
        ensure(worst <= 1e-6, || format!("max abs diff {worst:e} > 1e-6"))?;
        Ok(format!("10 inputs, max abs diff {worst:e}"))
    });
}

#[test]
fn c02_merge_equivalence() {
    criterion(2, "merged weights reproduce adapted forward", secs(30), || {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let cfg = ModelConfig {
                canvas_size: 128,
                lora_rank: rng.random_range(1..8),
                seed,
                ..ModelConfig::default()
            };
            let mut state = build_adapted_model(&cfg).unwrap();
            for (name, p) in state.params.iter_mut() {
                if name.ends_with(".lora.wd") {
                    p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
                }
            }
            let merged = merge_adapters(&state).unwrap();
            if merged.has_adapters() {
                return Err("merged model still carries adapters".into());
            }
            let img = random_float_image(&mut rng, cfg.canvas_size);
            let bx = random_box(&mut rng, cfg.canvas_size);
            let (ea, eb) = (encoder_forward(&state, &img).unwrap(), encoder_forward(&merged, &img).unwrap());
            let p = encode_box_prompt(&state, &bx).unwrap();
            let (da, db) = (decode(&state, &ea, &p).unwrap(), decode(&merged, &eb, &p).unwrap());
            let rel_emb = ea.final_embedding.max_abs_diff(&eb.final_embedding)
                / ea.final_embedding.data.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            let rel_sam = max_diff(&da.sam_logits.values, &db.sam_logits.values) / max_abs(&da.sam_logits.values).max(1e-12);
            let rel_hq = max_diff(&da.hq_logits.values, &db.hq_logits.values) / max_abs(&da.hq_logits.values).max(1e-12);
            worst = worst.max(rel_emb).max(rel_sam).max(rel_hq);
        }
        ensure(worst <= 1e-5, || format!("max relative diff {worst:e} > 1e-5"))?;
        Ok(format!("10 models, max relative diff {worst:e}"))
    });
}

#[test]
fn c03_gradient_fidelity() {
    criterion(3, "analytic vs central-difference gradients", secs(120), || {
        let cfg = ModelConfig::default();
        let mut state = build_adapted_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Non-zero adapter decoders so the encoder halves get gradient.
        for (name, p) in state.params.iter_mut() {
            if name.ends_with(".lora.wd") {
                p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
            }
        }
        let item = synthetic_item("g", 128, 128, &[Shape::Disk { cx: 60.0, cy: 70.0, r: 20.0 }]);
        let batch = vec![fit_to_canvas(&item, cfg.canvas_size)];
        let w = LossWeights::default();
        let h = 1e-4;
        let probes: [(Phase, &[&str]); 2] = [
            (
                Phase::SamTurn,
                &[
                    "encoder.blocks.0.attn.q.lora.we",
                    "encoder.blocks.1.attn.v.lora.wd",
                    "encoder.blocks.3.mlp.fc1.weight",
                    "encoder.blocks.3.attn.k.weight",
                    "sam_decoder.mask_mlp.2.weight",
                    "sam_decoder.transformer.layers.0.cross_token_to_image.v.weight",
                    "sam_decoder.mask_token",
                ],
            ),
            (
                Phase::HqTurn,
                &[
                    "encoder.blocks.0.attn.v.lora.we",
                    "encoder.blocks.2.attn.q.lora.wd",
                    "hq_decoder.fuse_conv1.weight",
                    "hq_decoder.early_proj.weight",
                    "hq_decoder.hq_token",
                    "hq_decoder.mask_mlp.0.weight",
                ],
            ),
        ];
        let mut worst = 0.0f64;
        let mut count = 0;
        for (phase, names) in probes {
            set_trainability(&mut state, phase).unwrap();
            let (_, grads) = batch_gradients(&state, &batch, phase.head(), w).unwrap();
            for name in names {
                if !state.is_trainable(name) {
                    return Err(format!("{name} is not trainable in {phase}"));
                }
                let g = &grads[*name];
                let peak = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                // A random coordinate among those carrying a non-negligible gradient.
                let candidates: Vec<usize> = (0..g.data.len()).filter(|&i| g.data[i].abs() >= 0.05 * peak).collect();
                let idx = candidates[rng.random_range(0..candidates.len())];
                let base = state.params[*name].data[idx];
                let mut probe = state.clone();
                probe.params.get_mut(*name).unwrap().data[idx] = base + h;
                let up = batch_loss(&probe, &batch, phase.head(), w).unwrap().total;
                probe.params.get_mut(*name).unwrap().data[idx] = base - h;
                let down = batch_loss(&probe, &batch, phase.head(), w).unwrap().total;
                let fd = (up - down) / (2.0 * h);
                let a = g.data[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
                worst = worst.max(rel);
                count += 1;
                if rel > 1e-3 {
                    return Err(format!("{name}[{idx}]: analytic {a:e} vs fd {fd:e} (rel {rel:e})"));
                }
            }
        }
        Ok(format!("{count} coordinates, max relative error {worst:e}"))
    });
}

fn snapshot(state: &ModelState) -> BTreeMap<String, Vec<u64>> {
    state
        .params
        .iter()
        .map(|(n, p)| (n.clone(), p.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn c04_freeze_and_alternation_audit() {
    criterion(4, "freeze/alternation audit over 10 steps", secs(60), || {
        let cfg = ModelConfig::default();
        let mut state = build_adapted_model(&cfg).unwrap();
        let mut opt = AdamW::new(TrainConfig::default().optimizer());
        let data = overfit_pair();
        let tcfg = TrainConfig::default();
        let w = tcfg.weights();
        for step in 0..10u64 {
            let batch: Vec<_> = data
                .iter()
                .enumerate()
                .map(|(i, d)| prepare_sample(d, cfg.canvas_size, &tcfg, step as usize, i))
                .filter(|s| !s.objects.is_empty())
                .collect();
            let batch = if batch.is_empty() { vec![fit_to_canvas(&data[0], cfg.canvas_size)] } else { batch };
            let before = snapshot(&state);
            let rec = training_step(&mut state, &mut opt, &batch, step, w).unwrap();
            let after = snapshot(&state);
            let changed: BTreeSet<&String> = before.keys().filter(|n| before[*n] != after[*n]).collect();
            let phase = Phase::for_step(step);
            ensure(rec.phase == phase, || format!("step {step} ran {}", rec.phase))?;
            for n in &changed {
                ensure(state.is_trainable(n), || format!("step {step}: non-trainable `{n}` changed"))?;
                let g = state.group_of(n);
                ensure(
                    !matches!(g, ParamGroup::FrozenEncoder | ParamGroup::PromptEncoder),
                    || format!("step {step}: frozen base weight `{n}` changed"),
                )?;
            }
            let group_changed = |g: ParamGroup| changed.iter().any(|n| state.group_of(n) == g);
            let even = step % 2 == 0;
            ensure(group_changed(ParamGroup::SamDecoder) == even, || {
                format!("step {step}: original decoder changed = {}", !even)
            })?;
            ensure(group_changed(ParamGroup::HqDecoder) == !even, || {
                format!("step {step}: HQ branch changed = {even}")
            })?;
            ensure(group_changed(ParamGroup::LastBlock), || format!("step {step}: last block did not update"))?;
        }
        Ok("frozen base never changed; decoder updates on even/odd steps only".into())
    });
}

struct OverfitRun {
    history: Vec<LossRecord>,
    state: ModelState,
    data: Vec<LabeledImage>,
    config: TrainConfig,
}

fn overfit_run() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = overfit_pair();
        let config = TrainConfig {
            epochs: 200,
            batch_size: 2,
            lsj: false,
            rotation: false,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(build_adapted_model(&ModelConfig::default()).unwrap(), config.clone()).unwrap();
        let history = trainer.run(&data, |_, _| Ok(())).unwrap();
        OverfitRun {
            history,
            state: trainer.state,
            data,
            config,
        }
    })
}

#[test]
fn c05_overfit_sanity() {
    criterion(5, "overfit two synthetic samples in 200 steps", secs(300), || {
        let run = overfit_run();
        ensure(run.history.len() == 200, || format!("{} steps ran", run.history.len()))?;
        let canvas = run.state.config.canvas_size;
        let samples: Vec<_> = run.data.iter().map(|d| fit_to_canvas(d, canvas)).collect();
        let icfg = InferenceConfig::for_canvas(canvas);
        let mut parts = Vec::new();
        for head in [Head::Sam, Head::Hq] {
            let loss = batch_loss(&run.state, &samples, head, run.config.weights()).unwrap().total;
            ensure(loss < 0.05, || format!("{head} final loss {loss:.4} >= 0.05"))?;
            let mut min_iou = 1.0f64;
            for d in &run.data {
                let boxes: Vec<BoxPrompt> = d.objects.iter().map(|o| o.bbox).collect();
                let masks = segment_objects(&run.state, &d.image, &boxes, &icfg, head).unwrap();
                for (m, o) in masks.iter().zip(&d.objects) {
                    min_iou = min_iou.min(iou(&m.mask, &o.mask).unwrap());
                }
            }
            ensure(min_iou > 0.9, || format!("{head} train IoU {min_iou:.4} <= 0.9"))?;
            parts.push(format!("{head} loss {loss:.4} IoU {min_iou:.4}"));
        }
        Ok(parts.join(", "))
    });
}

#[test]
fn overfit_moving_average_does_not_rise_after_step_50() {
    let run = overfit_run();
    let totals: Vec<f64> = run.history.iter().map(|r| r.total).collect();
    let avg: Vec<f64> = totals.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    // avg[i] covers steps i..i+20.
    for i in 51..avg.len() {
        assert!(
            avg[i] <= avg[i - 1] + 1e-12,
            "20-step average rose at step {}: {} -> {}",
            i + 19,
            avg[i - 1],
            avg[i]
        );
    }
}

#[test]
fn c06_pipeline_geometry() {
    criterion(6, "crop planning, restore round trip, ablation configs", secs(60), || {
        let w = plan_crops(
            &[BoxPrompt::new(550.0, 550.0, 650.0, 650.0), BoxPrompt::new(2.0, 4.0, 18.0, 16.0)],
            (2000, 2000),
            512,
        )
        .unwrap();
        ensure((w[0].origin_x, w[0].origin_y) == (344, 344), || format!("centred origin {:?}", w[0]))?;
        ensure((w[1].origin_x, w[1].origin_y) == (0, 0), || format!("clamped origin {:?}", w[1]))?;
        let p = plan_crops(&[BoxPrompt::new(100.0, 100.0, 140.0, 150.0)], (400, 400), 512).unwrap();
        ensure(
            (p[0].origin_x, p[0].origin_y, p[0].pad_right, p[0].pad_bottom) == (0, 0, 112, 112),
            || format!("padded window {:?}", p[0]),
        )?;

        // Rate-1 round trip of a binary mask carried as saturated logits.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (fw, fh) = (600, 400);
        let mask = random_mask(&mut rng, fw, fh);
        let img = RgbImage::from_raw(fw, fh, mask.to_bytes().iter().flat_map(|&b| [b, b, b]).collect()).unwrap();
        let cfg = InferenceConfig {
            window_size: 256,
            sampling_rate: 1,
            ..InferenceConfig::default()
        };
        for _ in 0..5 {
            let bx = random_box(&mut rng, 400);
            let win = plan_crops(&[bx], (fh, fw), 256).unwrap()[0];
            let patch = extract_and_upsample(&img, &win, &cfg, &bx).unwrap();
            let logits = MaskGrid::logits(
                256,
                256,
                (0..256 * 256).map(|i| if patch.image.data[i * 3] > 0.0 { 20.0 } else { -20.0 }).collect(),
            );
            let r = restore_mask(&logits, &win, &cfg, (fh, fw)).unwrap();
            for y in 0..fh {
                for x in 0..fw {
                    let want = win.contains(x, y) && mask.is_set(x, y);
                    ensure(r.mask.is_set(x, y) == want, || format!("round trip differs at ({x},{y})"))?;
                }
            }
        }

        // Footprints and all seven ablation rows on a real model.
        let state = build_model(&ModelConfig::default()).unwrap();
        let item = synthetic_item(
            "scene",
            420,
            300,
            &[
                Shape::Rect { x0: 20, y0: 30, x1: 60, y1: 55 },
                Shape::Disk { cx: 300.0, cy: 200.0, r: 15.0 },
                Shape::Rect { x0: 380, y0: 260, x1: 415, y1: 296 },
            ],
        );
        let boxes: Vec<BoxPrompt> = item.objects.iter().map(|o| o.bbox).collect();
        for (name, cfg) in ablation_configs(256) {
            let out = segment_objects(&state, &item.image, &boxes, &cfg, Head::Hq)
                .map_err(|e| format!("config {name}: {e}"))?;
            ensure(out.len() == boxes.len(), || format!("config {name}: {} masks", out.len()))?;
            for r in &out {
                let outside = (0..300 * 420).any(|i| r.mask.values[i] > 0.5 && !r.window.contains(i % 420, i / 420));
                ensure(!outside, || format!("config {name}: mask leaks outside {:?}", r.window))?;
            }
        }
        Ok("344/0-clamp/pad-112 origins, exact rate-1 round trip, 7 ablation configs ran".into())
    });
}

#[test]
fn c07_augmentation_contract() {
    criterion(7, "augmentation contract", secs(120), || {
        let tiny = synthetic_item("t", 16, 12, &[Shape::Rect { x0: 3, y0: 2, x1: 9, y1: 8 }]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = LSJ_SCALE_RANGE;
        let (mut shrink, mut enlarge) = (0, 0);
        for _ in 0..10_000 {
            let s = large_scale_jitter(&tiny, 16, LSJ_SCALE_RANGE, &mut rng).log.scale;
            ensure((lo..=hi).contains(&s), || format!("scale {s} outside [{lo}, {hi}]"))?;
            if s < 1.0 {
                shrink += 1;
            } else {
                enlarge += 1;
            }
        }
        ensure(shrink > 0 && enlarge > 0, || "only one side of the scale range drawn".into())?;

        for i in 0..100 {
            let w = rng.random_range(24..80);
            let h = rng.random_range(24..80);
            let mut item = synthetic_item("r", w, h, &[]);
            for _ in 0..rng.random_range(1..4) {
                let mask = random_mask(&mut rng, w, h);
                item.objects.push(rosam::data::ObjectAnnotation {
                    bbox: mask.tight_bbox().unwrap(),
                    mask,
                    category: "car".into(),
                });
            }
            let s = large_scale_jitter(&item, 64, LSJ_SCALE_RANGE, &mut rng);
            ensure(boxes_match_masks(&s), || format!("sample {i}: box != tight bbox after LSJ"))?;
            let r = random_rotate(&s, &mut rng);
            ensure(boxes_match_masks(&r), || format!("sample {i}: box != tight bbox after rotation"))?;
        }

        let item = synthetic_item("q", 64, 64, &[Shape::Rect { x0: 5, y0: 10, x1: 30, y1: 20 }]);
        let base = jitter_with_scale(&item, 64, 1.0, &mut rng);
        ensure(rotate(&base, 0.0).image == base.image, || "0 degree rotation changed the image".into())?;
        ensure(rotate(&base, 0.0).objects == base.objects, || "0 degree rotation changed the objects".into())?;
        let q = rotate(&base, 90.0);
        let (src, dst) = (&base.objects[0].mask, &q.objects[0].mask);
        ensure(src.area() == dst.area(), || "90 degree rotation changed mask area".into())?;
        for y in 0..64 {
            for x in 0..64 {
                ensure(src.is_set(x, y) == dst.is_set(y, 63 - x), || format!("90 degree map broken at ({x},{y})"))?;
                ensure(base.image.pixel(x, y) == q.image.pixel(y, 63 - x), || "90 degree image map broken".into())?;
            }
        }

        let cfg = TrainConfig::default();
        let a = prepare_sample(&overfit_pair()[1], 256, &cfg, 3, 1);
        let b = prepare_sample(&overfit_pair()[1], 256, &cfg, 3, 1);
        ensure(a == b, || "same seed produced different samples".into())?;
        Ok(format!("10^4 scales in range ({shrink} shrink/{enlarge} enlarge), 100 co-transforms tight, exact 0/90, seeded"))
    });
}

/// Pixels of `m` within Euclidean distance `d` of a background pixel, by
/// exhaustive search; everything outside the grid is background.
fn brute_band(m: &MaskGrid, d: usize) -> MaskGrid {
    let (w, h) = (m.width as i64, m.height as i64);
    let d2 = (d * d) as i64;
    let bg = |x: i64, y: i64| x < 0 || y < 0 || x >= w || y >= h || !m.is_set(x as usize, y as usize);
    let mut out = MaskGrid::empty(m.height, m.width);
    for y in 0..h {
        for x in 0..w {
            if bg(x, y) {
                continue;
            }
            let r = d as i64;
            let near = (-r..=r).any(|dy| (-r..=r).any(|dx| dx * dx + dy * dy <= d2 && bg(x + dx, y + dy)));
            if near {
                out.set(x as usize, y as usize, 1.0);
            }
        }
    }
    out
}

fn brute_iou(a: &MaskGrid, b: &MaskGrid) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn c08_metric_oracles() {
    criterion(8, "IoU/BIoU oracles", secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..100 {
            let a = random_mask(&mut rng, 32, 32);
            let b = random_mask(&mut rng, 32, 32);
            let d = rng.random_range(1..6);
            let got = iou(&a, &b).unwrap();
            let want = brute_iou(&a, &b);
            ensure(got == want, || format!("pair {i}: iou {got} vs {want}"))?;
            let got = biou(&a, &b, d).unwrap();
            let want = brute_iou(&brute_band(&a, d), &brute_band(&b, d));
            ensure(got == want, || format!("pair {i}: biou(d={d}) {got} vs {want}"))?;
        }
        let square = MaskGrid::from_bools(
            20,
            20,
            (0..400).map(|i| (5..15).contains(&(i % 20)) && (5..15).contains(&(i / 20))),
        );
        let ring = boundary_region(&square, 1).area();
        ensure(ring == 36, || format!("10x10 d=1 band has {ring} px"))?;
        for _ in 0..20 {
            let a = random_mask(&mut rng, 32, 32);
            let b = random_mask(&mut rng, 32, 32);
            let (x, y) = (biou(&a, &b, 32).unwrap(), iou(&a, &b).unwrap());
            ensure(x == y, || format!("wide band biou {x} != iou {y}"))?;
        }
        Ok("100 random pairs exact, 36 px ring, wide-band biou == iou".into())
    });
}

#[test]
fn c09_loss_values() {
    criterion(9, "BCE + Dice closed forms", secs(10), || {
        let n = 64;
        let gt = MaskGrid::from_bools(n, n, (0..n * n).map(|i| (i % n) < n / 2));
        let logits = MaskGrid::logits(n, n, gt.values.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect());
        let sat = bce_dice_loss(&logits, &gt, LossWeights::default()).unwrap().total;
        ensure(sat < 1e-3, || format!("saturated loss {sat:e}"))?;

        let n = 512;
        let gt = MaskGrid::from_bools(n, n, (0..n * n).map(|i| (i / n) % 2 == 0));
        let zero = MaskGrid::logits(n, n, vec![0.0; n * n]);
        let got = bce_dice_loss(&zero, &gt, LossWeights::default()).unwrap().total;
        let a = (n * n) as f64;
        let want = std::f64::consts::LN_2 + 1.0 - (a / 2.0 + 1.0) / (a + 1.0);
        ensure((got - want).abs() < 1e-9, || format!("half-ones loss {got} vs closed form {want}"))?;
        ensure((got - 1.1931).abs() < 1e-3, || format!("half-ones loss {got} not within 1e-3 of 1.1931"))?;
        Ok(format!("saturated {sat:.2e}, half-ones {got:.5}"))
    });
}

#[test]
fn c10_round_trips() {
    criterion(10, "checkpoint, convert and resume round trips", secs(60), || {
        let dir = tempfile::tempdir().unwrap();
        let data = overfit_pair();
        let config = TrainConfig {
            epochs: 4,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let state = build_adapted_model(&ModelConfig::default()).unwrap();

        let mut full = Trainer::new(state.clone(), config.clone()).unwrap();
        let full_history = full.run(&data, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(state, TrainConfig { epochs: 2, ..config.clone() }).unwrap();
        let mut history = first.run(&data, |_, _| Ok(())).unwrap();
        let ck_path = dir.path().join("mid.ckpt");
        save_checkpoint(&first.checkpoint(), &ck_path).unwrap();
        let bytes = fs::read(&ck_path).unwrap();
        let loaded = load_checkpoint(&ck_path).unwrap();
        ensure(checkpoint_to_bytes(&loaded) == bytes, || "save -> load -> save changed bytes".into())?;
        let mut resumed = Trainer::from_checkpoint(loaded, Some(config)).unwrap();
        history.extend(resumed.run(&data, |_, _| Ok(())).unwrap());
        ensure(history == full_history, || "resumed loss history differs from the uninterrupted run".into())?;

        // Tracking boxes -> masks -> loadable dataset.
        let tracking = dir.path().join("tracking");
        fs::create_dir_all(&tracking).unwrap();
        let mut images = Vec::new();
        for (i, d) in data.iter().enumerate() {
            let file = format!("frame{i}.png");
            d.image.save(&tracking.join(&file)).unwrap();
            images.push(serde_json::json!({
                "file": file, "height": 128, "width": 128,
                "objects": d.objects.iter().map(|o| serde_json::json!({"bbox": o.bbox.to_array(), "category": "ship"})).collect::<Vec<_>>(),
            }));
        }
        fs::write(tracking.join("annotations.json"), serde_json::json!({ "images": images }).to_string()).unwrap();
        let ckpt = dir.path().join("init.ckpt");
        write_initial_checkpoint(&RunConfig::default(), &ckpt).unwrap();
        let out = dir.path().join("converted");
        let args = ConvertArgs {
            shared: Shared::default(),
            tracking,
            ckpt,
            out: out.clone(),
            flags: InferFlags {
                head: None,
                rate: None,
                interp: None,
                single: false,
                multi: false,
                window: None,
            },
        };
        cmd_convert(&args).map_err(|e| format!("convert failed: {e}"))?;
        load_dataset(&out).map_err(|e| format!("converted dataset does not load: {e}"))?;
        Ok(format!("byte-identical checkpoint, {} resumed steps match, converted dataset loads", full_history.len()))
    });
}

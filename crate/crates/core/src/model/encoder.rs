//! ViT image encoder: patch embedding, pre-norm transformer blocks with
//! optional low-rank branches on the query and value projections, and a
//! neck projection.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::raster::FloatImage;
use crate::tensor::Mat;

use super::{no_grad, Binder, ModelState};

/// Encoder features on the `grid × grid` token lattice, rows in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Tokens after the first transformer block.
    pub early_features: Mat,
    /// Tokens after the last block and the neck.
    pub final_embedding: Mat,
    pub grid: usize,
}

fn patchify(image: &FloatImage, patch: usize) -> Mat {
    let grid = image.width / patch;
    let cols = patch * patch * 3;
    let mut out = Mat::zeros(grid * grid, cols);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut out.data[(gy * grid + gx) * cols..(gy * grid + gx + 1) * cols];
            for py in 0..patch {
                let src = ((gy * patch + py) * image.width + gx * patch) * 3;
                row[py * patch * 3..(py + 1) * patch * 3]
                    .copy_from_slice(&image.data[src..src + patch * 3]);
            }
        }
    }
    out
}

/// Projection of `x` through `prefix.weight`, plus `Wd·(We·x)` when the
/// layer carries an adapter; the product `Wd·We` is never formed.
fn adapted_linear(b: &Binder, g: &mut Graph, prefix: &str, x: Var) -> Var {
    let w0 = b.get(g, &format!("{prefix}.weight"));
    let mut y = g.matmul_nt(x, w0);
    let we_name = format!("{prefix}.lora.we");
    if b.has(&we_name) {
        let we = b.get(g, &we_name);
        let wd = b.get(g, &format!("{prefix}.lora.wd"));
        let low = g.matmul_nt(x, we);
        let delta = g.matmul_nt(low, wd);
        y = g.add(y, delta);
    }
    let bias = b.get(g, &format!("{prefix}.bias"));
    g.add_row(y, bias)
}

fn block(b: &Binder, g: &mut Graph, idx: usize, x: Var) -> Var {
    let p = format!("encoder.blocks.{idx}");
    let h = b.layer_norm(g, &format!("{p}.norm1"), x);
    let q = adapted_linear(b, g, &format!("{p}.attn.q"), h);
    let k = b.linear(g, &format!("{p}.attn.k"), h);
    let v = adapted_linear(b, g, &format!("{p}.attn.v"), h);
    let a = g.attention(q, k, v, b.config().num_heads);
    let a = b.linear(g, &format!("{p}.attn.proj"), a);
    let x = g.add(x, a);
    let h = b.layer_norm(g, &format!("{p}.norm2"), x);
    let h = b.linear(g, &format!("{p}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = b.linear(g, &format!("{p}.mlp.fc2"), h);
    g.add(x, h)
}

pub(crate) fn check_image(state: &ModelState, image: &FloatImage) -> Result<()> {
    let c = state.config.canvas_size;
    if image.width != c || image.height != c || image.data.len() != c * c * 3 {
        return Err(Error::input(format!(
            "encoder expects a {c}x{c}x3 image, got {}x{}",
            image.width, image.height
        )));
    }
    Ok(())
}

/// Returns `(early_features, final_embedding)` graph nodes.
pub(crate) fn encoder_graph(b: &Binder, g: &mut Graph, image: &FloatImage) -> (Var, Var) {
    let cfg = b.config().clone();
    let patches = g.constant(patchify(image, cfg.patch_size));
    let x = b.linear(g, "encoder.patch_embed", patches);
    let pos = b.get(g, "encoder.pos_embed");
    let mut x = g.add(x, pos);
    let mut early = x;
    for i in 0..cfg.num_blocks {
        x = block(b, g, i, x);
        if i == 0 {
            early = x;
        }
    }
    let neck = b.linear(g, "encoder.neck", x);
    let out = b.layer_norm(g, "encoder.neck_norm", neck);
    (early, out)
}

/// Runs the image encoder on a normalised `canvas × canvas` image.
pub fn encoder_forward(state: &ModelState, image: &FloatImage) -> Result<EncoderOutput> {
    check_image(state, image)?;
    let binder = Binder::new(state, &no_grad);
    let mut g = Graph::inference();
    let (early, fin) = encoder_graph(&binder, &mut g, image);
    Ok(EncoderOutput {
        early_features: g.value(early).clone(),
        final_embedding: g.value(fin).clone(),
        grid: state.config.grid_size(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn image(c: usize, salt: f64) -> FloatImage {
        FloatImage {
            width: c,
            height: c,
            data: (0..c * c * 3).map(|i| ((i as f64) * 0.0137 + salt).sin()).collect(),
        }
    }

    #[test]
    fn patchify_keeps_pixels_in_patch_order() {
        let img = FloatImage {
            width: 4,
            height: 4,
            data: (0..48).map(|v| v as f64).collect(),
        };
        let p = patchify(&img, 2);
        assert_eq!(p.shape(), (4, 12));
        // patch (1, 0): top-right 2×2 block
        assert_eq!(&p.row(1)[..6], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(&p.row(1)[6..], &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn output_geometry_and_purity() {
        let cfg = ModelConfig::default();
        let state = build_model(&cfg).unwrap();
        let img = image(256, 0.3);
        let a = encoder_forward(&state, &img).unwrap();
        assert_eq!(a.early_features.shape(), (16 * 16, 64));
        assert_eq!(a.final_embedding.shape(), (16 * 16, 64));
        let b = encoder_forward(&state, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.final_embedding.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_size_is_an_input_error() {
        let state = build_model(&ModelConfig::default()).unwrap();
        assert!(matches!(
            encoder_forward(&state, &image(128, 0.0)),
            Err(Error::Input(_))
        ));
    }
}

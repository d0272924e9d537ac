//! Box prompt encoder: two corner tokens, each a sinusoidal encoding of the
//! normalised corner plus a learned corner-type embedding.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::mask::BoxPrompt;
use crate::tensor::Mat;

use super::{no_grad, Binder, ModelConfig, ModelState};

/// Encodes a normalised point into `dim` channels laid out as
/// `[sin fx, cos fx, sin fy, cos fy]` per frequency.
///
/// Frequencies grow geometrically from π to π·`grid`, so the finest band
/// resolves single tokens.
pub fn sinusoidal_encoding(x: f64, y: f64, dim: usize, grid: usize) -> Vec<f64> {
    let nf = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for k in 0..nf {
        let exponent = if nf > 1 { k as f64 / (nf - 1) as f64 } else { 0.0 };
        let f = std::f64::consts::PI * (grid as f64).powf(exponent);
        out.extend_from_slice(&[(f * x).sin(), (f * x).cos(), (f * y).sin(), (f * y).cos()]);
    }
    out
}

/// Positional part of the two corner tokens (`2 × embed_dim`).
pub fn box_positional_encoding(bx: &BoxPrompt, config: &ModelConfig) -> Result<Mat> {
    let c = config.canvas_size as f64;
    bx.validate(c, c)?;
    let d = config.embed_dim;
    let mut data = sinusoidal_encoding(bx.x0 / c, bx.y0 / c, d, config.grid_size());
    data.extend(sinusoidal_encoding(bx.x1 / c, bx.y1 / c, d, config.grid_size()));
    Ok(Mat::from_vec(2, d, data))
}

/// Dense encoding of every token centre on the image grid.
pub(crate) fn dense_positional_encoding(config: &ModelConfig) -> Mat {
    let grid = config.grid_size();
    let d = config.embed_dim;
    let mut data = Vec::with_capacity(grid * grid * d);
    for y in 0..grid {
        for x in 0..grid {
            let nx = (x as f64 + 0.5) / grid as f64;
            let ny = (y as f64 + 0.5) / grid as f64;
            data.extend(sinusoidal_encoding(nx, ny, d, grid));
        }
    }
    Mat::from_vec(grid * grid, d, data)
}

pub(crate) fn prompt_graph(b: &Binder, g: &mut Graph, bx: &BoxPrompt) -> Result<Var> {
    let pe = g.constant(box_positional_encoding(bx, b.config())?);
    let corners = b.get(g, "prompt.corner_embed");
    Ok(g.add(pe, corners))
}

/// Prompt tokens (`2 × embed_dim`) for a box in canvas coordinates.
pub fn encode_box_prompt(state: &ModelState, bx: &BoxPrompt) -> Result<Mat> {
    let binder = Binder::new(state, &no_grad);
    let mut g = Graph::inference();
    let v = prompt_graph(&binder, &mut g, bx)?;
    Ok(g.into_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::build_model;

    #[test]
    fn corner_tokens_are_independent() {
        let state = build_model(&ModelConfig::default()).unwrap();
        let a = encode_box_prompt(&state, &BoxPrompt::new(10.0, 20.0, 100.0, 120.0)).unwrap();
        let again = encode_box_prompt(&state, &BoxPrompt::new(10.0, 20.0, 100.0, 120.0)).unwrap();
        assert_eq!(a, again);
        let b = encode_box_prompt(&state, &BoxPrompt::new(10.0, 20.0, 140.0, 121.0)).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn full_canvas_box_hits_normalisation_endpoints() {
        let cfg = ModelConfig::default();
        let pe = box_positional_encoding(&BoxPrompt::new(0.0, 0.0, 256.0, 256.0), &cfg).unwrap();
        assert_eq!(pe.row(0), sinusoidal_encoding(0.0, 0.0, 64, 16).as_slice());
        assert_eq!(pe.row(1), sinusoidal_encoding(1.0, 1.0, 64, 16).as_slice());
        // sin(0) = 0, cos(0) = 1 at the origin
        assert_eq!(&pe.row(0)[..4], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let state = build_model(&ModelConfig::default()).unwrap();
        let err = encode_box_prompt(&state, &BoxPrompt::new(50.0, 0.0, 50.0, 10.0));
        assert!(matches!(err, Err(Error::Input(_))));
    }
}

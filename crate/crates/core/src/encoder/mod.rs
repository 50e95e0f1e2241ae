//! Shape encoder, projection heads and the flat trainable-parameter layout.
//!
//! All trainable parameters of a model live in one `Vec<f64>`: the encoder
//! block first, then the text projection, the image projection and finally
//! `log_tau`. Gradients use the same layout, which keeps optimizers and
//! gradient checks oblivious to the architecture.

mod checkpoint;
mod pointnet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint};
pub use pointnet::{PointNet, PointNetTrace};

use crate::datamodel::Point;
use crate::error::{Error, Result};
use crate::linalg::{normalize_backward, normalized};

/// Temperature at initialization.
pub const INITIAL_TAU: f64 = 0.07;

/// Interface for point-cloud encoders operating on a borrowed parameter block.
pub trait ShapeEncoder {
    /// Intermediate values kept by a forward pass for the backward pass.
    type Trace;

    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, params: &mut [f64]);
    fn forward(&self, params: &[f64], points: &[Point]) -> Result<Vec<f64>>;
    fn forward_traced(&self, params: &[f64], points: &[Point]) -> Result<(Vec<f64>, Self::Trace)>;
    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    fn backward(&self, params: &[f64], trace: &Self::Trace, grad_out: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Widths of the shared per-point layers, before scaling.
    pub point_feature_dims: Vec<usize>,
    /// Widths of the layers after pooling; the last one must equal `embed_dim`
    /// and is never scaled.
    pub head_dims: Vec<usize>,
    pub embed_dim: usize,
    pub scale_multiplier: f64,
    /// 3 for xyz, 6 for xyz + rgb.
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            point_feature_dims: vec![32, 64],
            head_dims: vec![64, 64],
            embed_dim: 64,
            scale_multiplier: 1.0,
            input_channels: 6,
        }
    }
}

impl EncoderConfig {
    /// Layer widths after applying `scale_multiplier`.
    pub fn scaled_dims(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(self.scale_multiplier > 0.0 && self.scale_multiplier.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale_multiplier must be positive, got {}",
                self.scale_multiplier
            )));
        }
        if self.input_channels != 3 && self.input_channels != 6 {
            return Err(Error::InvalidConfig(format!(
                "input_channels must be 3 or 6, got {}",
                self.input_channels
            )));
        }
        if self.point_feature_dims.is_empty() || self.head_dims.is_empty() {
            return Err(Error::InvalidConfig(
                "encoder needs at least one point layer and one head layer".into(),
            ));
        }
        if self.embed_dim == 0 || *self.head_dims.last().unwrap() != self.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "last head width must equal embed_dim {}",
                self.embed_dim
            )));
        }
        let scale = |w: usize| -> Result<usize> {
            let s = (w as f64 * self.scale_multiplier).round();
            if s < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "width {w} scaled by {} is below 1",
                    self.scale_multiplier
                )));
            }
            Ok(s as usize)
        };
        let point = self
            .point_feature_dims
            .iter()
            .map(|&w| scale(w))
            .collect::<Result<Vec<_>>>()?;
        let mut head = self.head_dims[..self.head_dims.len() - 1]
            .iter()
            .map(|&w| scale(w))
            .collect::<Result<Vec<_>>>()?;
        head.push(self.embed_dim);
        Ok((point, head))
    }

    pub fn validate(&self) -> Result<()> {
        self.scaled_dims().map(|_| ())
    }
}

/// A dense affine map stored as an `inputs × outputs` row-major weight block
/// followed by `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Affine {
    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.inputs * self.outputs]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.inputs * self.outputs;
        &params[start..start + self.outputs]
    }

    /// `out = x W + b`.
    pub fn apply(&self, params: &[f64], x: impl Iterator<Item = f64>) -> Vec<f64> {
        let w = self.weights(params);
        let mut out = self.bias(params).to_vec();
        for (i, xi) in x.enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * self.outputs..(i + 1) * self.outputs];
            for (o, wo) in out.iter_mut().zip(row) {
                *o += xi * wo;
            }
        }
        out
    }

    /// Accumulates weight and bias gradients for one input and returns
    /// `d(loss)/d(x)` when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: impl Iterator<Item = f64>,
        grad_out: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let w = self.weights(params);
        let (gw, gb) = grad[self.offset..self.offset + self.num_params()].split_at_mut(self.inputs * self.outputs);
        for (b, g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
        let mut gin = want_input.then(|| vec![0.0; self.inputs]);
        for (i, xi) in x.enumerate() {
            let wrow = &w[i * self.outputs..(i + 1) * self.outputs];
            if let Some(gin) = gin.as_mut() {
                gin[i] = wrow.iter().zip(grad_out).map(|(a, b)| a * b).sum();
            }
            if xi != 0.0 {
                let grow = &mut gw[i * self.outputs..(i + 1) * self.outputs];
                for (gwo, g) in grow.iter_mut().zip(grad_out) {
                    *gwo += xi * g;
                }
            }
        }
        gin
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, params: &mut [f64]) {
        let bound = (6.0 / (self.inputs + self.outputs) as f64).sqrt();
        let n = self.inputs * self.outputs;
        for w in &mut params[self.offset..self.offset + n] {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut params[self.offset + n..self.offset + n + self.outputs] {
            *b = 0.0;
        }
    }
}

/// Where each parameter group sits in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub encoder: PointNet,
    pub text: Affine,
    pub image: Affine,
    pub log_tau: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &EncoderConfig, text_dim: usize, image_dim: usize) -> Result<Self> {
        if text_dim == 0 || image_dim == 0 {
            return Err(Error::InvalidConfig("cache dimensions must be positive".into()));
        }
        let encoder = PointNet::new(config)?;
        let d = config.embed_dim;
        let text = Affine {
            inputs: text_dim,
            outputs: d,
            offset: encoder.num_params(),
        };
        let image = Affine {
            inputs: image_dim,
            outputs: d,
            offset: text.offset + text.num_params(),
        };
        let log_tau = image.offset + image.num_params();
        Ok(Self {
            encoder,
            text,
            image,
            log_tau,
            total: log_tau + 1,
        })
    }
}

/// Exact trainable-parameter count: encoder, both projections and `log_tau`.
pub fn parameter_count(config: &EncoderConfig, text_dim: usize, image_dim: usize) -> Result<usize> {
    Ok(ParamLayout::new(config, text_dim, image_dim)?.total)
}

/// Which frozen modality a raw cache vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Trainable model: shape encoder, text/image projections and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub text_dim: usize,
    pub image_dim: usize,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

/// Forward values of one shape kept for back-propagation.
pub struct ShapeForward {
    pub unit: Vec<f64>,
    pub raw_norm: f64,
    pub trace: PointNetTrace,
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(
        config: &EncoderConfig,
        text_dim: usize,
        image_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = ParamLayout::new(config, text_dim, image_dim)?;
        let mut params = vec![0.0; layout.total];
        layout
            .encoder
            .init_params(rng, &mut params[..layout.encoder.num_params()]);
        layout.text.init(rng, &mut params);
        layout.image.init(rng, &mut params);
        params[layout.log_tau] = INITIAL_TAU.ln();
        Ok(Self {
            config: config.clone(),
            text_dim,
            image_dim,
            layout,
            params,
        })
    }

    /// Rebuilds a state from a parameter vector, checking its length.
    pub fn from_params(config: &EncoderConfig, text_dim: usize, image_dim: usize, params: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(config, text_dim, image_dim)?;
        if params.len() != layout.total {
            return Err(Error::LayoutMismatch(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::LayoutMismatch("non-finite parameter".into()));
        }
        Ok(Self {
            config: config.clone(),
            text_dim,
            image_dim,
            layout,
            params,
        })
    }

    pub fn encoder_params(&self) -> &[f64] {
        &self.params[..self.layout.encoder.num_params()]
    }

    pub fn log_tau(&self) -> f64 {
        self.params[self.layout.log_tau]
    }

    pub fn tau(&self) -> f64 {
        self.log_tau().exp()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Raw (unnormalized) encoder feature of a point cloud.
    pub fn encode(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.layout.encoder.forward(self.encoder_params(), points)
    }

    /// Unit-norm shape embedding.
    pub fn embed_shape(&self, points: &[Point]) -> Result<Vec<f64>> {
        Ok(normalized(&self.encode(points)?, "shape embedding")?.0)
    }

    pub fn shape_forward(&self, points: &[Point]) -> Result<ShapeForward> {
        let (raw, trace) = self.layout.encoder.forward_traced(self.encoder_params(), points)?;
        let (unit, raw_norm) = normalized(&raw, "shape embedding")?;
        Ok(ShapeForward { unit, raw_norm, trace })
    }

    /// Back-propagates `d(loss)/d(unit embedding)` into the encoder block of
    /// `grad`.
    pub fn shape_backward(&self, fwd: &ShapeForward, grad_unit: &[f64], grad: &mut [f64]) {
        let g_raw = normalize_backward(grad_unit, &fwd.unit, fwd.raw_norm);
        let n = self.layout.encoder.num_params();
        self.layout
            .encoder
            .backward(self.encoder_params(), &fwd.trace, &g_raw, &mut grad[..n]);
    }

    fn affine(&self, modality: Modality) -> (&Affine, &'static str) {
        match modality {
            Modality::Text => (&self.layout.text, "text"),
            Modality::Image => (&self.layout.image, "image"),
        }
    }

    /// Projects a raw cache vector and returns `(unit vector, norm)`.
    pub fn project_raw(&self, modality: Modality, raw: &[f32]) -> Result<(Vec<f64>, f64)> {
        let (affine, name) = self.affine(modality);
        if raw.len() != affine.inputs {
            return Err(Error::DimensionMismatch {
                context: format!("{name} vector"),
                expected: affine.inputs,
                found: raw.len(),
            });
        }
        let projected = affine.apply(&self.params, raw.iter().map(|&x| x as f64));
        normalized(&projected, &format!("projected {name} vector"))
    }

    pub fn project_text(&self, raw: &[f32]) -> Result<Vec<f64>> {
        Ok(self.project_raw(Modality::Text, raw)?.0)
    }

    pub fn project_image(&self, raw: &[f32]) -> Result<Vec<f64>> {
        Ok(self.project_raw(Modality::Image, raw)?.0)
    }

    /// Back-propagates `d(loss)/d(unit projection)` into the projection block.
    pub fn projection_backward(
        &self,
        modality: Modality,
        raw: &[f32],
        unit: &[f64],
        norm: f64,
        grad_unit: &[f64],
        grad: &mut [f64],
    ) {
        let (affine, _) = self.affine(modality);
        let g = normalize_backward(grad_unit, unit, norm);
        affine.backward(&self.params, raw.iter().map(|&x| x as f64), &g, grad, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            point_feature_dims: vec![4],
            head_dims: vec![2],
            embed_dim: 2,
            scale_multiplier: 1.0,
            input_channels: 3,
        }
    }

    #[test]
    fn hand_counted_parameters() {
        // (3*4+4) + (4*2+2) + 2*(2*2+2) + 1
        assert_eq!(parameter_count(&tiny(), 2, 2).unwrap(), 39);
    }

    #[test]
    fn doubling_scale_increases_count() {
        let mut c = EncoderConfig::default();
        let base = parameter_count(&c, 8, 8).unwrap();
        c.scale_multiplier = 2.0;
        assert!(parameter_count(&c, 8, 8).unwrap() > base);
    }

    #[test]
    fn sub_unit_width_rejected() {
        let c = EncoderConfig {
            scale_multiplier: 0.1,
            ..tiny()
        };
        assert!(matches!(parameter_count(&c, 2, 2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn last_head_must_match_embed_dim() {
        let c = EncoderConfig {
            head_dims: vec![3],
            ..tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_sets_temperature() {
        let s = ModelState::init(&tiny(), 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((s.tau() - INITIAL_TAU).abs() < 1e-12);
        assert_eq!(s.params.len(), 39);
    }

    fn identity_state(dim: usize) -> ModelState {
        let cfg = EncoderConfig {
            point_feature_dims: vec![4],
            head_dims: vec![dim],
            embed_dim: dim,
            scale_multiplier: 1.0,
            input_channels: 3,
        };
        let mut s = ModelState::init(&cfg, dim, dim, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for affine in [s.layout.text, s.layout.image] {
            for i in 0..dim {
                for o in 0..dim {
                    s.params[affine.offset + i * dim + o] = if i == o { 1.0 } else { 0.0 };
                }
                s.params[affine.offset + dim * dim + i] = 0.0;
            }
        }
        s
    }

    #[test]
    fn identity_projection_of_unit_input() {
        let s = identity_state(3);
        let v = [0.6f32, 0.0, 0.8];
        let out = s.project_text(&v).unwrap();
        for (a, b) in out.iter().zip(v) {
            assert!((a - b as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_projection_normalizes() {
        let s = identity_state(3);
        assert_eq!(s.project_image(&[0.0, 2.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let s = identity_state(3);
        assert!(matches!(
            s.project_text(&[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_projection_is_error() {
        let s = identity_state(2);
        assert!(matches!(s.project_text(&[0.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            point_feature_dims: vec![4],
            head_dims: vec![3],
            embed_dim: 3,
            scale_multiplier: 1.0,
            input_channels: 3,
        };
        let s = ModelState::init(&cfg, 5, 4, &mut rng).unwrap();
        let raw: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (unit, norm) = s.project_raw(Modality::Text, &raw).unwrap();
        for coord in 0..3 {
            let mut g_unit = vec![0.0; 3];
            g_unit[coord] = 1.0;
            let mut grad = vec![0.0; s.params.len()];
            s.projection_backward(Modality::Text, &raw, &unit, norm, &g_unit, &mut grad);
            let t = s.layout.text;
            for k in t.offset..t.offset + t.num_params() {
                let eps = 1e-6;
                let mut p = s.clone();
                p.params[k] += eps;
                let plus = p.project_text(&raw).unwrap()[coord];
                p.params[k] -= 2.0 * eps;
                let minus = p.project_text(&raw).unwrap()[coord];
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
                assert!(
                    rel <= 1e-5 || (fd - grad[k]).abs() < 1e-10,
                    "k={k} fd={fd} an={}",
                    grad[k]
                );
            }
        }
    }
}

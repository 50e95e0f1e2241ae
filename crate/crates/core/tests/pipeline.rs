//! Finite-difference checks of the complete training path: points through the
//! encoder and normalization, raw cache vectors through the projection heads,
//! the four-term loss and log τ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialign_core::alignloss::NegativeMask;
use trialign_core::datamodel::Point;
use trialign_core::encoder::{EncoderConfig, ModelState};
use trialign_core::trainer::{batch_loss, batch_loss_grad, Example};

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        point_feature_dims: vec![5, 4],
        head_dims: vec![4, 3],
        embed_dim: 3,
        scale_multiplier: 1.0,
        input_channels: 6,
    }
}

struct Instance {
    state: ModelState,
    points: Vec<Vec<Point>>,
    texts: Vec<Option<Vec<f32>>>,
    images: Vec<Vec<f32>>,
    mask: NegativeMask,
}

impl Instance {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::init(&tiny_config(), 4, 5, &mut rng).unwrap();
        // Zero-initialized biases put dead ReLU units exactly on their kink;
        // a small perturbation moves every instance to a differentiable point.
        for p in &mut state.params {
            *p += rng.random_range(-0.1..0.1);
        }
        let lt = state.layout.log_tau;
        state.params[lt] = rng.random_range(0.05f64..1.0).ln();
        let n = rng.random_range(2..=4);
        let points = (0..n)
            .map(|_| {
                (0..6)
                    .map(|_| {
                        let mut c = || rng.random_range(-1.0f32..1.0);
                        Point::new([c(), c(), c()], [c().abs(), c().abs(), c().abs()])
                    })
                    .collect()
            })
            .collect();
        let texts = (0..n)
            .map(|i| (i != 0 || seed % 3 != 0).then(|| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        let images = (0..n)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let mut mask = NegativeMask::empty(n);
        if seed % 2 == 1 {
            mask.exclude(0, 1);
        }
        Self {
            state,
            points,
            texts,
            images,
            mask,
        }
    }

    fn examples(&self) -> Vec<Example<'_>> {
        (0..self.images.len())
            .map(|i| Example {
                points: self.points[i].clone(),
                text: self.texts[i].as_deref(),
                image: &self.images[i],
            })
            .collect()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(b)).max(1e-12)
}

#[test]
fn full_pipeline_gradients_match_central_differences() {
    let h = 1e-6;
    for seed in 0..24 {
        let inst = Instance::random(seed);
        let ex = inst.examples();
        let (loss, analytic) = batch_loss_grad(&inst.state, &ex, &inst.mask).unwrap();
        assert!((batch_loss(&inst.state, &ex, &inst.mask).unwrap() - loss).abs() < 1e-12);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = inst.state.clone();
        for k in 0..analytic.len() {
            let base = probe.params[k];
            probe.params[k] = base + h;
            let up = batch_loss(&probe, &ex, &inst.mask).unwrap();
            probe.params[k] = base - h;
            let down = batch_loss(&probe, &ex, &inst.mask).unwrap();
            probe.params[k] = base;
            numeric[k] = (up - down) / (2.0 * h);
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err <= 1e-5, "seed {seed}: relative error {err:e}");
        let lt = inst.state.layout.log_tau;
        assert!((analytic[lt] - numeric[lt]).abs() <= 1e-5 * analytic[lt].abs().max(1e-3));
    }
}

#[test]
fn text_less_rows_get_no_text_projection_gradient_from_themselves() {
    let inst = Instance::random(3);
    assert!(inst.texts[0].is_none());
    let ex = inst.examples();
    let (_, g) = batch_loss_grad(&inst.state, &ex, &inst.mask).unwrap();
    assert!(g.iter().all(|x| x.is_finite()));
}

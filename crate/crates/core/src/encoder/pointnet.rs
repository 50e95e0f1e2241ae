//! Reference PointNet-style encoder: shared per-point layers with ReLU, a
//! channel-wise max pool, then a head whose final layer is linear.

use rand::Rng;

use super::{Affine, EncoderConfig, ShapeEncoder};
use crate::datamodel::Point;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointNet {
    input_channels: usize,
    point_layers: Vec<Affine>,
    head_layers: Vec<Affine>,
    num_params: usize,
}

/// Activations of one forward pass.
pub struct PointNetTrace {
    input: Vec<f64>,
    /// Post-ReLU activations of each per-point layer, `points × width`.
    point_acts: Vec<Vec<f64>>,
    /// Index of the point that won each pooled channel.
    argmax: Vec<usize>,
    /// Inputs to each head layer (the first is the pooled vector).
    head_inputs: Vec<Vec<f64>>,
}

impl PointNet {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        let (point_dims, head_dims) = config.scaled_dims()?;
        let mut offset = 0;
        let mut inputs = config.input_channels;
        let mut build = |dims: &[usize]| {
            dims.iter()
                .map(|&outputs| {
                    let a = Affine {
                        inputs,
                        outputs,
                        offset,
                    };
                    offset += a.num_params();
                    inputs = outputs;
                    a
                })
                .collect::<Vec<_>>()
        };
        let point_layers = build(&point_dims);
        let head_layers = build(&head_dims);
        Ok(Self {
            input_channels: config.input_channels,
            point_layers,
            head_layers,
            num_params: offset,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    fn input_matrix(&self, points: &[Point]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("cannot encode an empty point cloud".into()));
        }
        let c = self.input_channels;
        let mut x = Vec::with_capacity(points.len() * c);
        for p in points {
            x.extend(p.xyz.iter().map(|&v| v as f64));
            if c == 6 {
                x.extend(p.rgb.iter().map(|&v| v as f64));
            }
        }
        Ok(x)
    }

    fn run(&self, params: &[f64], points: &[Point], keep: bool) -> Result<(Vec<f64>, Option<PointNetTrace>)> {
        let input = self.input_matrix(points)?;
        let n = points.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.point_layers.len());
        for (l, layer) in self.point_layers.iter().enumerate() {
            let (prev, width) = match l {
                0 => (&input, self.input_channels),
                _ => (&acts[l - 1], self.point_layers[l - 1].outputs),
            };
            let mut out = Vec::with_capacity(n * layer.outputs);
            for p in 0..n {
                let row = &prev[p * width..(p + 1) * width];
                out.extend(layer.apply(params, row.iter().copied()).into_iter().map(|v| v.max(0.0)));
            }
            acts.push(out);
        }

        let last = acts.last().unwrap();
        let width = self.point_layers.last().unwrap().outputs;
        let mut pooled = last[..width].to_vec();
        let mut argmax = vec![0; width];
        for p in 1..n {
            for (c, v) in last[p * width..(p + 1) * width].iter().enumerate() {
                if *v > pooled[c] {
                    pooled[c] = *v;
                    argmax[c] = p;
                }
            }
        }

        let mut head_inputs = Vec::with_capacity(self.head_layers.len());
        let mut z = pooled;
        let n_head = self.head_layers.len();
        for (k, layer) in self.head_layers.iter().enumerate() {
            let mut out = layer.apply(params, z.iter().copied());
            if k + 1 < n_head {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            head_inputs.push(std::mem::replace(&mut z, out));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let trace = keep.then_some(PointNetTrace {
            input,
            point_acts: acts,
            argmax,
            head_inputs,
        });
        Ok((z, trace))
    }
}

impl ShapeEncoder for PointNet {
    type Trace = PointNetTrace;

    fn output_dim(&self) -> usize {
        self.head_layers.last().unwrap().outputs
    }

    fn num_params(&self) -> usize {
        self.num_params
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, params: &mut [f64]) {
        for layer in self.point_layers.iter().chain(&self.head_layers) {
            layer.init(rng, params);
        }
    }

    fn forward(&self, params: &[f64], points: &[Point]) -> Result<Vec<f64>> {
        self.run(params, points, false).map(|(z, _)| z)
    }

    fn forward_traced(&self, params: &[f64], points: &[Point]) -> Result<(Vec<f64>, PointNetTrace)> {
        self.run(params, points, true).map(|(z, t)| (z, t.unwrap()))
    }

    fn backward(&self, params: &[f64], trace: &PointNetTrace, grad_out: &[f64], grad: &mut [f64]) {
        let mut g = grad_out.to_vec();
        let n_head = self.head_layers.len();
        for k in (0..n_head).rev() {
            let layer = &self.head_layers[k];
            let x = &trace.head_inputs[k];
            g = layer.backward(params, x.iter().copied(), &g, grad, true).unwrap();
            // Head inputs past the pooled vector are post-ReLU outputs.
            if k > 0 {
                for (gi, xi) in g.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
        }

        // Route pooled gradients to the winning point of each channel.
        let last = self.point_layers.len() - 1;
        let width = self.point_layers[last].outputs;
        let mut winners: Vec<(usize, usize)> = trace
            .argmax
            .iter()
            .enumerate()
            .filter(|&(c, _)| g[c] != 0.0)
            .map(|(c, &p)| (p, c))
            .collect();
        winners.sort_unstable();
        let mut i = 0;
        while i < winners.len() {
            let p = winners[i].0;
            let mut gp = vec![0.0; width];
            while i < winners.len() && winners[i].0 == p {
                gp[winners[i].1] = g[winners[i].1];
                i += 1;
            }
            for l in (0..=last).rev() {
                let layer = &self.point_layers[l];
                let act = &trace.point_acts[l][p * layer.outputs..(p + 1) * layer.outputs];
                for (gv, a) in gp.iter_mut().zip(act) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
                let x = match l {
                    0 => &trace.input[p * self.input_channels..(p + 1) * self.input_channels],
                    _ => {
                        let w = self.point_layers[l - 1].outputs;
                        &trace.point_acts[l - 1][p * w..(p + 1) * w]
                    }
                };
                match layer.backward(params, x.iter().copied(), &gp, grad, l > 0) {
                    Some(next) => gp = next,
                    None => break,
                }
            }
        }
    }
}

//! Five-frame sliding-window denoiser.
//!
//! Two levels of identical encoder-decoder blocks: the first-level block
//! (one weight set) runs on frame triplets (1,2,3), (2,3,4) and (3,4,5); the
//! second-level block fuses the three intermediates into an estimate of
//! frame 5, the latest frame. Each block has two stride-2 downsamplings,
//! nearest-neighbour upsampling and skip merges after upsampling.

pub mod tape;
mod train;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::phantom::ImageSeries;
use tape::{ConvRef, Tape, Tensor3, Var};

pub use train::{loss_and_grad as train_loss_and_grad, train_epochs, validation_ssim, TrainHyper, TrainState, CHECKPOINT_MAJOR, CHECKPOINT_MINOR};

pub const WINDOW: usize = 5;
/// Convolutions per block.
pub const CONVS_PER_BLOCK: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMerge {
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Channels at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub skip_merge: SkipMerge,
    /// Add the centre input frame to each block's output.
    pub global_residual: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { widths: [16, 32, 64], skip_merge: SkipMerge::Concat, global_residual: false }
    }
}

impl Architecture {
    /// `(c_in, c_out, stride)` of each convolution of a block.
    pub fn conv_shapes(&self) -> [(usize, usize, usize); CONVS_PER_BLOCK] {
        let [c0, c1, c2] = self.widths;
        let m = match self.skip_merge {
            SkipMerge::Concat => 2,
            SkipMerge::Add => 1,
        };
        [
            (3, c0, 1),
            (c0, c0, 1),
            (c0, c1, 2),
            (c1, c1, 1),
            (c1, c2, 2),
            (c2, c2, 1),
            (c2, c1, 1),
            (m * c1, c1, 1),
            (c1, c0, 1),
            (m * c0, c0, 1),
            (c0, 1, 1),
        ]
    }

    pub fn block_param_count(&self) -> usize {
        self.conv_shapes().iter().map(|(i, o, _)| 9 * i * o + o).sum()
    }

    fn convs(&self, block: usize) -> [ConvRef; CONVS_PER_BLOCK] {
        let shapes = self.conv_shapes();
        std::array::from_fn(|k| {
            let base = (block * CONVS_PER_BLOCK + k) * 2;
            ConvRef { weight: base, bias: base + 1, c_in: shapes[k].0, c_out: shapes[k].1, stride: shapes[k].2 }
        })
    }
}

/// Weights of the two distinct blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: Architecture,
    /// Flat list: for each block, for each convolution, weight then bias.
    pub params: Vec<Vec<f64>>,
}

impl DenoiserModel {
    /// He-normal weights, zero biases.
    pub fn new(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let mut params = Vec::with_capacity(4 * CONVS_PER_BLOCK);
        for _block in 0..2 {
            for (cin, cout, _) in arch.conv_shapes() {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                params.push((0..9 * cin * cout).map(|_| normal.sample(rng)).collect());
                params.push(vec![0.0; cout]);
            }
        }
        Ok(DenoiserModel { arch, params })
    }

    pub fn seeded(arch: Architecture, seed: u64) -> Result<Self> {
        Self::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Parameter slices grouped by block: `[block1, block2]`.
    pub fn weight_sets(&self) -> [&[Vec<f64>]; 2] {
        let half = CONVS_PER_BLOCK * 2;
        [&self.params[..half], &self.params[half..]]
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for b in 1..=2 {
            for k in 1..=CONVS_PER_BLOCK {
                names.push(format!("block{b}.conv{k}.weight"));
                names.push(format!("block{b}.conv{k}.bias"));
            }
        }
        names
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

fn block(tape: &mut Tape, x: Var, convs: &[ConvRef; CONVS_PER_BLOCK], arch: &Architecture) -> Var {
    let merge = |tape: &mut Tape, a: Var, b: Var| match arch.skip_merge {
        SkipMerge::Concat => tape.concat(a, b),
        SkipMerge::Add => tape.add(a, b),
    };
    let conv_relu = |tape: &mut Tape, v: Var, c: ConvRef| {
        let y = tape.conv(v, c);
        tape.relu(y)
    };
    let a = conv_relu(tape, x, convs[0]);
    let skip0 = conv_relu(tape, a, convs[1]);
    let b = conv_relu(tape, skip0, convs[2]);
    let skip1 = conv_relu(tape, b, convs[3]);
    let c = conv_relu(tape, skip1, convs[4]);
    let c = conv_relu(tape, c, convs[5]);
    let up = tape.upsample(c);
    let d = conv_relu(tape, up, convs[6]);
    let d = merge(tape, d, skip1);
    let d = conv_relu(tape, d, convs[7]);
    let up = tape.upsample(d);
    let e = conv_relu(tape, up, convs[8]);
    let e = merge(tape, e, skip0);
    let e = conv_relu(tape, e, convs[9]);
    let out = tape.conv(e, convs[10]);
    if arch.global_residual {
        let centre = tape.channel(x, 1);
        tape.add(out, centre)
    } else {
        out
    }
}

/// Result of recording one forward pass.
pub struct Recorded<'p> {
    pub tape: Tape<'p>,
    pub inputs: [Var; 3],
    pub intermediates: [Var; 3],
    pub output: Var,
}

fn check_window(window: &ArrayView3<f64>) -> Result<()> {
    let (t, h, w) = window.dim();
    if t != WINDOW {
        return Err(Error::BadWindowLength(t));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::IndivisibleDims { h, w });
    }
    Ok(())
}

/// Records the network on a `[5, H, W]` window.
pub fn record<'p>(model: &'p DenoiserModel, window: ArrayView3<f64>) -> Result<Recorded<'p>> {
    check_window(&window)?;
    let (_, h, w) = window.dim();
    let mut tape = Tape::new(&model.params);
    let b1 = model.arch.convs(0);
    let b2 = model.arch.convs(1);
    let inputs: [Var; 3] = std::array::from_fn(|k| {
        let data: Vec<f64> = window.slice(s![k..k + 3, .., ..]).iter().copied().collect();
        tape.leaf(Tensor3::from_vec(3, h, w, data))
    });
    let intermediates: [Var; 3] = std::array::from_fn(|k| block(&mut tape, inputs[k], &b1, &model.arch));
    let ab = tape.concat(intermediates[0], intermediates[1]);
    let abc = tape.concat(ab, intermediates[2]);
    let output = block(&mut tape, abc, &b2, &model.arch);
    Ok(Recorded { tape, inputs, intermediates, output })
}

fn to_image(t: &Tensor3) -> Array2<f64> {
    Array2::from_shape_vec((t.h, t.w), t.data.clone()).expect("single-channel tensor")
}

/// Unclamped network output, used by the training loss.
pub fn forward_raw(model: &DenoiserModel, window: ArrayView3<f64>) -> Result<Array2<f64>> {
    let rec = record(model, window)?;
    Ok(to_image(rec.tape.value(rec.output)))
}

/// Estimate of the latest frame of `window` (`[5, H, W]`), clamped at zero.
pub fn forward(model: &DenoiserModel, window: ArrayView3<f64>) -> Result<Array2<f64>> {
    Ok(forward_raw(model, window)?.mapv(|v| v.max(0.0)))
}

/// The three first-level outputs for a window.
pub fn intermediates(model: &DenoiserModel, window: ArrayView3<f64>) -> Result<[Array2<f64>; 3]> {
    let rec = record(model, window)?;
    Ok(std::array::from_fn(|k| to_image(rec.tape.value(rec.intermediates[k]))))
}

/// Applies the network to every 5-frame window; output frame `k` estimates
/// input frame `k + 4`.
pub fn sliding_window_apply(model: &DenoiserModel, series: &ImageSeries) -> Result<ImageSeries> {
    let (t, h, w) = series.data.dim();
    if t < WINDOW {
        return Err(Error::SeriesTooShort(t));
    }
    let frames = par::try_map_range(t - WINDOW + 1, |k| forward(model, series.data.slice(s![k..k + WINDOW, .., ..])))?;
    let mut data = Array3::zeros((t - WINDOW + 1, h, w));
    for (k, f) in frames.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), k).assign(&f);
    }
    Ok(ImageSeries { data, frame_period_ms: series.frame_period_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch() -> Architecture {
        Architecture { widths: [4, 6, 8], ..Default::default() }
    }

    fn random_window(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((5, h, w), |_| rng.gen())
    }

    #[test]
    fn output_shape_and_errors() {
        let m = DenoiserModel::seeded(small_arch(), 1).unwrap();
        let y = forward(&m, random_window(16, 24, 2).view()).unwrap();
        assert_eq!(y.dim(), (16, 24));
        assert!(y.iter().all(|&v| v >= 0.0));
        assert!(matches!(forward(&m, Array3::zeros((4, 16, 16)).view()), Err(Error::BadWindowLength(4))));
        assert!(matches!(forward(&m, Array3::zeros((5, 18, 16)).view()), Err(Error::IndivisibleDims { .. })));
    }

    #[test]
    fn output_depends_on_latest_frame() {
        let m = DenoiserModel::seeded(small_arch(), 3).unwrap();
        let x = random_window(16, 16, 4);
        let mut x2 = x.clone();
        x2[[4, 8, 8]] += 0.5;
        let a = forward_raw(&m, x.view()).unwrap();
        let b = forward_raw(&m, x2.view()).unwrap();
        assert!((&a - &b).iter().any(|v| v.abs() > 1e-9));
        assert_eq!(a, forward_raw(&m, x.view()).unwrap());
    }

    #[test]
    fn exactly_two_weight_sets() {
        let mut m = DenoiserModel::seeded(small_arch(), 5).unwrap();
        let [b1, b2] = m.weight_sets();
        assert_eq!(b1.iter().map(Vec::len).sum::<usize>() + b2.iter().map(Vec::len).sum::<usize>(), m.param_count());
        assert_eq!(m.param_count(), 2 * m.arch.block_param_count());
        for p in &mut m.params[..CONVS_PER_BLOCK * 2] {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let inter = intermediates(&m, random_window(16, 16, 6).view()).unwrap();
        assert!(inter.iter().all(|i| i.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn parameter_count_matches_analytic_formula() {
        let count = |c0: usize, c1: usize, c2: usize| {
            // conv weights 9·in·out plus biases, concat doubles decoder inputs
            9 * (3 * c0 + c0 * c0 + c0 * c1 + c1 * c1 + c1 * c2 + c2 * c2 + c2 * c1 + 2 * c1 * c1 + c1 * c0 + 2 * c0 * c0 + c0)
                + (c0 + c0 + c1 + c1 + c2 + c2 + c1 + c1 + c0 + c0 + 1)
        };
        for widths in [[16, 32, 64], [8, 16, 32], [4, 6, 8]] {
            let arch = Architecture { widths, ..Default::default() };
            assert_eq!(arch.block_param_count(), count(widths[0], widths[1], widths[2]));
        }
        // Doubling the widths: hidden-to-hidden weights ×4, first/last layer weights ×2.
        let a = Architecture { widths: [8, 16, 32], ..Default::default() };
        let b = Architecture { widths: [16, 32, 64], ..Default::default() };
        for (sa, sb) in a.conv_shapes().iter().zip(b.conv_shapes()) {
            let (wa, wb) = (9 * sa.0 * sa.1, 9 * sb.0 * sb.1);
            let factor = if sa.0 == 3 || sa.1 == 1 { 2 } else { 4 };
            assert_eq!(wb, factor * wa);
        }
    }

    #[test]
    fn translation_consistency_away_from_borders() {
        let m = DenoiserModel::seeded(small_arch(), 7).unwrap();
        let n = 128;
        let shift = 8;
        let x = random_window(n, n, 8);
        let mut xs = x.clone();
        for t in 0..5 {
            for r in 0..n {
                for c in 0..n {
                    xs[[t, (r + shift) % n, (c + shift) % n]] = x[[t, r, c]];
                }
            }
        }
        let a = forward_raw(&m, x.view()).unwrap();
        let b = forward_raw(&m, xs.view()).unwrap();
        let margin = 48;
        for r in margin..n - margin - shift {
            for c in margin..n - margin - shift {
                assert!((a[[r, c]] - b[[r + shift, c + shift]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sliding_window_lengths() {
        let m = DenoiserModel::seeded(small_arch(), 9).unwrap();
        let series = ImageSeries::new(Array3::from_shape_fn((12, 16, 16), |(t, r, c)| ((t * r + c) % 5) as f64 / 5.0), 55.0);
        let out = sliding_window_apply(&m, &series).unwrap();
        assert_eq!(out.n_frames(), 8);
        assert_eq!(out.frame(0), forward(&m, series.data.slice(s![0..5, .., ..])).unwrap());
        let five = ImageSeries::new(series.data.slice(s![0..5, .., ..]).to_owned(), 55.0);
        assert_eq!(sliding_window_apply(&m, &five).unwrap().n_frames(), 1);
        let four = ImageSeries::new(series.data.slice(s![0..4, .., ..]).to_owned(), 55.0);
        assert!(matches!(sliding_window_apply(&m, &four), Err(Error::SeriesTooShort(4))));
    }
}

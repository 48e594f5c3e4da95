//! Image-quality metrics and the transition-robustness curve.
//!
//! SSIM uses a Gaussian window over "valid" positions only (no padding), so
//! every local statistic comes from a full window. The same routine returns
//! the gradient with respect to the first image, which the denoiser's loss
//! uses directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ImageSeries;

fn same_shape(x: &ArrayView2<f64>, r: &ArrayView2<f64>) -> Result<()> {
    if x.dim() != r.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), r.dim())));
    }
    Ok(())
}

/// `‖x − ref‖₂ / ‖ref‖₂`.
pub fn nrmse(x: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    same_shape(&x, &reference)?;
    let den: f64 = reference.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = x.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / den).sqrt())
}

/// `20 log10(peak / RMSE)` with `peak = max(ref)` by default; identical
/// images give `+∞`.
pub fn psnr(x: ArrayView2<f64>, reference: ArrayView2<f64>, peak: Option<f64>) -> Result<f64> {
    same_shape(&x, &reference)?;
    let n = x.len() as f64;
    let mse: f64 = x.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = peak.unwrap_or_else(|| reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Valid-mode separable filtering.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * img[[r, c + i]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * tmp[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Transpose of [`filter_valid`]: spreads a valid-size map back to full size.
fn filter_valid_adjoint(map: &Array2<f64>, taps: &[f64], h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = map.dim();
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..oh {
        for c in 0..ow {
            let v = map[[r, c]];
            for (i, &t) in taps.iter().enumerate() {
                tmp[[r + i, c]] += t * v;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[[r, c]];
            for (i, &t) in taps.iter().enumerate() {
                out[[r, c + i]] += t * v;
            }
        }
    }
    out
}

/// Mean SSIM and, optionally, its gradient with respect to `x`.
pub fn ssim_with_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    params: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    same_shape(&x, &y)?;
    let (h, w) = x.dim();
    if h < params.window || w < params.window {
        return Err(Error::ImageSmallerThanWindow { h, w, window: params.window });
    }
    let taps = params.taps();
    let (c1, c2) = (params.c1(), params.c2());
    let xo = x.to_owned();
    let yo = y.to_owned();
    let mu_x = filter_valid(&xo, &taps);
    let mu_y = filter_valid(&yo, &taps);
    let exx = filter_valid(&(&xo * &xo), &taps);
    let eyy = filter_valid(&(&yo * &yo), &taps);
    let exy = filter_valid(&(&xo * &yo), &taps);
    let m = mu_x.len() as f64;

    let mut total = 0.0;
    let dim = mu_x.dim();
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (Array2::zeros(dim), Array2::zeros(dim), Array2::zeros(dim))
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let (mx, my) = (mu_x[[r, c]], mu_y[[r, c]]);
            let sxx = exx[[r, c]] - mx * mx;
            let syy = eyy[[r, c]] - my * my;
            let sxy = exy[[r, c]] - mx * my;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // Partials with μx, E[x²] and E[xy] treated as independent inputs.
                d_mu[[r, c]] = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2);
                d_exx[[r, c]] = -s / b2;
                d_exy[[r, c]] = 2.0 * a1 / (b1 * b2);
            }
        }
    }
    let value = total / m;
    if !want_grad {
        return Ok((value, None));
    }
    let g_mu = filter_valid_adjoint(&d_mu, &taps, h, w);
    let g_xx = filter_valid_adjoint(&d_exx, &taps, h, w);
    let g_xy = filter_valid_adjoint(&d_exy, &taps, h, w);
    let mut grad = Array2::zeros((h, w));
    Zip::from(&mut grad)
        .and(&g_mu)
        .and(&g_xx)
        .and(&g_xy)
        .and(&xo)
        .and(&yo)
        .for_each(|g, &a, &b, &c, &xv, &yv| *g = (a + 2.0 * xv * b + yv * c) / m);
    Ok((value, Some(grad)))
}

pub fn ssim_params(x: ArrayView2<f64>, reference: ArrayView2<f64>, params: &SsimParams) -> Result<f64> {
    Ok(ssim_with_grad(x, reference, params, false)?.0)
}

/// Mean SSIM with the default 11×11 Gaussian window (σ = 1.5, K1 = 0.01,
/// K2 = 0.03, L = 1).
pub fn ssim(x: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    ssim_params(x, reference, &SsimParams::default())
}

/// `1 − SSIM(pred, target)` and its gradient with respect to `pred`.
pub fn ssim_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, params: &SsimParams) -> Result<(f64, Array2<f64>)> {
    let (v, g) = ssim_with_grad(pred, target, params, true)?;
    Ok((1.0 - v, -g.expect("gradient requested")))
}

/// 5-point Laplacian with half-sample symmetric borders (index −1 maps to 0).
pub fn laplacian(img: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| {
        let rr = if r < 0 { -r - 1 } else if r >= h as isize { 2 * h as isize - r - 1 } else { r };
        let cc = if c < 0 { -c - 1 } else if c >= w as isize { 2 * w as isize - c - 1 } else { c };
        img[[rr as usize, cc as usize]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c)
    })
}

pub fn laplacian_energy(img: ArrayView2<f64>) -> f64 {
    let l = laplacian(img);
    l.iter().map(|v| v * v).sum::<f64>() / l.len() as f64
}

/// Laplacian energy of `x` relative to that of `ref`; 1.0 means as sharp as the reference.
pub fn lape(x: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    same_shape(&x, &reference)?;
    let er = laplacian_energy(reference);
    if er == 0.0 {
        return Err(Error::ZeroReferenceEnergy);
    }
    Ok(laplacian_energy(x) / er)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub series_id: usize,
    /// 1-indexed ground-truth frame number.
    pub frame: usize,
    pub nrmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lape_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_series: usize,
    pub frames: Vec<usize>,
    pub nrmse: Stat,
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub lape_ratio: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<FrameMetrics>,
    pub summary: MetricsSummary,
}

/// Metrics per frame for the 1-indexed ground-truth frames in `frames`.
///
/// `recon` may be shorter than `gt` (sliding-window output); it is aligned to
/// the end of `gt`, so recon frame `i` corresponds to gt frame
/// `i + T_gt − T_recon`.
pub fn evaluate_series(series_id: usize, gt: &ImageSeries, recon: &ImageSeries, frames: &[usize]) -> Result<Vec<FrameMetrics>> {
    let offset = alignment_offset(gt, recon)?;
    frames
        .iter()
        .map(|&f| {
            if f < 1 + offset || f > gt.n_frames() {
                return Err(Error::InvalidDims(format!(
                    "frame {f} is not reconstructed (available {}..={})",
                    offset + 1,
                    gt.n_frames()
                )));
            }
            let g = gt.frame(f - 1);
            let x = recon.frame(f - 1 - offset);
            Ok(FrameMetrics {
                series_id,
                frame: f,
                nrmse: nrmse(x, g)?,
                psnr_db: psnr(x, g, None)?,
                ssim: ssim(x, g)?,
                lape_ratio: lape(x, g)?,
            })
        })
        .collect()
}

fn alignment_offset(gt: &ImageSeries, recon: &ImageSeries) -> Result<usize> {
    if gt.data.shape()[1..] != recon.data.shape()[1..] || recon.n_frames() > gt.n_frames() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} cannot be aligned to ground truth {:?}",
            recon.data.dim(),
            gt.data.dim()
        )));
    }
    Ok(gt.n_frames() - recon.n_frames())
}

impl MetricsReport {
    /// Per-series means over the evaluated frames, then mean ± std across series.
    pub fn from_rows(rows: Vec<FrameMetrics>) -> Self {
        let mut by_series: BTreeMap<usize, Vec<&FrameMetrics>> = BTreeMap::new();
        for r in &rows {
            by_series.entry(r.series_id).or_default().push(r);
        }
        let per = |f: &dyn Fn(&FrameMetrics) -> f64| -> Vec<f64> {
            by_series
                .values()
                .map(|v| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64)
                .collect()
        };
        let mut frames: Vec<usize> = rows.iter().map(|r| r.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        let summary = MetricsSummary {
            n_series: by_series.len(),
            frames,
            nrmse: Stat::of(&per(&|r| r.nrmse)),
            psnr_db: Stat::of(&per(&|r| r.psnr_db)),
            ssim: Stat::of(&per(&|r| r.ssim)),
            lape_ratio: Stat::of(&per(&|r| r.lape_ratio)),
        };
        MetricsReport { rows, summary }
    }

    /// Mean of each metric per series, in series-id order.
    pub fn per_series(&self) -> Vec<(usize, FrameMetrics)> {
        let mut by_series: BTreeMap<usize, Vec<&FrameMetrics>> = BTreeMap::new();
        for r in &self.rows {
            by_series.entry(r.series_id).or_default().push(r);
        }
        by_series
            .into_iter()
            .map(|(id, v)| {
                let n = v.len() as f64;
                let avg = |f: fn(&FrameMetrics) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / n;
                (
                    id,
                    FrameMetrics {
                        series_id: id,
                        frame: 0,
                        nrmse: avg(|r| r.nrmse),
                        psnr_db: avg(|r| r.psnr_db),
                        ssim: avg(|r| r.ssim),
                        lape_ratio: avg(|r| r.lape_ratio),
                    },
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("series_id,frame,nrmse,psnr_db,ssim,lape_ratio\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.series_id, r.frame, r.nrmse, r.psnr_db, r.ssim, r.lape_ratio);
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// 1-indexed frame at which the content switches.
    pub switch_frame: usize,
    /// 1-indexed ground-truth frame numbers of each SSIM value.
    pub frames: Vec<usize>,
    pub ssim: Vec<f64>,
    pub pre_switch_mean: Option<f64>,
    pub first_post_switch: Option<f64>,
    pub post_switch_min: Option<f64>,
    /// Frames after the switch until SSIM is back within 0.02 of the
    /// pre-switch mean; `None` if it never recovers in the sequence.
    pub recovery_frames: Option<usize>,
}

pub const RECOVERY_TOLERANCE: f64 = 0.02;

pub fn transition_curve(gt: &ImageSeries, recon: &ImageSeries, switch_frame: usize) -> Result<TransitionReport> {
    let offset = alignment_offset(gt, recon)?;
    if switch_frame < 1 || switch_frame > gt.n_frames() {
        return Err(Error::InvalidDims(format!("switch frame {switch_frame} outside 1..={}", gt.n_frames())));
    }
    let frames: Vec<usize> = (offset + 1..=gt.n_frames()).collect();
    let ssim: Vec<f64> = frames
        .iter()
        .map(|&f| ssim(recon.frame(f - 1 - offset), gt.frame(f - 1)))
        .collect::<Result<_>>()?;
    let pre: Vec<f64> = frames.iter().zip(&ssim).filter(|(f, _)| **f < switch_frame).map(|(_, s)| *s).collect();
    let post: Vec<(usize, f64)> = frames
        .iter()
        .zip(&ssim)
        .filter(|(f, _)| **f >= switch_frame)
        .map(|(f, s)| (*f, *s))
        .collect();
    let pre_switch_mean = if pre.is_empty() { None } else { Some(mean_std(&pre).0) };
    let recovery_frames = pre_switch_mean.and_then(|m| {
        post.iter()
            .find(|(_, s)| *s >= m - RECOVERY_TOLERANCE)
            .map(|(f, _)| f - switch_frame)
    });
    Ok(TransitionReport {
        switch_frame,
        frames,
        pre_switch_mean,
        first_post_switch: post.first().map(|p| p.1),
        post_switch_min: post.iter().map(|p| p.1).reduce(f64::min),
        recovery_frames,
        ssim,
    })
}

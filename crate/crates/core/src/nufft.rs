//! Kaiser-Bessel gridding NUFFT.
//!
//! Convention: `S(k) = Σ_x I(x) exp(-2πi k·x)` where `x` is the pixel offset
//! from the image centre (`index - N/2`) and `k = (kx, ky)` is in cycles per
//! pixel. `kx` pairs with the column offset, `ky` with the row offset.
//!
//! Forward: divide by the kernel transform, zero-pad onto the oversampled
//! grid, FFT, then interpolate each sample from the `width × width` nearest
//! grid points. The adjoint runs the same steps transposed, so the pair passes
//! the inner-product test up to rounding.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par;
use crate::phantom::{CoilMaps, ImageSeries};
use crate::trajgen::Trajectory;

pub type ComplexImage = Array3<Complex64>;

/// Kernel table entries per grid cell.
const TABLE_RES: usize = 8192;
/// Tolerance on the `[-0.5, 0.5]` coordinate range.
const COORD_TOL: f64 = 1e-9;

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    let mut k = 1.0f64;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

#[derive(Clone, Debug)]
pub struct GridKernel {
    pub width: usize,
    pub oversampling: f64,
    pub beta: f64,
    pub table_len: usize,
    table: Vec<f64>,
}

impl GridKernel {
    pub fn kaiser_bessel(width: usize, oversampling: f64) -> Result<Self> {
        if width < 2 {
            return Err(Error::Config(format!("kernel width {width} must be at least 2")));
        }
        if !(oversampling >= 1.25) {
            return Err(Error::Config(format!("oversampling {oversampling} must be at least 1.25")));
        }
        let w = width as f64;
        let beta = PI * ((w / oversampling).powi(2) * (oversampling - 0.5).powi(2) - 0.8).sqrt();
        let half = w / 2.0;
        let table_len = (half * TABLE_RES as f64).ceil() as usize + 2;
        let table = (0..table_len)
            .map(|i| {
                let u = i as f64 / TABLE_RES as f64;
                Self::exact_value(beta, half, u)
            })
            .collect();
        Ok(GridKernel { width, oversampling, beta, table_len, table })
    }

    fn exact_value(beta: f64, half: f64, u: f64) -> f64 {
        let t = u / half;
        if t.abs() > 1.0 {
            0.0
        } else {
            bessel_i0(beta * (1.0 - t * t).sqrt())
        }
    }

    /// Kernel value at `u` grid cells from the centre.
    pub fn value(&self, u: f64) -> f64 {
        let a = u.abs();
        if a > self.width as f64 / 2.0 {
            return 0.0;
        }
        let pos = a * TABLE_RES as f64;
        let i = pos as usize;
        let f = pos - i as f64;
        self.table[i] * (1.0 - f) + self.table[i + 1] * f
    }

    pub fn exact(&self, u: f64) -> f64 {
        Self::exact_value(self.beta, self.width as f64 / 2.0, u)
    }

    /// Continuous Fourier transform of the kernel at `nu` cycles per grid cell.
    pub fn transform(&self, nu: f64) -> f64 {
        let w = self.width as f64;
        let z = self.beta * self.beta - (PI * w * nu).powi(2);
        if z > 0.0 {
            let s = z.sqrt();
            w * s.sinh() / s
        } else if z < 0.0 {
            let s = (-z).sqrt();
            w * s.sin() / s
        } else {
            w
        }
    }
}

impl Default for GridKernel {
    fn default() -> Self {
        GridKernel::kaiser_bessel(4, 2.0).expect("default kernel parameters are valid")
    }
}

/// Precomputed interpolation footprint of a coordinate list.
#[derive(Clone, Debug)]
pub struct Footprint {
    width: usize,
    n: usize,
    row0: Vec<i64>,
    col0: Vec<i64>,
    wy: Vec<f64>,
    wx: Vec<f64>,
}

impl Footprint {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// NUFFT operator for a fixed image size.
#[derive(Clone)]
pub struct Nufft {
    pub h: usize,
    pub w: usize,
    gh: usize,
    gw: usize,
    kernel: GridKernel,
    deapod: Array2<f64>,
    fft_h: Arc<dyn Fft<f64>>,
    ifft_h: Arc<dyn Fft<f64>>,
    fft_w: Arc<dyn Fft<f64>>,
    ifft_w: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Nufft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nufft")
            .field("h", &self.h)
            .field("w", &self.w)
            .field("grid", &(self.gh, self.gw))
            .field("kernel", &(self.kernel.width, self.kernel.oversampling))
            .finish()
    }
}

fn grid_size(n: usize, oversampling: f64) -> usize {
    let g = (n as f64 * oversampling).ceil() as usize;
    g + g % 2
}

impl Nufft {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Self::with_kernel(h, w, GridKernel::default())
    }

    pub fn with_kernel(h: usize, w: usize, kernel: GridKernel) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidDims(format!("image size {h}x{w}")));
        }
        let gh = grid_size(h, kernel.oversampling).max(kernel.width);
        let gw = grid_size(w, kernel.oversampling).max(kernel.width);
        let rows: Vec<f64> = (0..h)
            .map(|r| kernel.transform((r as f64 - (h / 2) as f64) / gh as f64))
            .collect();
        let cols: Vec<f64> = (0..w)
            .map(|c| kernel.transform((c as f64 - (w / 2) as f64) / gw as f64))
            .collect();
        let deapod = Array2::from_shape_fn((h, w), |(r, c)| 1.0 / (rows[r] * cols[c]));
        let mut planner = FftPlanner::new();
        Ok(Nufft {
            h,
            w,
            gh,
            gw,
            deapod,
            fft_h: planner.plan_fft_forward(gh),
            ifft_h: planner.plan_fft_inverse(gh),
            fft_w: planner.plan_fft_forward(gw),
            ifft_w: planner.plan_fft_inverse(gw),
            kernel,
        })
    }

    pub fn kernel(&self) -> &GridKernel {
        &self.kernel
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.gh, self.gw)
    }

    pub fn footprint(&self, coords: &[[f64; 2]]) -> Result<Footprint> {
        let wd = self.kernel.width;
        let half = wd as f64 / 2.0;
        let mut fp = Footprint {
            width: wd,
            n: coords.len(),
            row0: Vec::with_capacity(coords.len()),
            col0: Vec::with_capacity(coords.len()),
            wy: Vec::with_capacity(coords.len() * wd),
            wx: Vec::with_capacity(coords.len() * wd),
        };
        for (index, &[kx, ky]) in coords.iter().enumerate() {
            if !(kx.abs() <= 0.5 + COORD_TOL && ky.abs() <= 0.5 + COORD_TOL) {
                return Err(Error::CoordOutOfRange { index, kx, ky });
            }
            let ux = kx * self.gw as f64;
            let uy = ky * self.gh as f64;
            let c0 = (ux - half).floor() as i64 + 1;
            let r0 = (uy - half).floor() as i64 + 1;
            fp.col0.push(c0);
            fp.row0.push(r0);
            for i in 0..wd {
                fp.wx.push(self.kernel.value(ux - (c0 + i as i64) as f64));
                fp.wy.push(self.kernel.value(uy - (r0 + i as i64) as f64));
            }
        }
        Ok(fp)
    }

    fn check_image(&self, image: &Array2<Complex64>) -> Result<()> {
        if image.dim() != (self.h, self.w) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} does not match operator {}x{}",
                image.dim(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    fn fft2(&self, grid: &mut [Complex64], inverse: bool) {
        let (gh, gw) = (self.gh, self.gw);
        let (row_fft, col_fft) = if inverse { (&self.ifft_w, &self.ifft_h) } else { (&self.fft_w, &self.fft_h) };
        row_fft.process(grid);
        let mut t = vec![Complex64::default(); gh * gw];
        for r in 0..gh {
            for c in 0..gw {
                t[c * gh + r] = grid[r * gw + c];
            }
        }
        col_fft.process(&mut t);
        for c in 0..gw {
            for r in 0..gh {
                grid[r * gw + c] = t[c * gh + r];
            }
        }
    }

    /// Samples one complex image at the footprint's coordinates.
    pub fn forward_with(&self, image: &Array2<Complex64>, fp: &Footprint) -> Result<Vec<Complex64>> {
        self.check_image(image)?;
        let (gh, gw) = (self.gh, self.gw);
        let mut grid = vec![Complex64::default(); gh * gw];
        let (ch, cw) = ((self.h / 2) as i64, (self.w / 2) as i64);
        for ((r, c), &v) in image.indexed_iter() {
            let gr = (r as i64 - ch).rem_euclid(gh as i64) as usize;
            let gc = (c as i64 - cw).rem_euclid(gw as i64) as usize;
            grid[gr * gw + gc] = v * self.deapod[[r, c]];
        }
        self.fft2(&mut grid, false);
        let wd = fp.width;
        let mut out = Vec::with_capacity(fp.n);
        for j in 0..fp.n {
            let wy = &fp.wy[j * wd..(j + 1) * wd];
            let wx = &fp.wx[j * wd..(j + 1) * wd];
            let mut acc = Complex64::default();
            for (a, &ky) in wy.iter().enumerate() {
                let gr = (fp.row0[j] + a as i64).rem_euclid(gh as i64) as usize;
                let row = &grid[gr * gw..(gr + 1) * gw];
                let mut racc = Complex64::default();
                for (b, &kx) in wx.iter().enumerate() {
                    let gc = (fp.col0[j] + b as i64).rem_euclid(gw as i64) as usize;
                    racc += row[gc] * kx;
                }
                acc += racc * ky;
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Transposed operator, with optional per-sample weights applied first.
    pub fn adjoint_with(&self, samples: &[Complex64], fp: &Footprint, weights: Option<&[f64]>) -> Result<Array2<Complex64>> {
        if samples.len() != fp.n {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for {} coordinates",
                samples.len(),
                fp.n
            )));
        }
        if let Some(w) = weights {
            if w.len() != fp.n {
                return Err(Error::ShapeMismatch(format!("{} weights for {} coordinates", w.len(), fp.n)));
            }
        }
        let (gh, gw) = (self.gh, self.gw);
        let mut grid = vec![Complex64::default(); gh * gw];
        let wd = fp.width;
        for j in 0..fp.n {
            let s = match weights {
                Some(w) => samples[j] * w[j],
                None => samples[j],
            };
            let wy = &fp.wy[j * wd..(j + 1) * wd];
            let wx = &fp.wx[j * wd..(j + 1) * wd];
            for (a, &ky) in wy.iter().enumerate() {
                let gr = (fp.row0[j] + a as i64).rem_euclid(gh as i64) as usize;
                let sy = s * ky;
                let row = &mut grid[gr * gw..(gr + 1) * gw];
                for (b, &kx) in wx.iter().enumerate() {
                    let gc = (fp.col0[j] + b as i64).rem_euclid(gw as i64) as usize;
                    row[gc] += sy * kx;
                }
            }
        }
        self.fft2(&mut grid, true);
        let (ch, cw) = ((self.h / 2) as i64, (self.w / 2) as i64);
        Ok(Array2::from_shape_fn((self.h, self.w), |(r, c)| {
            let gr = (r as i64 - ch).rem_euclid(gh as i64) as usize;
            let gc = (c as i64 - cw).rem_euclid(gw as i64) as usize;
            grid[gr * gw + gc] * self.deapod[[r, c]]
        }))
    }

    pub fn forward(&self, image: &Array2<Complex64>, coords: &[[f64; 2]]) -> Result<Vec<Complex64>> {
        let fp = self.footprint(coords)?;
        self.forward_with(image, &fp)
    }

    pub fn adjoint(&self, samples: &[Complex64], coords: &[[f64; 2]], weights: Option<&[f64]>) -> Result<Array2<Complex64>> {
        let fp = self.footprint(coords)?;
        self.adjoint_with(samples, &fp, weights)
    }

    /// Per-coil forward transform; returns `[n_coils, n_samples]`.
    pub fn forward_coils(&self, images: &ComplexImage, fp: &Footprint) -> Result<Array2<Complex64>> {
        let n_coils = images.shape()[0];
        let rows = par::try_map_range(n_coils, |c| self.forward_with(&images.index_axis(Axis(0), c).to_owned(), fp))?;
        let mut out = Array2::zeros((n_coils, fp.n));
        for (c, row) in rows.into_iter().enumerate() {
            out.row_mut(c).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }

    /// Per-coil adjoint; `samples` is `[n_coils, n_samples]`.
    pub fn adjoint_coils(&self, samples: &Array2<Complex64>, fp: &Footprint, weights: Option<&[f64]>) -> Result<ComplexImage> {
        let n_coils = samples.shape()[0];
        let imgs = par::try_map_range(n_coils, |c| {
            let row: Vec<Complex64> = samples.row(c).iter().copied().collect();
            self.adjoint_with(&row, fp, weights)
        })?;
        let mut out = Array3::zeros((n_coils, self.h, self.w));
        for (c, img) in imgs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), c).assign(&img);
        }
        Ok(out)
    }
}

/// Brute-force evaluation of `S(k)` for test oracles and small problems.
pub fn direct_dft(image: &Array2<Complex64>, coords: &[[f64; 2]]) -> Vec<Complex64> {
    let (h, w) = image.dim();
    coords
        .iter()
        .map(|&[kx, ky]| {
            let mut acc = Complex64::default();
            for ((r, c), &v) in image.indexed_iter() {
                let y = r as f64 - (h / 2) as f64;
                let x = c as f64 - (w / 2) as f64;
                acc += v * Complex64::from_polar(1.0, -2.0 * PI * (kx * x + ky * y));
            }
            acc
        })
        .collect()
}

/// Root-sum-of-squares over the coil axis.
pub fn rss_combine(images: &ComplexImage) -> Array2<f64> {
    images.map_axis(Axis(0), |v| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOptions {
    /// Standard deviation of complex k-space noise (`E|n|² = σ²`).
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Apply the trajectory's density weights before gridding.
    pub density_compensation: bool,
    pub kernel_width: usize,
    pub oversampling: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            noise_sigma: 0.0,
            noise_seed: 0,
            density_compensation: true,
            kernel_width: 4,
            oversampling: 2.0,
        }
    }
}

/// Gridding reconstruction of one frame from per-coil images.
///
/// Everything needed per frame is captured here so the streaming pipeline and
/// the offline path share the exact same arithmetic.
#[derive(Clone, Debug)]
pub struct FrameGridder {
    op: Nufft,
    maps: ComplexImage,
    footprints: Vec<Footprint>,
    scaled_weights: Vec<f64>,
    pub options: GridOptions,
}

impl FrameGridder {
    pub fn new(coil_maps: &CoilMaps, traj: &Trajectory, options: GridOptions) -> Result<Self> {
        let (_, h, w) = coil_maps.data.dim();
        let kernel = GridKernel::kaiser_bessel(options.kernel_width, options.oversampling)?;
        let op = Nufft::with_kernel(h, w, kernel)?;
        let footprints = (0..traj.n_frames())
            .map(|f| op.footprint(&traj.frame_coords(f)))
            .collect::<Result<Vec<_>>>()?;
        // Each sample stands for its share of the sampled disk (area π/4).
        let raw = traj.flat_weights();
        let scaled_weights = if options.density_compensation {
            let total: f64 = raw.iter().sum();
            raw.iter().map(|w| w * (PI / 4.0) / total).collect()
        } else {
            vec![(PI / 4.0) / raw.len() as f64; raw.len()]
        };
        Ok(FrameGridder { op, maps: coil_maps.normalized_rss(), footprints, scaled_weights, options })
    }

    pub fn n_traj_frames(&self) -> usize {
        self.footprints.len()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.op.h, self.op.w)
    }

    /// Samples `image` with the coil maps on trajectory frame `traj_frame`.
    pub fn acquire(&self, image: &Array2<f64>, traj_frame: usize, noise_stream: u64) -> Result<Array2<Complex64>> {
        if image.dim() != self.image_shape() {
            return Err(Error::ShapeMismatch(format!("frame {:?} vs coil maps {:?}", image.dim(), self.image_shape())));
        }
        let fp = &self.footprints[traj_frame % self.footprints.len()];
        let coil_images = Array3::from_shape_fn(self.maps.dim(), |(c, r, x)| self.maps[[c, r, x]] * image[[r, x]]);
        let mut k = self.op.forward_coils(&coil_images, fp)?;
        if self.options.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.options.noise_seed);
            rng.set_stream(noise_stream);
            let normal = Normal::new(0.0, self.options.noise_sigma / 2f64.sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            for z in k.iter_mut() {
                *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
        Ok(k)
    }

    /// Density-compensated adjoint, RSS combination and clipping at zero.
    pub fn reconstruct(&self, samples: &Array2<Complex64>, traj_frame: usize) -> Result<Array2<f64>> {
        let fp = &self.footprints[traj_frame % self.footprints.len()];
        let coil_images = self.op.adjoint_coils(samples, fp, Some(&self.scaled_weights))?;
        Ok(rss_combine(&coil_images).mapv(|v| v.max(0.0)))
    }

    pub fn grid_frame(&self, image: &Array2<f64>, frame: usize) -> Result<Array2<f64>> {
        let k = self.acquire(image, frame, frame as u64)?;
        self.reconstruct(&k, frame)
    }
}

/// Simulates undersampled acquisition and gridding of a whole series.
///
/// Coil maps are rescaled to unit root-sum-of-squares so the gridded series
/// keeps the ground truth's global [0, 1] scaling. Values are clipped at 0
/// but not above, so ringing can push a few pixels past 1.
pub fn grid_series(gt: &ImageSeries, coil_maps: &CoilMaps, traj: &Trajectory, options: GridOptions) -> Result<ImageSeries> {
    let (t, h, w) = gt.data.dim();
    if traj.n_frames() != t {
        return Err(Error::ShapeMismatch(format!(
            "trajectory has {} frames but the series has {t}",
            traj.n_frames()
        )));
    }
    if coil_maps.data.shape()[1..] != [h, w] {
        return Err(Error::ShapeMismatch("coil maps and series differ in size".into()));
    }
    let gridder = FrameGridder::new(coil_maps, traj, options)?;
    let frames = par::try_map_range(t, |f| gridder.grid_frame(&gt.data.index_axis(Axis(0), f).to_owned(), f))?;
    let mut data = Array3::zeros((t, h, w));
    for (f, img) in frames.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), f).assign(&img);
    }
    Ok(ImageSeries { data, frame_period_ms: gt.frame_period_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((h, w), |_| Complex64::new(n.sample(&mut rng), n.sample(&mut rng)))
    }

    fn random_coords(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5)]).collect()
    }

    fn max_rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let scale = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn bessel_matches_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-11);
    }

    #[test]
    fn default_beta() {
        let k = GridKernel::default();
        assert!((k.beta - PI * (4.0f64 * 2.25 - 0.8).sqrt()).abs() < 1e-12);
        assert!((k.value(0.37) - k.exact(0.37)).abs() / k.exact(0.0) < 1e-7);
        assert_eq!(k.value(2.1), 0.0);
    }

    #[test]
    fn kernel_transform_matches_quadrature() {
        let k = GridKernel::default();
        for nu in [0.0, 0.1, 0.25, 0.4] {
            let n = 20_000;
            let h = 4.0 / n as f64;
            let q: f64 = (0..n)
                .map(|i| {
                    let u = -2.0 + (i as f64 + 0.5) * h;
                    k.exact(u) * (2.0 * PI * nu * u).cos() * h
                })
                .sum();
            assert!((q - k.transform(nu)).abs() / k.transform(0.0) < 1e-6, "nu {nu}");
        }
    }

    #[test]
    fn impulse_at_centre_has_flat_spectrum() {
        let op = Nufft::new(16, 16).unwrap();
        let mut img = Array2::zeros((16, 16));
        img[[8, 8]] = Complex64::new(1.0, 0.0);
        let s = op.forward(&img, &random_coords(50, 3)).unwrap();
        assert!(s.iter().all(|z| (z.norm() - 1.0).abs() < 1e-3));
    }

    #[test]
    fn forward_matches_direct_dft() {
        for (n, seed) in [(32usize, 1u64), (16, 2)] {
            let op = Nufft::new(n, n).unwrap();
            let img = random_image(n, n, seed);
            let coords = random_coords(200, seed + 10);
            let err = max_rel_err(&op.forward(&img, &coords).unwrap(), &direct_dft(&img, &coords));
            assert!(err < 1e-3, "n {n}: {err}");
        }
    }

    #[test]
    fn forward_is_linear() {
        let op = Nufft::new(16, 16).unwrap();
        let (x, y) = (random_image(16, 16, 5), random_image(16, 16, 6));
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(-2.0, 0.5));
        let coords = random_coords(64, 7);
        let lhs = op.forward(&(x.mapv(|v| v * a) + y.mapv(|v| v * b)), &coords).unwrap();
        let fx = op.forward(&x, &coords).unwrap();
        let fy = op.forward(&y, &coords).unwrap();
        for i in 0..coords.len() {
            assert!((lhs[i] - (fx[i] * a + fy[i] * b)).norm() < 1e-12 * (1.0 + lhs[i].norm()));
        }
    }

    fn adjoint_gap(op: &Nufft, seed: u64) -> f64 {
        let x = random_image(op.h, op.w, seed);
        let coords = random_coords(300, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let y: Vec<Complex64> = (0..coords.len()).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        let ax = op.forward(&x, &coords).unwrap();
        let aty = op.adjoint(&y, &coords, None).unwrap();
        let lhs: Complex64 = ax.iter().zip(&y).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b.conj()).sum();
        let nax = ax.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let ny = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        (lhs - rhs).norm() / (nax * ny)
    }

    #[test]
    fn adjoint_passes_inner_product_test_for_all_kernels() {
        for width in [3, 4, 5] {
            for os in [1.5, 2.0] {
                let op = Nufft::with_kernel(16, 16, GridKernel::kaiser_bessel(width, os).unwrap()).unwrap();
                let gap = adjoint_gap(&op, width as u64 * 10);
                assert!(gap < 1e-6, "width {width} os {os}: {gap}");
            }
        }
    }

    #[test]
    fn cartesian_coordinates_reduce_to_the_dft() {
        let n = 16;
        let op = Nufft::with_kernel(n, n, GridKernel::kaiser_bessel(8, 2.0).unwrap()).unwrap();
        let img = random_image(n, n, 9);
        let coords: Vec<[f64; 2]> = (0..n * n)
            .map(|i| [((i % n) as f64 - 8.0) / n as f64, ((i / n) as f64 - 8.0) / n as f64])
            .collect();
        let err = max_rel_err(&op.forward(&img, &coords).unwrap(), &direct_dft(&img, &coords));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_samples_give_zero_image() {
        let op = Nufft::new(16, 16).unwrap();
        let coords = random_coords(40, 1);
        let img = op.adjoint(&vec![Complex64::default(); 40], &coords, None).unwrap();
        assert!(img.iter().all(|z| *z == Complex64::default()));
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        let op = Nufft::new(16, 16).unwrap();
        let err = op.forward(&Array2::zeros((16, 16)), &[[0.0, 0.0], [0.6, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::CoordOutOfRange { index: 1, .. }));
        assert!(matches!(op.forward(&Array2::zeros((8, 16)), &[[0.0, 0.0]]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rss_examples() {
        let mut imgs = Array3::zeros((2, 4, 4));
        imgs.index_axis_mut(Axis(0), 0).fill(Complex64::new(3.0, 0.0));
        imgs.index_axis_mut(Axis(0), 1).fill(Complex64::new(0.0, 4.0));
        assert!(rss_combine(&imgs).iter().all(|&v| (v - 5.0).abs() < 1e-15));
        let one = imgs.slice(ndarray::s![1..2, .., ..]).to_owned();
        assert!(rss_combine(&one).iter().all(|&v| (v - 4.0).abs() < 1e-15));
        let rotated = imgs.mapv(|z| z * Complex64::from_polar(1.0, 0.7));
        let (a, b) = (rss_combine(&imgs), rss_combine(&rotated));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

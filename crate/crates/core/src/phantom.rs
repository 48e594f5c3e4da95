//! Synthetic dynamic phantoms, coil sensitivities, dataset splits and
//! scan-plane transition sequences.
//!
//! Frame numbers in public signatures that mention "switch" are 1-indexed;
//! storage is 0-indexed.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nufft::{grid_series, GridOptions};
use crate::par;
use crate::tensorfile::Tensor;
use crate::trajgen::Trajectory;

/// Real-valued dynamic image stack `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSeries {
    pub data: Array3<f64>,
    /// Metadata only.
    pub frame_period_ms: f64,
}

impl ImageSeries {
    pub fn new(data: Array3<f64>, frame_period_ms: f64) -> Self {
        ImageSeries { data, frame_period_ms }
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Tensor::from_f64(&self.data).save(path)
    }

    pub fn load(path: &Path, frame_period_ms: f64) -> Result<Self> {
        let data = Tensor::load(path)?
            .to_f64()?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Format(format!("image series must be 3-D: {e}")))?;
        Ok(ImageSeries { data, frame_period_ms })
    }
}

/// Complex coil sensitivities `[n_coils, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    pub data: Array3<Complex64>,
}

impl CoilMaps {
    pub fn rss(&self) -> Array2<f64> {
        self.data
            .map_axis(Axis(0), |v| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
    }

    /// Maps divided pointwise by their root-sum-of-squares.
    pub fn normalized_rss(&self) -> Array3<Complex64> {
        let rss = self.rss();
        let mut out = self.data.clone();
        for mut coil in out.outer_iter_mut() {
            coil.zip_mut_with(&rss, |z, &r| *z /= r);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Number of static structures around the heart (2 to 4).
    pub n_ellipses: usize,
    /// Peak change of the ventricle radius as a fraction of the image height.
    pub motion_amplitude: f64,
    pub period_frames: usize,
    /// Amplitude of the smooth background texture.
    pub background_texture: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            n_ellipses: 3,
            motion_amplitude: 0.04,
            period_frames: 16,
            background_texture: 0.08,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    /// Soft inside-indicator with an edge about one pixel wide.
    fn mask(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let dist = (rho - 1.0) * self.a.min(self.b);
        0.5 * (1.0 - (dist / 0.6).tanh())
    }

    fn scaled(&self, grow: f64) -> Ellipse {
        Ellipse { a: (self.a + grow).max(0.5), b: (self.b + grow).max(0.5), ..*self }
    }

    fn paint(&self, img: &mut Array2<f64>) {
        let (h, w) = img.dim();
        let reach = self.a.max(self.b) + 3.0;
        let r0 = ((self.cy - reach).floor().max(0.0)) as usize;
        let r1 = ((self.cy + reach).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        let c0 = ((self.cx - reach).floor().max(0.0)) as usize;
        let c1 = ((self.cx + reach).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let m = self.mask(c as f64, r as f64);
                let p = &mut img[[r, c]];
                *p = *p * (1.0 - m) + self.value * m;
            }
        }
    }
}

/// Smooth random field: Gaussian values on a coarse lattice, bilinearly upsampled.
fn lowpass_field(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Array2<f64> {
    let coarse = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.gen::<f64>() * 2.0 - 1.0);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let y = r as f64 / (h.max(2) - 1) as f64 * cells as f64;
        let x = c as f64 / (w.max(2) - 1) as f64 * cells as f64;
        let (i, j) = ((y.floor() as usize).min(cells - 1), (x.floor() as usize).min(cells - 1));
        let (fy, fx) = (y - i as f64, x - j as f64);
        coarse[[i, j]] * (1.0 - fy) * (1.0 - fx)
            + coarse[[i + 1, j]] * fy * (1.0 - fx)
            + coarse[[i, j + 1]] * (1.0 - fy) * fx
            + coarse[[i + 1, j + 1]] * fy * fx
    })
}

/// Cardiac-like cine: a contracting ventricle inside an anti-phase myocardial
/// ring, a few static structures, and a textured body outline. The series is
/// scaled so that its maximum is exactly 1.
pub fn generate_cine(spec: &PhantomSpec, t: usize, h: usize, w: usize) -> Result<ImageSeries> {
    if t < 5 {
        return Err(Error::InvalidDims(format!("a cine needs at least 5 frames, got {t}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidDims(format!("image {h}x{w} is too small")));
    }
    if spec.period_frames == 0 {
        return Err(Error::InvalidDims("period_frames must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hf, wf) = (h as f64, w as f64);
    let size = hf.min(wf);
    let body = Ellipse {
        cx: wf / 2.0 + rng.gen_range(-0.03..0.03) * wf,
        cy: hf / 2.0 + rng.gen_range(-0.03..0.03) * hf,
        a: wf * rng.gen_range(0.40..0.46),
        b: hf * rng.gen_range(0.32..0.40),
        angle: rng.gen_range(-0.15..0.15),
        value: rng.gen_range(0.15..0.25),
    };
    let texture = lowpass_field(&mut rng, h, w, 6);
    let heart = Ellipse {
        cx: wf / 2.0 + rng.gen_range(-0.08..0.08) * wf,
        cy: hf / 2.0 + rng.gen_range(-0.06..0.06) * hf,
        a: size * rng.gen_range(0.11..0.16),
        b: size * rng.gen_range(0.08..0.12),
        angle: rng.gen_range(0.0..PI),
        value: rng.gen_range(0.85..1.0),
    };
    let wall = size * rng.gen_range(0.04..0.06);
    let myo_value = rng.gen_range(0.35..0.5);
    let n_static = spec.n_ellipses.clamp(2, 4);
    let statics: Vec<Ellipse> = (0..n_static)
        .map(|_| {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let dist = rng.gen_range(0.22..0.32) * size;
            Ellipse {
                cx: body.cx + dist * ang.cos(),
                cy: body.cy + dist * ang.sin() * 0.8,
                a: size * rng.gen_range(0.03..0.08),
                b: size * rng.gen_range(0.03..0.07),
                angle: rng.gen_range(0.0..PI),
                value: rng.gen_range(0.3..0.8),
            }
        })
        .collect();
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let amp = spec.motion_amplitude * hf;

    let mut static_img = Array2::zeros((h, w));
    body.paint(&mut static_img);
    static_img.zip_mut_with(&texture, |p, &tx| {
        *p = (*p * (1.0 + spec.background_texture * tx / body.value.max(1e-3))).max(0.0)
    });
    for e in &statics {
        e.paint(&mut static_img);
    }

    let mut data = Array3::zeros((t, h, w));
    for f in 0..t {
        let phase = 2.0 * PI * (f % spec.period_frames) as f64 / spec.period_frames as f64 + phase0;
        let swing = amp * phase.sin();
        let mut img = static_img.clone();
        // The wall thickens while the cavity shrinks.
        let cavity = heart.scaled(swing);
        let myo = Ellipse { value: myo_value, ..heart.scaled(swing + wall - 0.5 * swing) };
        myo.paint(&mut img);
        cavity.paint(&mut img);
        data.index_axis_mut(Axis(0), f).assign(&img);
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    data.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    Ok(ImageSeries { data, frame_period_ms: 55.0 })
}

/// Smooth coil sensitivities with lobes centred on the image border and a
/// linear phase per coil. Magnitudes are scaled so the root-sum-of-squares
/// spans `[1/√q, √q]` where `q` is its max/min ratio.
pub fn coil_maps(n_coils: usize, h: usize, w: usize, seed: u64) -> Result<CoilMaps> {
    if n_coils == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDims(format!("{n_coils} coils of {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let offset = rng.gen_range(0.0..2.0 * PI);
    let mut data = Array3::zeros((n_coils, h, w));
    for c in 0..n_coils {
        let fy = rng.gen_range(-0.5..0.5);
        let fx = rng.gen_range(-0.5..0.5);
        let phi0 = rng.gen_range(0.0..2.0 * PI);
        let ang = offset + 2.0 * PI * c as f64 / n_coils as f64;
        let (py, px) = (hf / 2.0 + 0.5 * hf * ang.sin(), wf / 2.0 + 0.5 * wf * ang.cos());
        let sigma = 0.6 * hf.max(wf);
        for r in 0..h {
            for x in 0..w {
                let mag = if n_coils == 1 {
                    1.0
                } else {
                    let d2 = (r as f64 - py).powi(2) + (x as f64 - px).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                };
                let phase = phi0 + 2.0 * PI * (fy * r as f64 / hf + fx * x as f64 / wf);
                data[[c, r, x]] = Complex64::from_polar(mag, phase);
            }
        }
    }
    let maps = CoilMaps { data };
    let rss = maps.rss();
    let (lo, hi) = rss.iter().fold((f64::INFINITY, 0.0f64), |(l, u), &v| (l.min(v), u.max(v)));
    let scale = 1.0 / (lo * hi).sqrt();
    Ok(CoilMaps { data: maps.data.mapv(|z| z * scale) })
}

/// Frames before `switch_frame` (1-indexed) come from `a`, the rest from `b`.
pub fn transition_sequence(a: &ImageSeries, b: &ImageSeries, switch_frame: usize) -> Result<ImageSeries> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.data.dim(), b.data.dim())));
    }
    let t = a.n_frames();
    if switch_frame < 1 || switch_frame > t {
        return Err(Error::InvalidDims(format!("switch frame {switch_frame} outside 1..={t}")));
    }
    let mut data = a.data.clone();
    data.slice_mut(s![switch_frame - 1.., .., ..])
        .assign(&b.data.slice(s![switch_frame - 1.., .., ..]));
    Ok(ImageSeries { data, frame_period_ms: a.frame_period_ms })
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for series `index` of a dataset seeded with `seed`.
pub fn series_seed(seed: u64, index: usize) -> u64 {
    mix64(seed ^ mix64(index as u64 + 1))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Orders series indices by a salted hash and cuts consecutive blocks of
/// `round(f * n)` indices. The search subset and the final split share the
/// order, so the search's train/val series come from the final training block
/// when `search.train + search.val <= final.train`.
pub fn split_indices(n_series: usize, fractions: [f64; 3], salt: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to at most 1")));
    }
    let mut order: Vec<usize> = (0..n_series).collect();
    order.sort_by_key(|&i| (mix64(salt ^ mix64(i as u64)), i));
    let counts: Vec<usize> = fractions.iter().map(|f| (f * n_series as f64).round() as usize).collect();
    if counts.iter().sum::<usize>() > n_series {
        return Err(Error::Config("rounded split sizes exceed the series count".into()));
    }
    let names = ["train", "val", "test"];
    for k in 0..3 {
        if fractions[k] > 0.0 && counts[k] == 0 {
            return Err(Error::EmptySplit(names[k]));
        }
    }
    let mut it = order.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<usize> = it.by_ref().take(n).collect();
        v.sort_unstable();
        v
    };
    Ok(Split { train: take(counts[0]), val: take(counts[1]), test: take(counts[2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_series: usize,
    pub n_frames: usize,
    pub matrix: usize,
    pub n_coils: usize,
    pub seed: u64,
    /// Base phantom; seed, period and motion are varied per series.
    pub phantom: PhantomSpec,
    pub noise_sigma: f64,
    pub final_split: [f64; 3],
    pub search_split: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_series: 300,
            n_frames: 16,
            matrix: 96,
            n_coils: 8,
            seed: 0,
            phantom: PhantomSpec::default(),
            noise_sigma: 0.0,
            final_split: [0.75, 0.10, 0.15],
            search_split: [0.30, 0.10, 0.0],
        }
    }
}

impl DatasetSpec {
    pub fn phantom_for(&self, index: usize) -> PhantomSpec {
        let seed = series_seed(self.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = self.phantom.period_frames.max(4);
        PhantomSpec {
            seed,
            n_ellipses: rng.gen_range(2..=4),
            motion_amplitude: self.phantom.motion_amplitude * rng.gen_range(0.7..1.3),
            period_frames: rng.gen_range(base * 3 / 4..=base * 5 / 4),
            background_texture: self.phantom.background_texture,
        }
    }

    pub fn ground_truth(&self, index: usize) -> Result<ImageSeries> {
        generate_cine(&self.phantom_for(index), self.n_frames, self.matrix, self.matrix)
    }

    pub fn coil_maps_for(&self, index: usize) -> Result<CoilMaps> {
        coil_maps(self.n_coils, self.matrix, self.matrix, mix64(series_seed(self.seed, index)))
    }

    pub fn grid_options(&self, index: usize) -> GridOptions {
        GridOptions {
            noise_sigma: self.noise_sigma,
            noise_seed: series_seed(self.seed ^ 0x6e6f_6973_65, index),
            ..GridOptions::default()
        }
    }

    pub fn final_split(&self) -> Result<Split> {
        split_indices(self.n_series, self.final_split, self.seed)
    }

    pub fn search_split(&self) -> Result<Split> {
        split_indices(self.n_series, self.search_split, self.seed)
    }
}

/// One ground-truth series and its gridded counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPair {
    pub id: usize,
    pub gt: ImageSeries,
    pub gridded: ImageSeries,
}

pub fn build_pairs(spec: &DatasetSpec, indices: &[usize], traj: &Trajectory) -> Result<Vec<SeriesPair>> {
    par::try_map_range(indices.len(), |k| {
        let id = indices[k];
        let gt = spec.ground_truth(id)?;
        let maps = spec.coil_maps_for(id)?;
        let gridded = grid_series(&gt, &maps, traj, spec.grid_options(id))?;
        Ok(SeriesPair { id, gt, gridded })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SeriesPair>,
    pub val: Vec<SeriesPair>,
    pub test: Vec<SeriesPair>,
}

/// Paired series for every split index, gridded with `traj`.
pub fn build_dataset(spec: &DatasetSpec, split: &Split, traj: &Trajectory) -> Result<Dataset> {
    Ok(Dataset {
        train: build_pairs(spec, &split.train, traj)?,
        val: build_pairs(spec, &split.val, traj)?,
        test: build_pairs(spec, &split.test, traj)?,
    })
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub split: Split,
    pub trajectory: String,
    pub frame_period_ms: f64,
}

fn pair_files(id: usize) -> (String, String) {
    (format!("series_{id:05}_gt.tnsr"), format!("series_{id:05}_gridded.tnsr"))
}

impl Dataset {
    pub fn save(&self, dir: &Path, spec: &DatasetSpec, split: &Split, trajectory: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let period = self.train.first().or(self.test.first()).map_or(55.0, |p| p.gt.frame_period_ms);
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            let (g, x) = pair_files(p.id);
            p.gt.save(&dir.join(g))?;
            p.gridded.save(&dir.join(x))?;
        }
        let manifest = DatasetManifest {
            format_version: DATASET_VERSION,
            spec: spec.clone(),
            split: split.clone(),
            trajectory: trajectory.to_string(),
            frame_period_ms: period,
        };
        let mut w = BufWriter::new(File::create(dir.join("dataset.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("dataset.json"))?))?;
        if manifest.format_version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", manifest.format_version)));
        }
        let load = |ids: &[usize]| -> Result<Vec<SeriesPair>> {
            ids.iter()
                .map(|&id| {
                    let (g, x) = pair_files(id);
                    Ok(SeriesPair {
                        id,
                        gt: ImageSeries::load(&dir.join(g), manifest.frame_period_ms)?,
                        gridded: ImageSeries::load(&dir.join(x), manifest.frame_period_ms)?,
                    })
                })
                .collect()
        };
        let ds = Dataset {
            train: load(&manifest.split.train)?,
            val: load(&manifest.split.val)?,
            test: load(&manifest.split.test)?,
        };
        Ok((ds, manifest))
    }
}

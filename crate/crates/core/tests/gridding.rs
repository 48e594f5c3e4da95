use ndarray::Array3;
use spiralforge::metrics::{nrmse, ssim};
use spiralforge::nufft::{grid_series, GridOptions};
use spiralforge::phantom::{coil_maps, generate_cine, ImageSeries, PhantomSpec};
use spiralforge::trajgen::{
    assemble_trajectory, radial_spokes_for_matrix, radial_trajectory, uniform_spiral, uniform_spiral_with,
    GradientSystem, InterleaveOrdering, SpiralConfig,
};

fn smooth_series(n: usize, t: usize) -> ImageSeries {
    let c = n as f64 / 2.0;
    let data = Array3::from_shape_fn((t, n, n), |(f, r, x)| {
        let dy = r as f64 - c - f as f64 * 0.5;
        let dx = x as f64 - c + 3.0;
        (-(dx * dx + dy * dy) / (2.0 * (n as f64 / 6.0).powi(2))).exp()
    });
    ImageSeries::new(data, 55.0)
}

#[test]
fn dense_spiral_reconstructs_smooth_image() {
    let sys = GradientSystem::desk(64);
    let traj = uniform_spiral_with(&sys, 12.0, 3.6, 55.0, InterleaveOrdering::Linear, 2).unwrap();
    let gt = smooth_series(64, 2);
    let maps = coil_maps(4, 64, 64, 3).unwrap();
    let out = grid_series(&gt, &maps, &traj, GridOptions::default()).unwrap();
    for f in 0..2 {
        let e = nrmse(out.frame(f), gt.frame(f)).unwrap();
        assert!(e < 0.05, "frame {f}: {e}");
    }
    let again = grid_series(&gt, &maps, &traj, GridOptions::default()).unwrap();
    assert_eq!(out, again);
}

#[test]
fn noise_is_seeded() {
    let sys = GradientSystem::desk(32);
    let traj = assemble_trajectory(&SpiralConfig::optimized(), &sys, 5).unwrap();
    let gt = generate_cine(&PhantomSpec::default(), 5, 32, 32).unwrap();
    let maps = coil_maps(2, 32, 32, 3).unwrap();
    let opts = GridOptions { noise_sigma: 0.05, noise_seed: 9, ..Default::default() };
    let a = grid_series(&gt, &maps, &traj, opts).unwrap();
    let b = grid_series(&gt, &maps, &traj, opts).unwrap();
    let c = grid_series(&gt, &maps, &traj, GridOptions { noise_seed: 10, ..opts }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn optimized_inputs_beat_uniform_inputs() {
    let matrix = 64;
    let sys = GradientSystem::desk(matrix);
    let t = 6;
    let opt = assemble_trajectory(&SpiralConfig::optimized(), &sys, t).unwrap();
    let cfg = SpiralConfig::optimized();
    let uni = uniform_spiral(&sys, cfg.tr_ms, cfg.t_acq_ms, InterleaveOrdering::Linear, t).unwrap();
    let rad = radial_trajectory(&sys, radial_spokes_for_matrix(17, matrix), t).unwrap();
    let (mut so, mut su, mut sr) = (0.0, 0.0, 0.0);
    let n = 6;
    for s in 0..n {
        let gt = generate_cine(&PhantomSpec { seed: s, ..Default::default() }, t, matrix, matrix).unwrap();
        let maps = coil_maps(4, matrix, matrix, s).unwrap();
        let score = |tr| {
            let g = grid_series(&gt, &maps, tr, GridOptions::default()).unwrap();
            (0..t).map(|f| ssim(g.frame(f), gt.frame(f)).unwrap()).sum::<f64>() / t as f64
        };
        so += score(&opt);
        su += score(&uni);
        sr += score(&rad);
    }
    println!("gridded SSIM optimized {:.4} uniform {:.4} radial {:.4}", so / n as f64, su / n as f64, sr / n as f64);
    println!("samples/frame optimized {} uniform {} radial {}", opt.samples_per_frame(), uni.samples_per_frame(), rad.samples_per_frame());
    assert!(so > su);
}

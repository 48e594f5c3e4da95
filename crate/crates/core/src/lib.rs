//! Variable-density spiral sampling design, non-uniform FFT gridding and
//! sliding-window artifact suppression for low-latency dynamic MRI.
//!
//! The crate is organised around the reconstruction chain used to score a
//! sampling pattern:
//!
//! * [`trajgen`] builds variable-density spiral, uniform spiral and
//!   tiny-golden-angle radial trajectories.
//! * [`nufft`] samples multi-coil images on those trajectories and grids the
//!   samples back with density compensation and root-sum-of-squares combination.
//! * [`phantom`] synthesises dynamic cardiac-like series, coil maps and splits.
//! * [`denoiser`] is a five-frame sliding-window network trained with an SSIM loss.
//! * [`hyperband`] searches spiral parameters jointly with denoiser training.
//! * [`stream`] runs gridding and denoising as overlapped pipeline stages.
//! * [`metrics`] holds NRMSE, PSNR, SSIM and Laplacian energy.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod hyperband;
pub mod metrics;
pub mod nufft;
pub mod par;
pub mod phantom;
pub mod stream;
pub mod tensorfile;
pub mod trajgen;

pub use error::{Error, Result};

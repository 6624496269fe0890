//! Attack and reconstruction metrics.

mod classify;
mod hist;
mod recon;
mod roc;

pub use classify::{accuracy, macro_f1, MacroF1};
pub use hist::{loss_histogram, PairedHistogram};
pub use recon::{
    gaussian_taps, mse, psnr_from_mse, reconstruction_metrics, ssim, Images, PerceptualMetric,
    ReconMetrics, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use roc::{roc, tpr_at_fpr, RocCurve};

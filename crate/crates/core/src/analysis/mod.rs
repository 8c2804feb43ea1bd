//! Downstream verification: tensor fitting, scalar maps and image metrics.

mod dti;
mod metrics;

pub use dti::{fa_md, fit_dti, DtiFit, EIGEN_FLOOR, SIGNAL_FLOOR};
pub use metrics::{
    map_metrics, ms_ssim, psnr, psnr_from_rmse, rmse, MapMetrics, MetricReport, MS_SSIM_MIN_SIZE,
    PSNR_CAP,
};

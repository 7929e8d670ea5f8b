//! Signal metrics, a token-level error rate and spectrogram plots.

mod estoi;
mod font;
mod metrics;
mod plot;
mod report;

pub use estoi::{estoi, MIN_DURATION_S};
pub use metrics::{edit_distance, lsd, si_sdr, token_error_rate, SI_SDR_CAP_DB};
pub use plot::{plot_spectrograms, PlotConfig};
pub use report::{FileMetrics, MetricReport, RESERVED_METRICS};

use serde::{Deserialize, Serialize};

use crate::config::Mode;

/// Wall-clock seconds of the four stages of a learning task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mode: Mode,
    pub download_images_s: f64,
    pub build_dataset_s: f64,
    pub train_model_s: f64,
    /// `None` when the model is trained where it is used.
    pub transfer_model_s: Option<f64>,
    /// Measured end to end, from the first download to the model arriving.
    pub total_s: f64,
}

impl TimingReport {
    pub fn stage_sum(&self) -> f64 {
        self.download_images_s + self.build_dataset_s + self.train_model_s + self.transfer_model_s.unwrap_or(0.0)
    }

    pub fn table(&self) -> String {
        let transfer = self.transfer_model_s.map_or("N/A".to_string(), |t| format!("{t:.3}"));
        format!(
            "{:<16} {:>10}\n{:<16} {:>10.3}\n{:<16} {:>10.3}\n{:<16} {:>10.3}\n{:<16} {:>10}\n{:<16} {:>10.3}\n",
            "stage",
            self.mode.name(),
            "download images",
            self.download_images_s,
            "build dataset",
            self.build_dataset_s,
            "train model",
            self.train_model_s,
            "transfer model",
            transfer,
            "total",
            self.total_s
        )
    }
}

use std::fmt::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// Per-sample and mean scores of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub config_digest: String,
    pub checkpoint_hash: String,
    /// Sorted by sample id.
    pub samples: Vec<SampleScore>,
}

impl MetricReport {
    pub fn new(label: &str, config_digest: &str, checkpoint_hash: &str, mut samples: Vec<SampleScore>) -> Self {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Self {
            label: label.to_string(),
            config_digest: config_digest.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            samples,
        }
    }

    fn mean(&self, f: impl Fn(&SampleScore) -> f64) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|s| s.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|s| s.ssim)
    }

    pub fn mean_mse(&self) -> f64 {
        self.mean(|s| s.mse)
    }

    /// Tab-separated rows under a `#` header block; the last row holds the means.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# experiment: {}", self.label).unwrap();
        writeln!(s, "# config_digest: {}", self.config_digest).unwrap();
        writeln!(s, "# checkpoint_hash: {}", self.checkpoint_hash).unwrap();
        writeln!(s, "sample_id\tpsnr_db\tssim\tmse").unwrap();
        for r in &self.samples {
            writeln!(s, "{}\t{:.4}\t{:.6}\t{:.8}", r.sample_id, r.psnr, r.ssim, r.mse).unwrap();
        }
        writeln!(s, "mean\t{:.4}\t{:.6}\t{:.8}", self.mean_psnr(), self.mean_ssim(), self.mean_mse()).unwrap();
        s
    }
}

//! Posterior cell summaries. Missing cells get the same treatment as
//! observed ones — their mean-parameter draws exist because the likelihood
//! simply skipped them, so summarizing the draws is the interpolation.

use std::io::Write;
use std::path::Path;

use crate::hmc::PosteriorDraws;

use super::{DirectEstimateTable, ModelError};

/// Posterior summary for one region/response cell, on the sampling scale
/// and exponentiated back to the original scale per draw.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CellSummary {
    pub region_id: String,
    pub response: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub mean_orig: f64,
    pub sd_orig: f64,
    pub q025_orig: f64,
    pub q975_orig: f64,
    /// True when the cell had no direct estimate and the summary is
    /// model-based interpolation.
    pub interpolated: bool,
}

#[derive(Debug, Clone)]
pub struct ThetaSummary {
    pub cells: Vec<CellSummary>,
}

/// Linear-interpolation quantile of a sorted sample (R type 7).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

struct Stats {
    mean: f64,
    sd: f64,
    q025: f64,
    q975: f64,
}

fn stats(mut values: Vec<f64>) -> Stats {
    let (mean, sd) = mean_sd(&values);
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    Stats {
        mean,
        sd,
        q025: quantile_sorted(&values, 0.025),
        q975: quantile_sorted(&values, 0.975),
    }
}

/// Summarize the mean-parameter block of the kept draws, one row per cell,
/// in region-major order (all responses of the first region, then the next).
///
/// `data` must be the table the model was fit to (aligned to the same
/// graph), providing region ids, response names, and the observed mask.
pub fn summarize_theta(
    draws: &PosteriorDraws,
    data: &DirectEstimateTable,
) -> Result<ThetaSummary, ModelError> {
    let range = draws
        .block_range("theta")
        .ok_or_else(|| ModelError::ShapeMismatch("draws carry no theta block".into()))?;
    let n = data.n_regions();
    let k = data.n_responses();
    if range.len() != n * k {
        return Err(ModelError::ShapeMismatch(format!(
            "theta block holds {} coordinates but the table has {} cells",
            range.len(),
            n * k
        )));
    }
    let mut cells = Vec::with_capacity(n * k);
    for i in 0..n {
        for c in 0..k {
            let coord = range.start + i * k + c;
            let pooled = draws.pooled(coord);
            let values = pooled.to_vec();
            let log_stats = stats(values.clone());
            let orig_stats = stats(values.into_iter().map(f64::exp).collect());
            cells.push(CellSummary {
                region_id: data.region_ids[i].clone(),
                response: data.response_names[c].clone(),
                mean: log_stats.mean,
                sd: log_stats.sd,
                q025: log_stats.q025,
                q975: log_stats.q975,
                mean_orig: orig_stats.mean,
                sd_orig: orig_stats.sd,
                q025_orig: orig_stats.q025,
                q975_orig: orig_stats.q975,
                interpolated: !data.observed[[i, c]],
            });
        }
    }
    Ok(ThetaSummary { cells })
}

impl ThetaSummary {
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "region_id",
            "response",
            "mean",
            "sd",
            "q025",
            "q975",
            "mean_orig",
            "sd_orig",
            "q025_orig",
            "q975_orig",
            "interpolated",
        ])
        .map_err(|e| ModelError::Csv(e.to_string()))?;
        for cell in &self.cells {
            w.write_record([
                cell.region_id.as_str(),
                cell.response.as_str(),
                &format!("{}", cell.mean),
                &format!("{}", cell.sd),
                &format!("{}", cell.q025),
                &format!("{}", cell.q975),
                &format!("{}", cell.mean_orig),
                &format!("{}", cell.sd_orig),
                &format!("{}", cell.q025_orig),
                &format!("{}", cell.q975_orig),
                if cell.interpolated { "true" } else { "false" },
            ])
            .map_err(|e| ModelError::Csv(e.to_string()))?;
        }
        w.flush().map_err(ModelError::Io)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        self.to_csv(file)
    }

    pub fn cell(&self, region_id: &str, response: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.region_id == region_id && c.response == response)
    }
}

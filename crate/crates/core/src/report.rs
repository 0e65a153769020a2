//! Training reports and their CSV form.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{ResourceCounters, ResourceModel};
use crate::selection::{AnchorMask, Strategy};

pub const CSV_HEADER: &str = "run_id,strategy,beta,iter,psnr_db,ssim,loss_total,anchor_term,source_term,weight_t,rendered_rays_cum,field_queries_cum,step_ms";

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub strategy: Strategy,
    pub beta: f64,
    /// Completed training iterations.
    pub iter: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub loss_total: f64,
    pub anchor_term: f64,
    pub source_term: f64,
    pub weight_t: f64,
    pub rendered_rays_cum: u64,
    pub field_queries_cum: u64,
    /// Mean wall time per step since the previous row; 0 in deterministic mode.
    pub step_ms: f64,
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.9e},{:.9e},{:.9e},{:.9},{},{},{:.4}",
            self.run_id,
            self.strategy,
            self.beta,
            self.iter,
            self.psnr_db,
            self.ssim,
            self.loss_total,
            self.anchor_term,
            self.source_term,
            self.weight_t,
            self.rendered_rays_cum,
            self.field_queries_cum,
            self.step_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::Format(format!(
                "expected 13 CSV fields, got {}: {line}",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in column {}", f[i], i + 1)))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Format(format!("bad integer {:?} in column {}", f[i], i + 1)))
        };
        Ok(Self {
            run_id: f[0].to_string(),
            strategy: f[1].parse()?,
            beta: num(2)?,
            iter: int(3)? as usize,
            psnr_db: num(4)?,
            ssim: num(5)?,
            loss_total: num(6)?,
            anchor_term: num(7)?,
            source_term: num(8)?,
            weight_t: num(9)?,
            rendered_rays_cum: int(10)?,
            field_queries_cum: int(11)?,
            step_ms: num(12)?,
        })
    }
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    s
}

/// Parses a report CSV; blank lines and repeated headers are skipped so that
/// concatenated reports load as one table.
pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && l.trim() != CSV_HEADER)
        .map(MetricRow::parse_csv_line)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_id: String,
    /// `key=value` lines describing the run.
    pub config_snapshot: String,
    pub rows: Vec<MetricRow>,
    pub counters: ResourceCounters,
    pub resource: ResourceModel,
    /// Encoded final parameters and optimizer state.
    pub checkpoint: Vec<u8>,
    /// Set once the checkpoint has been written to disk.
    pub checkpoint_path: Option<PathBuf>,
    /// Final full-resolution renders (the fitted image, or held-out views).
    pub renders: Vec<ImageBuffer>,
    pub anchor: AnchorMask,
}

impl TrainReport {
    pub fn final_row(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn final_psnr(&self) -> f64 {
        self.final_row().map_or(f64::NAN, |r| r.psnr_db)
    }

    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows)
    }
}

//! CSV tables.

use std::path::Path;

use cud_core::analysis::{EdgeFrequencyRow, MrdRecord};
use cud_core::circuits::EdgeScores;
use cud_core::cud::{CudRecord, SimilarityMetric};
use cud_core::unlearn::EpochLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::write_bytes;
use crate::error::{AppError, AppResult};

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_bytes(path, &bytes)
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => AppError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AppError::Format {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreRow {
    pub edge_name: String,
    pub score: f64,
}

pub fn edge_score_rows(scores: &EdgeScores) -> Vec<EdgeScoreRow> {
    let g = scores.graph.graph();
    scores
        .scores
        .iter()
        .enumerate()
        .map(|(e, &score)| EdgeScoreRow {
            edge_name: g.edge_name(e),
            score,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CudRow {
    pub id: usize,
    pub s_e: f64,
    pub s_h: f64,
    pub cud: f64,
    pub metric: SimilarityMetric,
    pub degenerate_flag: bool,
    pub anchor_hash: String,
    pub error: String,
}

impl From<&CudRecord> for CudRow {
    fn from(r: &CudRecord) -> Self {
        CudRow {
            id: r.id,
            s_e: r.s_e,
            s_h: r.s_h,
            cud: r.cud,
            metric: r.metric,
            degenerate_flag: r.degenerate,
            anchor_hash: format!("{:016x}", r.anchor_hash),
            error: r.error.clone().unwrap_or_default(),
        }
    }
}

impl CudRow {
    pub fn to_record(&self) -> CudRecord {
        CudRecord {
            id: self.id,
            s_e: self.s_e,
            s_h: self.s_h,
            cud: self.cud,
            metric: self.metric,
            degenerate: self.degenerate_flag,
            anchor_hash: u64::from_str_radix(&self.anchor_hash, 16).unwrap_or(0),
            error: (!self.error.is_empty()).then(|| self.error.clone()),
        }
    }
}

pub fn write_cud(path: &Path, records: &[CudRecord]) -> AppResult<()> {
    write_rows(path, &records.iter().map(CudRow::from).collect::<Vec<_>>())
}

pub fn read_cud(path: &Path) -> AppResult<Vec<CudRecord>> {
    Ok(read_rows::<CudRow>(path)?.iter().map(CudRow::to_record).collect())
}

pub fn write_curve(path: &Path, logs: &[EpochLog]) -> AppResult<()> {
    write_rows(path, logs)
}

pub fn write_frequency(path: &Path, rows: &[EdgeFrequencyRow]) -> AppResult<()> {
    write_rows(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub rank: usize,
    pub count_easy: usize,
    pub count_hard: usize,
}

pub fn histogram_rows(sorted_easy: &[usize], sorted_hard: &[usize]) -> Vec<HistogramRow> {
    (0..sorted_easy.len().max(sorted_hard.len()))
        .map(|i| HistogramRow {
            rank: i + 1,
            count_easy: sorted_easy.get(i).copied().unwrap_or(0),
            count_hard: sorted_hard.get(i).copied().unwrap_or(0),
        })
        .collect()
}

/// MRD-proxy row; named so it is not mistaken for the original measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdRow {
    pub id: usize,
    pub mrd_proxy: f64,
    pub mrd_proxy_difficulty: f64,
    pub sigma: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl From<&MrdRecord> for MrdRow {
    fn from(r: &MrdRecord) -> Self {
        MrdRow {
            id: r.id,
            mrd_proxy: r.mrd,
            mrd_proxy_difficulty: r.difficulty,
            sigma: r.sigma,
            n_draws: r.n_draws,
            seed: r.seed,
        }
    }
}

/// One unlearning run of the validation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRun {
    pub method: String,
    pub set: String,
    pub seed: u64,
    pub efficacy: f64,
    pub retain: f64,
    pub general: f64,
    /// Mean JSD to the retrain oracle after unlearning.
    pub jsd: Option<f64>,
    /// The same divergence before unlearning.
    pub jsd_prior: Option<f64>,
    pub diverged: bool,
}

/// Seed-averaged validation row, one per method and set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub method: String,
    pub set: String,
    pub n_seeds: usize,
    pub efficacy: f64,
    pub retain: f64,
    pub general: f64,
    pub jsd: Option<f64>,
}

//! Evaluation and congruence diagnostics, plus the CSV/JSON artifacts a run
//! leaves behind.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{self, Knowledge};
use crate::linalg::Matrix;
use crate::refine::{refine, RefinementConfig};

/// Fraction of rows whose label is among the k largest logits; ties broken
/// toward the lowest index.
pub fn top_k_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            expected: logits.rows(),
            got: labels.len(),
        });
    }
    if k == 0 || k > logits.cols() {
        return Err(Error::DimensionMismatch {
            expected: logits.cols(),
            got: k,
        });
    }
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::InvalidLabel {
                label,
                classes: logits.cols(),
            });
        }
        let row = logits.row(r);
        let target = row[label];
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > target || (v == target && j < label) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Max pairwise discrepancy across clients under both measures, on refined
/// knowledge and (for contrast) on plain softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscrepancyStats {
    pub refined_peak_max: f64,
    pub refined_entropy_max: f64,
    pub softmax_peak_max: f64,
    pub softmax_entropy_max: f64,
}

/// Per-client (min, max) of a scalar row statistic.
#[derive(Debug, Clone, Copy)]
pub struct MeasureRange {
    pub min: f64,
    pub max: f64,
}

impl MeasureRange {
    pub fn over(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut range: Option<MeasureRange> = None;
        for v in values {
            range = Some(match range {
                None => MeasureRange { min: v, max: v },
                Some(r) => MeasureRange {
                    min: r.min.min(v),
                    max: r.max.max(v),
                },
            });
        }
        range
    }
}

/// Max over client pairs (k != l) of the largest cross-client gap between
/// row statistics, given each client's (min, max) summary.
pub fn max_pairwise_gap(ranges: &[MeasureRange]) -> f64 {
    let mut best = 0.0f64;
    for (k, a) in ranges.iter().enumerate() {
        for (l, b) in ranges.iter().enumerate() {
            if k != l {
                best = best.max(a.max - b.min);
            }
        }
    }
    best
}

/// Refines every row of every client's uplinked logits under `cfg` and
/// reports the worst pairwise discrepancy under both measures. Rows the
/// strategy cannot refine (degenerate SKR input) fall back to softmax, the
/// same way the server loop treats them.
pub fn discrepancy_trace(
    uploads: &[&Matrix],
    cfg: &RefinementConfig,
) -> Result<DiscrepancyStats> {
    if uploads.len() < 2 {
        return Err(Error::InvalidConfig {
            field: "discrepancy_trace.uploads".into(),
            msg: format!("need at least 2 clients, got {}", uploads.len()),
        });
    }
    let mut refined_peak = Vec::with_capacity(uploads.len());
    let mut refined_entropy = Vec::with_capacity(uploads.len());
    let mut soft_peak = Vec::with_capacity(uploads.len());
    let mut soft_entropy = Vec::with_capacity(uploads.len());

    for logits in uploads {
        let mut rp = Vec::with_capacity(logits.rows());
        let mut re = Vec::with_capacity(logits.rows());
        let mut sp = Vec::with_capacity(logits.rows());
        let mut se = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let z = Knowledge::new(logits.row(r).to_vec())?;
            let soft = knowledge::softmax(&z);
            let refined = match refine(&z, cfg) {
                Ok(out) => out.refined,
                Err(Error::DegenerateKnowledge(_)) => soft.clone(),
                Err(e) => return Err(e),
            };
            rp.push(knowledge::peak_probability(&refined).0);
            re.push(knowledge::shannon_entropy(&refined));
            sp.push(knowledge::peak_probability(&soft).0);
            se.push(knowledge::shannon_entropy(&soft));
        }
        refined_peak.push(MeasureRange::over(rp).expect("non-empty upload"));
        refined_entropy.push(MeasureRange::over(re).expect("non-empty upload"));
        soft_peak.push(MeasureRange::over(sp).expect("non-empty upload"));
        soft_entropy.push(MeasureRange::over(se).expect("non-empty upload"));
    }

    Ok(DiscrepancyStats {
        refined_peak_max: max_pairwise_gap(&refined_peak),
        refined_entropy_max: max_pairwise_gap(&refined_entropy),
        softmax_peak_max: max_pairwise_gap(&soft_peak),
        softmax_entropy_max: max_pairwise_gap(&soft_entropy),
    })
}

/// One evaluation row. Losses and discrepancies are absent on the round-0
/// (untrained) evaluation, which happens before any training or uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub client_id: usize,
    pub top1: f64,
    pub top5: f64,
    pub local_loss: Option<f64>,
    pub server_loss: Option<f64>,
    pub peak_discrepancy_max: Option<f64>,
    pub entropy_discrepancy_max: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

pub const CSV_HEADER: &str = "round,client_id,top1,top5,local_loss,server_loss,\
peak_discrepancy_max,entropy_discrepancy_max,bytes_up,bytes_down";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                r.client_id,
                r.top1,
                r.top5,
                opt_cell(r.local_loss),
                opt_cell(r.server_loss),
                opt_cell(r.peak_discrepancy_max),
                opt_cell(r.entropy_discrepancy_max),
                r.bytes_up,
                r.bytes_down,
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty metrics file".into(),
        })?;
        if header.trim() != CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: "unexpected metrics header".into(),
            });
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 10 fields, got {}", fields.len()),
                });
            }
            let req = |i: usize| -> Result<f64> {
                fields[i].parse().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad number `{}`: {e}", fields[i]),
                })
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                if fields[i].is_empty() {
                    Ok(None)
                } else {
                    req(i).map(Some)
                }
            };
            let int = |i: usize| -> Result<u64> {
                fields[i].parse().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad integer `{}`: {e}", fields[i]),
                })
            };
            rows.push(MetricsRow {
                round: int(0)? as u32,
                client_id: int(1)? as usize,
                top1: req(2)?,
                top5: req(3)?,
                local_loss: opt(4)?,
                server_loss: opt(5)?,
                peak_discrepancy_max: opt(6)?,
                entropy_discrepancy_max: opt(7)?,
                bytes_up: int(8)?,
                bytes_down: int(9)?,
            });
        }
        Ok(MetricsLog { rows })
    }

    pub fn final_round(&self) -> Option<u32> {
        self.rows.iter().map(|r| r.round).max()
    }

    /// Top-1 of each client at the last round.
    pub fn final_top1_per_client(&self) -> BTreeMap<usize, f64> {
        self.per_client_at_final(|r| r.top1)
    }

    pub fn final_top5_per_client(&self) -> BTreeMap<usize, f64> {
        self.per_client_at_final(|r| r.top5)
    }

    fn per_client_at_final(&self, pick: impl Fn(&MetricsRow) -> f64) -> BTreeMap<usize, f64> {
        let last = self.final_round().unwrap_or(0);
        self.rows
            .iter()
            .filter(|r| r.round == last)
            .map(|r| (r.client_id, pick(r)))
            .collect()
    }

    fn avg_top1_by_round(&self) -> BTreeMap<u32, f64> {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = sums.entry(r.round).or_insert((0.0, 0));
            e.0 += r.top1;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(round, (s, n))| (round, s / n as f64))
            .collect()
    }

    pub fn summary(&self) -> RunSummary {
        let final_top1_per_client = self.final_top1_per_client();
        let avg = |m: &BTreeMap<usize, f64>| {
            if m.is_empty() {
                0.0
            } else {
                m.values().sum::<f64>() / m.len() as f64
            }
        };
        let by_round = self.avg_top1_by_round();
        let mut rounds_to_reach = BTreeMap::new();
        for (label, threshold) in [("0.50", 0.5), ("0.70", 0.7), ("0.90", 0.9)] {
            let hit = by_round
                .iter()
                .find(|(_, &acc)| acc >= threshold)
                .map(|(&round, _)| round);
            rounds_to_reach.insert(label.to_string(), hit);
        }
        let final_top5_per_client = self.final_top5_per_client();
        RunSummary {
            avg_top1: avg(&final_top1_per_client),
            avg_top5: avg(&final_top5_per_client),
            final_top1_per_client,
            final_top5_per_client,
            rounds_to_reach,
        }
    }
}

/// The JSON summary written next to the metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_top1_per_client: BTreeMap<usize, f64>,
    pub final_top5_per_client: BTreeMap<usize, f64>,
    pub avg_top1: f64,
    pub avg_top5: f64,
    /// First round whose client-average Top-1 reached the keyed threshold.
    pub rounds_to_reach: BTreeMap<String, Option<u32>>,
}

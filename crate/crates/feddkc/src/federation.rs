//! The synchronous round protocol: clients distill locally against global
//! knowledge, upload features/logits/labels; the server refines each client's
//! knowledge, distills its predictor on the uploads, and sends fresh global
//! knowledge back. Refinement is server-side only, so the wire traffic is
//! identical with and without it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::knowledge::{self, Knowledge};
use crate::linalg::Matrix;
use crate::metrics::{
    max_pairwise_gap, top_k_accuracy, DiscrepancyStats, MeasureRange, MetricsLog, MetricsRow,
};
use crate::neural::{extract_features, predict, softmax_rows, ServerModel, SplitModel, TrainConfig};
use crate::refine::{refine, RefinementConfig, RefinementEvent};
use crate::seeding;

/// Bytes per transmitted element: f64 features/logits, 8-byte labels.
pub const BYTES_PER_ELEMENT: u64 = 8;

/// What one client sends up after its local round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub features: Matrix,
    pub logits: Matrix,
    pub labels: Vec<usize>,
}

impl Upload {
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.logits.rows() || self.labels.len() != self.logits.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.logits.rows(),
                got: self.features.rows().min(self.labels.len()),
            });
        }
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        let elements = self.features.rows() * self.features.cols()
            + self.logits.rows() * self.logits.cols()
            + self.labels.len();
        elements as u64 * BYTES_PER_ELEMENT
    }
}

pub fn downlink_bytes(knowledge: &Matrix) -> u64 {
    (knowledge.rows() * knowledge.cols()) as u64 * BYTES_PER_ELEMENT
}

/// One client: its model, its private partition, and the latest global
/// knowledge for its samples.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: SplitModel,
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// z^S rows, one per local sample. Zeros before the first downlink, so
    /// the first local similarity target is softmax(0) = uniform.
    pub incoming_global: Matrix,
}

impl ClientState {
    pub fn new(id: usize, model: SplitModel, features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if features.cols() != model.extractor.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.extractor.input_dim(),
                got: features.cols(),
            });
        }
        let classes = model.class_count();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes,
            });
        }
        let incoming_global = Matrix::zeros(features.rows(), classes);
        Ok(Self {
            id,
            model,
            features,
            labels,
            incoming_global,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn set_global_knowledge(&mut self, knowledge: Matrix) -> Result<()> {
        if knowledge.rows() != self.sample_count() || knowledge.cols() != self.model.class_count() {
            return Err(Error::DimensionMismatch {
                expected: self.sample_count(),
                got: knowledge.rows(),
            });
        }
        self.incoming_global = knowledge;
        Ok(())
    }
}

/// Runs one client's local round: `local_epochs` of distillation against the
/// softmax of the stored global knowledge, then a fresh upload computed on
/// the updated model. Returns the upload and the mean local loss.
pub fn client_round(
    state: &mut ClientState,
    cfg: &TrainConfig,
    round: u32,
) -> Result<(Upload, f64)> {
    let targets = softmax_rows(&state.incoming_global);
    let n = state.sample_count();
    let mut loss_sum = 0.0;
    let mut loss_weight = 0usize;

    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeding::rng_for(
            cfg.seed,
            &format!("client-batches-r{round}-e{epoch}"),
            state.id as u64,
        );
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = state.features.gather_rows(batch);
            let t = targets.gather_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| state.labels[i]).collect();
            let loss = state.model.distill_step(&x, &t, &y, cfg)?;
            loss_sum += loss * batch.len() as f64;
            loss_weight += batch.len();
        }
    }

    let features = extract_features(&state.model, &state.features)?;
    let logits = predict(&state.model.predictor, &features)?;
    let upload = Upload {
        features,
        logits,
        labels: state.labels.clone(),
    };
    upload.validate()?;
    let mean_loss = if loss_weight > 0 {
        loss_sum / loss_weight as f64
    } else {
        0.0
    };
    Ok((upload, mean_loss))
}

/// Server-side state: the global predictor, the refinement policy, and the
/// uploads of the round in flight.
#[derive(Debug)]
pub struct ServerState {
    pub model: ServerModel,
    pub refinement: RefinementConfig,
    /// Keep per-row refinement events (sizeable; off by default).
    pub record_events: bool,
    uploads: BTreeMap<usize, Upload>,
}

impl ServerState {
    pub fn new(model: ServerModel, refinement: RefinementConfig) -> Self {
        Self {
            model,
            refinement,
            record_events: false,
            uploads: BTreeMap::new(),
        }
    }

    pub fn ingest(&mut self, client_id: usize, upload: Upload) -> Result<()> {
        upload.validate()?;
        if upload.features.cols() != self.model.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.feature_dim(),
                got: upload.features.cols(),
            });
        }
        self.uploads.insert(client_id, upload);
        Ok(())
    }

    pub fn pending_uploads(&self) -> usize {
        self.uploads.len()
    }
}

/// Everything the server-side phase of a round produces.
#[derive(Debug)]
pub struct ServerRoundOutcome {
    /// Fresh global knowledge per client, keyed by client id.
    pub downlinks: BTreeMap<usize, Matrix>,
    /// Mean distillation loss per client pass.
    pub server_losses: BTreeMap<usize, f64>,
    pub discrepancy: DiscrepancyStats,
    /// Rows that fell back to plain softmax because refinement was
    /// impossible (constant logits under SKR).
    pub fallback_rows: usize,
    pub events: Vec<RefinementEvent>,
}

/// Refines every upload row, distills the server predictor per client in
/// ascending id order, and generates post-update global knowledge from each
/// client's features. Consumes the pending uploads (synchronous rounds).
pub fn server_round(
    server: &mut ServerState,
    cfg: &TrainConfig,
    round: u32,
) -> Result<ServerRoundOutcome> {
    let uploads = std::mem::take(&mut server.uploads);
    if uploads.is_empty() {
        return Err(Error::InvalidConfig {
            field: "server_round".into(),
            msg: "no uploads ingested for this round".into(),
        });
    }

    let mut downlinks = BTreeMap::new();
    let mut server_losses = BTreeMap::new();
    let mut events = Vec::new();
    let mut fallback_rows = 0usize;
    let mut refined_peak_ranges = Vec::new();
    let mut refined_entropy_ranges = Vec::new();
    let mut softmax_peak_ranges = Vec::new();
    let mut softmax_entropy_ranges = Vec::new();

    for (&client_id, upload) in &uploads {
        let n = upload.logits.rows();
        let classes = upload.logits.cols();
        let mut targets = Matrix::zeros(n, classes);
        let mut refined_peaks = Vec::with_capacity(n);
        let mut refined_entropies = Vec::with_capacity(n);
        let mut softmax_peaks = Vec::with_capacity(n);
        let mut softmax_entropies = Vec::with_capacity(n);

        for r in 0..n {
            let z = Knowledge::new(upload.logits.row(r).to_vec())?;
            let soft = knowledge::softmax(&z);
            let (refined, scale, strategy_name) = match refine(&z, &server.refinement) {
                Ok(out) => (out.refined, out.scale, server.refinement.strategy.name()),
                Err(Error::DegenerateKnowledge(_)) => {
                    fallback_rows += 1;
                    (soft.clone(), None, "softmax-fallback")
                }
                Err(e) => return Err(e),
            };
            if server.record_events {
                events.push(RefinementEvent::from_refinement(
                    client_id,
                    round,
                    strategy_name,
                    scale,
                    &soft,
                    &refined,
                ));
            }
            refined_peaks.push(knowledge::peak_probability(&refined).0);
            refined_entropies.push(knowledge::shannon_entropy(&refined));
            softmax_peaks.push(knowledge::peak_probability(&soft).0);
            softmax_entropies.push(knowledge::shannon_entropy(&soft));
            targets.row_mut(r).copy_from_slice(refined.probs());
        }

        refined_peak_ranges.push(MeasureRange::over(refined_peaks).expect("rows > 0"));
        refined_entropy_ranges.push(MeasureRange::over(refined_entropies).expect("rows > 0"));
        softmax_peak_ranges.push(MeasureRange::over(softmax_peaks).expect("rows > 0"));
        softmax_entropy_ranges.push(MeasureRange::over(softmax_entropies).expect("rows > 0"));

        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for epoch in 0..cfg.server_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = seeding::rng_for(
                cfg.seed,
                &format!("server-batches-r{round}-e{epoch}"),
                client_id as u64,
            );
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let h = upload.features.gather_rows(batch);
                let t = targets.gather_rows(batch);
                let y: Vec<usize> = batch.iter().map(|&i| upload.labels[i]).collect();
                let loss = server.model.distill_step(&h, &t, &y, cfg)?;
                loss_sum += loss * batch.len() as f64;
                loss_weight += batch.len();
            }
        }
        server_losses.insert(client_id, loss_sum / loss_weight.max(1) as f64);

        let downlink = predict(&server.model.predictor, &upload.features)?;
        downlinks.insert(client_id, downlink);
    }

    Ok(ServerRoundOutcome {
        downlinks,
        server_losses,
        discrepancy: DiscrepancyStats {
            refined_peak_max: max_pairwise_gap(&refined_peak_ranges),
            refined_entropy_max: max_pairwise_gap(&refined_entropy_ranges),
            softmax_peak_max: max_pairwise_gap(&softmax_peak_ranges),
            softmax_entropy_max: max_pairwise_gap(&softmax_entropy_ranges),
        },
        fallback_rows,
        events,
    })
}

/// Full experiment output; `aborted` carries the divergence that cut the run
/// short, with `log` holding everything up to that point.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub log: MetricsLog,
    pub events: Vec<RefinementEvent>,
    pub fallback_rows: usize,
    pub aborted: Option<Error>,
}

fn evaluate_client(client: &ClientState, test: &Dataset) -> Result<(f64, f64)> {
    let logits = client.model.logits(&test.features)?;
    let top1 = top_k_accuracy(&logits, &test.labels, 1)?;
    let k = 5.min(test.class_count);
    let top5 = top_k_accuracy(&logits, &test.labels, k)?;
    Ok((top1, top5))
}

/// Runs `rounds` synchronous rounds and evaluates every client on the shared
/// held-out test set after each (plus once before any training, logged as
/// round 0 with no loss/traffic columns).
pub fn run_experiment(
    clients: &mut [ClientState],
    server: &mut ServerState,
    rounds: u32,
    cfg: &TrainConfig,
    test: &Dataset,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut log = MetricsLog::default();
    let mut events = Vec::new();
    let mut fallback_rows = 0usize;

    for client in clients.iter() {
        let (top1, top5) = evaluate_client(client, test)?;
        log.push(MetricsRow {
            round: 0,
            client_id: client.id,
            top1,
            top5,
            local_loss: None,
            server_loss: None,
            peak_discrepancy_max: None,
            entropy_discrepancy_max: None,
            bytes_up: 0,
            bytes_down: 0,
        });
    }

    for round in 1..=rounds {
        let mut local_losses = BTreeMap::new();
        let mut bytes_up = BTreeMap::new();
        for client in clients.iter_mut() {
            let (upload, loss) = match client_round(client, cfg, round) {
                Ok(ok) => ok,
                Err(e @ Error::NumericalDivergence(_)) => {
                    return Ok(ExperimentOutcome {
                        log,
                        events,
                        fallback_rows,
                        aborted: Some(e),
                    })
                }
                Err(e) => return Err(e),
            };
            local_losses.insert(client.id, loss);
            bytes_up.insert(client.id, upload.bytes());
            server.ingest(client.id, upload)?;
        }

        let outcome = match server_round(server, cfg, round) {
            Ok(ok) => ok,
            Err(e @ Error::NumericalDivergence(_)) => {
                return Ok(ExperimentOutcome {
                    log,
                    events,
                    fallback_rows,
                    aborted: Some(e),
                })
            }
            Err(e) => return Err(e),
        };
        fallback_rows += outcome.fallback_rows;
        events.extend(outcome.events);

        let mut bytes_down = BTreeMap::new();
        for client in clients.iter_mut() {
            let downlink = outcome
                .downlinks
                .get(&client.id)
                .ok_or_else(|| Error::InvalidConfig {
                    field: "server_round".into(),
                    msg: format!("no downlink for client {}", client.id),
                })?;
            bytes_down.insert(client.id, downlink_bytes(downlink));
            client.set_global_knowledge(downlink.clone())?;
        }

        for client in clients.iter() {
            let (top1, top5) = evaluate_client(client, test)?;
            log.push(MetricsRow {
                round,
                client_id: client.id,
                top1,
                top5,
                local_loss: local_losses.get(&client.id).copied(),
                server_loss: outcome.server_losses.get(&client.id).copied(),
                peak_discrepancy_max: Some(outcome.discrepancy.refined_peak_max),
                entropy_discrepancy_max: Some(outcome.discrepancy.refined_entropy_max),
                bytes_up: bytes_up.get(&client.id).copied().unwrap_or(0),
                bytes_down: bytes_down.get(&client.id).copied().unwrap_or(0),
            });
        }
    }

    Ok(ExperimentOutcome {
        log,
        events,
        fallback_rows,
        aborted: None,
    })
}

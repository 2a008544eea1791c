//! Minimal split neural models: a small feature extractor and a predictor on
//! the client, a predictor-only model on the server. Plain SGD, ReLU stacks,
//! f64 throughout so runs are bitwise reproducible under a fixed seed.

mod checkpoint;
mod mlp;

pub use checkpoint::{checkpoint_from_json, Checkpoint, SplitCheckpoint};
pub use mlp::{DenseLayer, Mlp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::LOG_EPS;
use crate::linalg::Matrix;
use crate::seeding;

/// Which side of the similarity loss the received knowledge sits on.
/// The default treats it as the reference distribution: KL(target || pred).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    #[default]
    TargetFirst,
    PredictionFirst,
}

/// Optimizer and round-schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Weight of the knowledge-similarity loss.
    pub beta: f64,
    pub local_epochs: usize,
    pub server_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 256,
            weight_decay: 5e-4,
            beta: 1.5,
            local_epochs: 1,
            server_epochs: 1,
            seed: 0,
            kl_direction: KlDirection::TargetFirst,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig {
                field: "train.learning_rate".into(),
                msg: format!("must be positive and finite, got {}", self.learning_rate),
            });
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig {
                field: "train.beta".into(),
                msg: format!("must be >= 0 and finite, got {}", self.beta),
            });
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig {
                field: "train.weight_decay".into(),
                msg: format!("must be >= 0 and finite, got {}", self.weight_decay),
            });
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("local_epochs", self.local_epochs),
            ("server_epochs", self.server_epochs),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: format!("train.{name}"),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Client model: feature extractor composed with a predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub extractor: Mlp,
    pub predictor: Mlp,
}

impl SplitModel {
    pub fn new(extractor: Mlp, predictor: Mlp) -> Result<Self> {
        if extractor.output_dim() != predictor.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: extractor.output_dim(),
                got: predictor.input_dim(),
            });
        }
        Ok(Self {
            extractor,
            predictor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn class_count(&self) -> usize {
        self.predictor.output_dim()
    }

    /// One SGD step on CE(softmax(logits), labels) + beta * sim(targets,
    /// softmax(logits)), with gradients flowing through both halves.
    /// Returns the data loss before the step.
    pub fn distill_step(
        &mut self,
        x: &Matrix,
        targets: &Matrix,
        labels: &[usize],
        cfg: &TrainConfig,
    ) -> Result<f64> {
        distill_step_pipeline(
            &mut [&mut self.extractor, &mut self.predictor],
            x,
            targets,
            labels,
            cfg,
        )
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let h = extract_features(self, x)?;
        predict(&self.predictor, &h)
    }
}

/// Server model: predictor only, fed by uploaded client features.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerModel {
    pub predictor: Mlp,
}

impl ServerModel {
    pub fn new(predictor: Mlp) -> Self {
        Self { predictor }
    }

    pub fn feature_dim(&self) -> usize {
        self.predictor.input_dim()
    }

    pub fn distill_step(
        &mut self,
        features: &Matrix,
        targets: &Matrix,
        labels: &[usize],
        cfg: &TrainConfig,
    ) -> Result<f64> {
        distill_step_pipeline(&mut [&mut self.predictor], features, targets, labels, cfg)
    }
}

/// H = extractor(X); deterministic forward pass.
pub fn extract_features(model: &SplitModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.extractor.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.extractor.input_dim(),
            got: x.cols(),
        });
    }
    Ok(model.extractor.forward(x))
}

/// z = predictor(H); raw logits, no softmax applied.
pub fn predict(predictor: &Mlp, h: &Matrix) -> Result<Matrix> {
    if h.cols() != predictor.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: predictor.input_dim(),
            got: h.cols(),
        });
    }
    Ok(predictor.forward(h))
}

/// Row-wise stable softmax of a logits batch.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean CE + beta * sim over the batch, without taking a step. The same
/// quantity [`distill_step_pipeline`] differentiates, so finite-difference
/// checks probe this function.
pub fn distill_loss(
    parts: &[&Mlp],
    x: &Matrix,
    targets: &Matrix,
    labels: &[usize],
    beta: f64,
    kl_direction: KlDirection,
) -> Result<f64> {
    check_batch_shapes(parts, x, targets, labels)?;
    let mut activ = x.clone();
    for part in parts {
        activ = part.forward(&activ);
    }
    let probs = softmax_rows(&activ);
    batch_loss(&probs, targets, labels, beta, kl_direction)
}

fn batch_loss(
    probs: &Matrix,
    targets: &Matrix,
    labels: &[usize],
    beta: f64,
    kl_direction: KlDirection,
) -> Result<f64> {
    let n = probs.rows();
    let mut total = 0.0;
    for r in 0..n {
        let p = probs.row(r);
        let t = targets.row(r);
        let ce = -(p[labels[r]].max(LOG_EPS)).ln();
        let sim = match kl_direction {
            KlDirection::TargetFirst => t
                .iter()
                .zip(p)
                .map(|(&ti, &pi)| {
                    if ti > 0.0 {
                        ti * (ti / pi.max(LOG_EPS)).ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>(),
            KlDirection::PredictionFirst => p
                .iter()
                .zip(t)
                .map(|(&pi, &ti)| {
                    if pi > 0.0 {
                        pi * (pi / ti.max(LOG_EPS)).ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>(),
        };
        total += ce + beta * sim;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence(format!(
            "non-finite distillation loss {loss}"
        )));
    }
    Ok(loss)
}

fn check_batch_shapes(parts: &[&Mlp], x: &Matrix, targets: &Matrix, labels: &[usize]) -> Result<()> {
    let first = parts.first().expect("at least one model part");
    if x.cols() != first.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: first.input_dim(),
            got: x.cols(),
        });
    }
    let classes = parts.last().unwrap().output_dim();
    if targets.cols() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: targets.cols(),
        });
    }
    if targets.rows() != x.rows() || labels.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: targets.rows().min(labels.len()),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidLabel {
                label: labels[i],
                classes,
            });
        }
    }
    Ok(())
}

/// One SGD step through a pipeline of MLP parts treated as a single network.
/// Gradients are taken at the current weights for all parts, then applied.
pub fn distill_step_pipeline(
    parts: &mut [&mut Mlp],
    x: &Matrix,
    targets: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    {
        let views: Vec<&Mlp> = parts.iter().map(|p| &**p).collect();
        check_batch_shapes(&views, x, targets, labels)?;
    }
    let n = x.rows();

    // Forward, caching each part's activations.
    let mut inputs: Vec<Matrix> = Vec::with_capacity(parts.len());
    let mut caches = Vec::with_capacity(parts.len());
    let mut activ = x.clone();
    for part in parts.iter() {
        inputs.push(activ.clone());
        let acts = part.forward_cached(&activ);
        activ = acts.last().expect("at least one layer").clone();
        caches.push(acts);
    }

    let probs = softmax_rows(&activ);
    let loss = batch_loss(&probs, targets, labels, cfg.beta, cfg.kl_direction)?;

    // d(mean loss)/d(logits).
    let mut grad = Matrix::zeros(n, probs.cols());
    let scale = 1.0 / n as f64;
    for r in 0..n {
        let p = probs.row(r);
        let t = targets.row(r);
        let g = grad.row_mut(r);
        match cfg.kl_direction {
            KlDirection::TargetFirst => {
                // CE: p - onehot; KL(t || p): p - t.
                for j in 0..p.len() {
                    g[j] = (p[j] + cfg.beta * (p[j] - t[j])) * scale;
                }
                g[labels[r]] -= scale;
            }
            KlDirection::PredictionFirst => {
                // KL(p || t): p_j * (s_j - sum_i p_i s_i) with s = ln(p/t).
                let s: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(&pi, &ti)| (pi.max(LOG_EPS) / ti.max(LOG_EPS)).ln())
                    .collect();
                let mean_s: f64 = p.iter().zip(&s).map(|(&pi, &si)| pi * si).sum();
                for j in 0..p.len() {
                    g[j] = (p[j] + cfg.beta * p[j] * (s[j] - mean_s)) * scale;
                }
                g[labels[r]] -= scale;
            }
        }
    }

    // Backward through the parts, then apply all updates.
    let mut part_grads = Vec::with_capacity(parts.len());
    for idx in (0..parts.len()).rev() {
        let (grads, grad_in) = parts[idx].backward(&inputs[idx], &caches[idx], &grad);
        grad = grad_in;
        part_grads.push((idx, grads));
    }
    for (idx, grads) in part_grads {
        parts[idx].sgd_step(&grads, cfg.learning_rate, cfg.weight_decay)?;
    }
    Ok(loss)
}

/// Client hidden widths mirroring a five-client heterogeneous fleet.
pub const DESK_CLIENT_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];
/// Feature dimension shared by every extractor and the server predictor.
pub const DESK_FEATURE_DIM: usize = 16;
/// Server predictor hidden width (two layers).
pub const DESK_SERVER_WIDTH: usize = 128;

/// Desk-scale client k: a one-layer extractor into the shared feature space
/// and a predictor with one hidden layer of the per-client width. Model
/// heterogeneity lives in the predictor; the extractor stays small.
pub fn desk_scale_client(
    input_dim: usize,
    class_count: usize,
    client_index: usize,
    seed: u64,
) -> SplitModel {
    let width = DESK_CLIENT_WIDTHS[client_index % DESK_CLIENT_WIDTHS.len()];
    let mut rng = seeding::rng_for(seed, "client-init", client_index as u64);
    let extractor = Mlp::random(&[input_dim, DESK_FEATURE_DIM], true, &mut rng);
    let predictor = Mlp::random(&[DESK_FEATURE_DIM, width, class_count], false, &mut rng);
    SplitModel::new(extractor, predictor).expect("dims consistent by construction")
}

/// Desk-scale server predictor: deeper and wider than any client predictor.
pub fn desk_scale_server(class_count: usize, seed: u64) -> ServerModel {
    let mut rng = seeding::rng_for(seed, "server-init", 0);
    ServerModel::new(Mlp::random(
        &[DESK_FEATURE_DIM, DESK_SERVER_WIDTH, DESK_SERVER_WIDTH, class_count],
        false,
        &mut rng,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{kl_divergence, ProbVector};
    use approx::assert_relative_eq;

    fn uniform_targets(n: usize, classes: usize) -> Matrix {
        Matrix::from_vec(n, classes, vec![1.0 / classes as f64; n * classes]).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let model = SplitModel::new(Mlp::zeros(&[3, 2], true), Mlp::zeros(&[2, 4], false)).unwrap();
        let x = Matrix::from_rows(vec![vec![1.0, -2.0, 0.5]]).unwrap();
        let h = extract_features(&model, &x).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        let z = predict(&model.predictor, &h).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_is_relu() {
        let mut ext = Mlp::zeros(&[2, 2], true);
        ext.layers_mut()[0].weights.set(0, 0, 1.0);
        ext.layers_mut()[0].weights.set(1, 1, 1.0);
        let model = SplitModel::new(ext, Mlp::zeros(&[2, 2], false)).unwrap();
        let x = Matrix::from_rows(vec![vec![0.5, -0.5], vec![-1.0, 2.0]]).unwrap();
        let h = extract_features(&model, &x).unwrap();
        assert_eq!(h.data(), &[0.5, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = SplitModel::new(Mlp::zeros(&[3, 2], true), Mlp::zeros(&[2, 4], false)).unwrap();
        let x = Matrix::zeros(1, 5);
        assert!(matches!(
            extract_features(&model, &x),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            predict(&model.predictor, &Matrix::zeros(1, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(SplitModel::new(Mlp::zeros(&[3, 2], true), Mlp::zeros(&[5, 4], false)).is_err());
    }

    #[test]
    fn beta_zero_reduces_to_cross_entropy() {
        let mut rng = seeding::rng_for(11, "test", 0);
        let mlp = Mlp::random(&[3, 4], false, &mut rng);
        let x = Matrix::from_rows(vec![vec![0.2, -0.1, 0.4], vec![1.0, 0.3, -0.2]]).unwrap();
        let labels = [1usize, 3];
        let targets = uniform_targets(2, 4);

        let loss_beta0 =
            distill_loss(&[&mlp], &x, &targets, &labels, 0.0, KlDirection::TargetFirst).unwrap();
        let probs = softmax_rows(&mlp.forward(&x));
        let expected: f64 = (0..2)
            .map(|r| -probs.get(r, labels[r]).ln())
            .sum::<f64>()
            / 2.0;
        assert_relative_eq!(loss_beta0, expected, max_relative = 1e-12);
    }

    #[test]
    fn matching_target_zeroes_the_kl_term() {
        let mut rng = seeding::rng_for(12, "test", 0);
        let mlp = Mlp::random(&[3, 4], false, &mut rng);
        let x = Matrix::from_rows(vec![vec![0.2, -0.1, 0.4]]).unwrap();
        let labels = [2usize];
        let probs = softmax_rows(&mlp.forward(&x));
        let loss_matched =
            distill_loss(&[&mlp], &x, &probs, &labels, 5.0, KlDirection::TargetFirst).unwrap();
        let loss_ce =
            distill_loss(&[&mlp], &x, &probs, &labels, 0.0, KlDirection::TargetFirst).unwrap();
        assert_relative_eq!(loss_matched, loss_ce, max_relative = 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_for_valid_targets() {
        let mut rng = seeding::rng_for(13, "test", 0);
        let mlp = Mlp::random(&[2, 3], false, &mut rng);
        let x = Matrix::from_rows(vec![vec![0.4, -0.8]]).unwrap();
        let t = ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let targets = Matrix::from_rows(vec![t.probs().to_vec()]).unwrap();
        for dir in [KlDirection::TargetFirst, KlDirection::PredictionFirst] {
            let loss = distill_loss(&[&mlp], &x, &targets, &[0], 1.5, dir).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn kl_term_matches_knowledge_module() {
        let mut rng = seeding::rng_for(14, "test", 0);
        let mlp = Mlp::random(&[2, 3], false, &mut rng);
        let x = Matrix::from_rows(vec![vec![0.4, -0.8]]).unwrap();
        let targets = Matrix::from_rows(vec![vec![0.2, 0.5, 0.3]]).unwrap();

        let with_kl =
            distill_loss(&[&mlp], &x, &targets, &[0], 1.0, KlDirection::TargetFirst).unwrap();
        let without =
            distill_loss(&[&mlp], &x, &targets, &[0], 0.0, KlDirection::TargetFirst).unwrap();

        let p = softmax_rows(&mlp.forward(&x));
        let p_vec = ProbVector::new(p.row(0).to_vec()).unwrap();
        let t_vec = ProbVector::new(targets.row(0).to_vec()).unwrap();
        let kl = kl_divergence(&t_vec, &p_vec).unwrap();
        assert_relative_eq!(with_kl - without, kl, max_relative = 1e-10);
    }

    #[test]
    fn determinism_same_seed_same_weights() {
        let run = || {
            let mut model = desk_scale_client(4, 3, 2, 99);
            let x = Matrix::from_rows(vec![
                vec![0.1, 0.2, 0.3, 0.4],
                vec![-0.5, 0.1, 0.0, 1.0],
            ])
            .unwrap();
            let targets = uniform_targets(2, 3);
            let cfg = TrainConfig {
                seed: 99,
                ..TrainConfig::default()
            };
            for _ in 0..5 {
                model.distill_step(&x, &targets, &[0, 2], &cfg).unwrap();
            }
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a.extractor, b.extractor);
        assert_eq!(a.predictor, b.predictor);
    }

    #[test]
    fn divergence_is_detected() {
        let mut model =
            SplitModel::new(Mlp::zeros(&[2, 2], true), Mlp::zeros(&[2, 2], false)).unwrap();
        let x = Matrix::from_rows(vec![vec![1.0, 1.0]]).unwrap();
        let targets = uniform_targets(1, 2);
        let cfg = TrainConfig {
            learning_rate: f64::INFINITY,
            ..TrainConfig::default()
        };
        assert!(matches!(
            model.distill_step(&x, &targets, &[0], &cfg),
            Err(Error::NumericalDivergence(_))
        ));
    }

    #[test]
    fn desk_scale_shapes() {
        let client = desk_scale_client(32, 10, 0, 1);
        assert_eq!(client.feature_dim(), DESK_FEATURE_DIM);
        assert_eq!(client.class_count(), 10);
        assert_eq!(client.predictor.layers()[0].weights.cols(), 8);
        let server = desk_scale_server(10, 1);
        assert_eq!(server.feature_dim(), DESK_FEATURE_DIM);
        assert_eq!(server.predictor.layers().len(), 3);
    }
}

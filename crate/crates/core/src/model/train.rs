use std::io::Write;

use indexmap::IndexMap;
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_aux, loss_main, loss_total, record_losses};
use super::network::{predict_batched, record_forward, Mode};
use super::params::ModelParameters;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
    Sgd { learning_rate: f64, momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the auxiliary topic loss.
    pub lambda: f64,
    /// Probability threshold turning herb probabilities into a prescription.
    pub threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            threshold: 0.5,
            batch_size: 32,
            epochs: 40,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            patience: None,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie strictly between 0 and 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        let lr = match self.optimizer {
            OptimizerConfig::Adam { learning_rate, .. } | OptimizerConfig::Sgd { learning_rate, .. } => learning_rate,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Optimizer moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: IndexMap<String, Tensor>,
    pub second: IndexMap<String, Tensor>,
}

impl OptimizerState {
    fn apply(
        &mut self,
        config: &OptimizerConfig,
        params: &mut ModelParameters,
        grads: &IndexMap<String, Tensor>,
        frozen: &[String],
    ) {
        self.step += 1;
        for (name, g) in grads {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) {
                continue;
            }
            let p = params.tensors.get_mut(name).expect("gradient for known parameter");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            match *config {
                OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon } => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((pv, mv), vv), &gv) in
                        p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + epsilon);
                    }
                }
                OptimizerConfig::Sgd { learning_rate, momentum } => {
                    for ((pv, mv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *mv = momentum * *mv + gv;
                        *pv -= learning_rate * *mv;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_main: f64,
    pub train_aux: f64,
    pub train_total: f64,
    pub valid_main: f64,
    pub valid_aux: f64,
    pub valid_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with least validation total loss.
    pub params: ModelParameters,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

/// Mean losses of `params` over `samples` in infer mode.
pub fn evaluate_losses(params: &ModelParameters, samples: &[&Sample], lambda: f64) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let mut main = 0.0;
    let mut aux = 0.0;
    for group in samples.chunks(64) {
        let images: Vec<&Tensor> = group.iter().map(|s| &s.image).collect();
        let out = predict_batched(params, &images, 64)?;
        let labels = multi_hot(group, params.spec.herb_count)?;
        main += loss_main(&out.herb_probs, &labels)? * group.len() as f64;
        if let Some(tp) = &out.topic_probs {
            aux += loss_aux(tp, &topic_matrix(group)?)? * group.len() as f64;
        }
    }
    let n = samples.len() as f64;
    let (main, aux) = (main / n, aux / n);
    Ok((main, aux, loss_total(main, aux, lambda)))
}

pub(crate) fn multi_hot(samples: &[&Sample], herb_count: usize) -> Result<Tensor> {
    let mut data = vec![0.0; samples.len() * herb_count];
    for (i, s) in samples.iter().enumerate() {
        for &h in &s.herbs {
            if h >= herb_count {
                return Err(Error::Sample { id: s.id.clone(), reason: format!("herb id {h} >= {herb_count}") });
            }
            data[i * herb_count + h] = 1.0;
        }
    }
    Tensor::new([samples.len(), herb_count], data)
}

pub(crate) fn topic_matrix(samples: &[&Sample]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    for s in samples {
        let t = s
            .topics
            .as_ref()
            .ok_or_else(|| Error::MissingTopics(format!("sample `{}` has no topic distribution", s.id)))?;
        if *width.get_or_insert(t.len()) != t.len() {
            return Err(Error::shape("topics", format!("sample `{}` has {} topics", s.id, t.len())));
        }
        data.extend_from_slice(t);
    }
    Tensor::new([samples.len(), width.unwrap_or(0)], data)
}

const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Minibatch training with best-validation parameter selection.
pub fn train(
    mut params: ModelParameters,
    train_set: &[&Sample],
    valid_set: &[&Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.check_consistent()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let spec = params.spec.clone();
    if spec.variant.has_topic_head() {
        let m = spec.topic_count.expect("validated spec");
        for s in train_set.iter().chain(valid_set) {
            match &s.topics {
                Some(t) if t.len() == m => {}
                Some(t) => {
                    return Err(Error::MissingTopics(format!(
                        "sample `{}` has {} topics, model expects {m}",
                        s.id,
                        t.len()
                    )))
                }
                None => return Err(Error::MissingTopics(format!("sample `{}` has no topic ground truth", s.id))),
            }
        }
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut optimizer = OptimizerState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_main, mut sum_aux, mut sum_total) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
            let x = Tensor::stack(&images)?;
            let labels = multi_hot(&batch, spec.herb_count)?;
            let topics = if spec.variant.has_topic_head() { Some(topic_matrix(&batch)?) } else { None };

            let mut pass = record_forward(&params, &x, Mode::Train(&mut dropout_rng))?;
            let losses = record_losses(&mut pass, &labels, topics.as_ref(), config.lambda)?;
            let total = pass.tape.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value: total });
            }
            let main = pass.tape.value(losses.main).item();
            let aux = losses.aux.map(|v| pass.tape.value(v).item()).unwrap_or(0.0);
            let w = batch.len() as f64;
            sum_main += main * w;
            sum_aux += aux * w;
            sum_total += total * w;

            let mut grads = pass.tape.backward(losses.total)?;
            let mut named = IndexMap::with_capacity(pass.params.len());
            for (name, var) in &pass.params {
                let g = grads.take(*var).unwrap_or_else(|| Tensor::zeros(params.tensors[name].shape()));
                named.insert(name.clone(), g);
            }
            optimizer.apply(&config.optimizer, &mut params, &named, &config.frozen);
            for (name, stats) in &pass.batch_stats {
                params.running.get_mut(name).expect("bn layer").update(stats);
            }
        }
        let n = train_set.len() as f64;
        let (valid_main, valid_aux, valid_total) = evaluate_losses(&params, valid_set, config.lambda)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_main: sum_main / n,
            train_aux: sum_aux / n,
            train_total: sum_total / n,
            valid_main,
            valid_aux,
            valid_total,
        };
        debug!("epoch {}: train {:.6} valid {:.6}", record.epoch, record.train_total, record.valid_total);
        let score = if valid_set.is_empty() { record.train_total } else { record.valid_total };
        history.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch + 1, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params: best_params, best_epoch, history, optimizer })
}

/// A thresholded prescription.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prescription {
    pub herbs: Vec<usize>,
    /// Set when no herb reached the threshold.
    pub empty: bool,
}

/// Herbs whose probability reaches `threshold`.
pub fn predict_prescription(herb_probs: &[f64], threshold: f64) -> Prescription {
    let herbs: Vec<usize> = herb_probs.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect();
    let empty = herbs.is_empty();
    if empty {
        warn!("no herb reached threshold {threshold}");
    }
    Prescription { herbs, empty }
}

/// Writes the training history as CSV.
pub fn write_history_csv(history: &[EpochRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,train_main,train_aux,train_total,valid_main,valid_aux,valid_total")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_main, r.train_aux, r.train_total, r.valid_main, r.valid_aux, r.valid_total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(predict_prescription(&[0.9, 0.4, 0.6], 0.5).herbs, vec![0, 2]);
        let full = predict_prescription(&[1.0 - 1e-7; 5], 0.999);
        assert_eq!(full.herbs.len(), 5);
        let none = predict_prescription(&[0.1, 0.2], 0.5);
        assert!(none.empty && none.herbs.is_empty());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { lambda: -0.1, ..Default::default() },
            TrainConfig { threshold: 1.0, ..Default::default() },
            TrainConfig { threshold: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        let rec = EpochRecord {
            epoch: 1,
            train_main: 0.5,
            train_aux: 0.0,
            train_total: 0.5,
            valid_main: 0.4,
            valid_aux: 0.0,
            valid_total: 0.4,
        };
        write_history_csv(&[rec], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with("epoch,train_main,train_aux,train_total,valid_main,valid_aux,valid_total\n"));
    }
}

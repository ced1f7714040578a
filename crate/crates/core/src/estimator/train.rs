use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    backward_into, fit_normalizers, loss_over, Activation, Batch, DenseLayer, Gradients,
    RegressorModel, TrainingMetadata, Workspace,
};
use crate::data::{FeatureSchema, Interaction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Trains on at most this many records (a seeded subsample) when set.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            activation: Activation::Softplus,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            validation_fraction: 0.1,
            seed: 17,
            max_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, epochs and patience must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return bad("validation fraction must lie in (0, 0.5]");
        }
        Ok(())
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    fn update(&mut self, model: &mut RegressorModel, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let pairs = layer
                .weights
                .iter_mut()
                .zip(&grads.weights[l])
                .chain(layer.bias.iter_mut().zip(&grads.bias[l]));
            for (p, &g) in pairs {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Initial network: He-scaled normal weights, zero biases, and a head bias of
/// `ln(e - 1)` so the untrained model predicts `output_scale`.
fn init_layers(inputs: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<DenseLayer> {
    let mut widths = vec![inputs];
    widths.extend(&config.hidden);
    widths.push(1);
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let activation = if i == last {
                Activation::Softplus
            } else {
                config.activation
            };
            let mut layer = DenseLayer::zeros(w[0], w[1], activation);
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("valid std");
            for wt in &mut layer.weights {
                *wt = normal.sample(rng);
            }
            if i == last {
                layer.weights.iter_mut().for_each(|w| *w *= 0.1);
                layer.bias[0] = (std::f64::consts::E - 1.0).ln();
            }
            layer
        })
        .collect()
}

/// Fits `f(b)` to the log's URPS by minibatch Adam on squared error, keeping the
/// parameters with the best validation loss. Deterministic for a given log order
/// and seed.
pub fn train(log: &[Interaction], schema: &FeatureSchema, config: &TrainConfig) -> Result<RegressorModel> {
    if log.is_empty() {
        return Err(Error::Empty("cannot train on an empty log"));
    }
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..log.len()).collect();
    order.shuffle(&mut rng);
    if let Some(cap) = config.max_samples {
        order.truncate(cap.max(2));
    }
    if order.len() < 10 * config.batch_size {
        log::warn!(
            "training on {} samples, fewer than 10 batches of {}",
            order.len(),
            config.batch_size
        );
    }
    let n_val = ((order.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, order.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = if train_idx.is_empty() { val_idx } else { train_idx };

    let train_rows: Vec<Interaction> = train_idx.iter().map(|&i| log[i].clone()).collect();
    let normalizers = fit_normalizers(&train_rows, schema);
    let output_scale = train_rows.iter().map(|r| r.urps).sum::<f64>() / train_rows.len() as f64;

    let layers = init_layers(schema.arity(), config, &mut rng);
    let mut model = RegressorModel::new(normalizers, layers, output_scale)?;
    model.schema_hash = schema.hash();
    model.config = Some(config.clone());

    let train_batch = Batch::from_log(&model, &train_rows)?;
    drop(train_rows);
    let val_rows: Vec<Interaction> = val_idx.iter().map(|&i| log[i].clone()).collect();
    let val_batch = Batch::from_log(&model, &val_rows)?;

    let mut adam = Adam::new(config.learning_rate, model.param_count());
    let mut grads = Gradients::zeros_like(&model);
    let mut ws = Workspace::new(&model);
    let mut perm: Vec<usize> = (0..train_batch.len()).collect();

    let mut best = model.layers.clone();
    let mut best_loss = loss_over(&model, &val_batch, 0..val_batch.len());
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(config.batch_size) {
            backward_into(&model, &train_batch, chunk.iter().copied(), &mut ws, &mut grads);
            adam.update(&mut model, &grads);
        }
        epochs_run = epoch;
        let val_loss = loss_over(&model, &val_batch, 0..val_batch.len());
        history.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.layers.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    model.layers = best;
    let train_loss = loss_over(&model, &train_batch, 0..train_batch.len());
    model.metadata = TrainingMetadata {
        seed: config.seed,
        epochs_run,
        best_epoch,
        train_loss,
        validation_loss: best_loss,
        validation_history: history,
        samples: order.len(),
    };
    log::info!(
        "regressor trained: {epochs_run} epochs, best epoch {best_epoch}, val mse {best_loss:.6}"
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CreatorId, FamiliarityVector, FeatureKind, ItemId, Monotonicity, UserId};
    use rand::Rng;

    fn schema(kinds: &[FeatureKind]) -> FeatureSchema {
        FeatureSchema::new(
            (0..kinds.len()).map(|i| format!("f{i}")).collect(),
            kinds.to_vec(),
            vec![Monotonicity::Increasing; kinds.len()],
        )
        .unwrap()
    }

    fn rec(urps: f64, fam: Vec<f64>) -> Interaction {
        Interaction {
            user_id: UserId(0),
            item_id: ItemId(0),
            creator_id: CreatorId(0),
            timestamp: 1,
            watch_time: 1.0,
            urps,
            familiarity: FamiliarityVector(fam),
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let log: Vec<Interaction> = (0..5_000)
            .map(|_| rec(2.5, vec![rng.random_range(0.0..30.0), rng.random::<f64>()]))
            .collect();
        let s = schema(&[FeatureKind::Count, FeatureKind::Affinity]);
        let model = train(&log, &s, &TrainConfig::default()).unwrap();
        for _ in 0..200 {
            let b = FamiliarityVector(vec![rng.random_range(0.0..30.0), rng.random::<f64>()]);
            let f = model.forward(&b).unwrap();
            assert!((f - 2.5).abs() / 2.5 < 0.01, "{f}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log: Vec<Interaction> = (0..3_000)
            .map(|_| {
                let b = rng.random::<f64>();
                rec(1.0 + b, vec![b])
            })
            .collect();
        let s = schema(&[FeatureKind::Affinity]);
        let a = train(&log, &s, &quick()).unwrap();
        let b = train(&log, &s, &quick()).unwrap();
        assert_eq!(a, b);
        let c = train(&log, &s, &TrainConfig { seed: 99, ..quick() }).unwrap();
        assert_ne!(a.layers, c.layers);
    }

    #[test]
    fn best_validation_loss_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log: Vec<Interaction> = (0..4_000)
            .map(|_| {
                let b: f64 = rng.random_range(0.0..20.0);
                rec((1.0 + 0.4 * b.ln_1p()) * rng.random_range(0.8..1.2), vec![b])
            })
            .collect();
        let model = train(&log, &schema(&[FeatureKind::Count]), &TrainConfig { max_epochs: 12, ..quick() }).unwrap();
        let h = &model.metadata.validation_history;
        let mut best = f64::INFINITY;
        let running: Vec<f64> = h.iter().map(|&v| { best = best.min(v); best }).collect();
        assert!(running.windows(2).all(|w| w[1] <= w[0]));
        assert!(model.metadata.validation_loss <= *running.last().unwrap());
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let s = schema(&[FeatureKind::Count]);
        assert!(matches!(train(&[], &s, &quick()), Err(Error::Empty(_))));
        let log = vec![rec(1.0, vec![0.0]); 20];
        let bad = TrainConfig { validation_fraction: 0.7, ..quick() };
        assert!(train(&log, &s, &bad).is_err());
    }
}

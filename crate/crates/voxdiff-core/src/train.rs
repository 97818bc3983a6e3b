//! Training loop: decoupled-weight-decay Adam over the denoiser parameters
//! driven by the hybrid diffusion objective.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::RunConfig;
use crate::diffusion::{loss_mean, loss_vlb, DiffusionError, NoisePredictor};
use crate::model::{ModelError, SwinVnet};
use crate::schedule::{NoiseSchedule, ResampledSteps, ScheduleError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(usize),
    #[error("invalid training input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Combined objective actually optimized.
    pub total: f64,
    /// Noise-prediction mean-squared-error term.
    pub noise_term: f64,
    /// Variational (variance-fitting) term, before weighting.
    pub variational_term: f64,
}

/// One training example: a normalized conditioning patch and its normalized
/// target patch, both in tensor index order.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub extents: [usize; 3],
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// position, so the same optimizer must always see the same parameter list.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `values[i]` is modified in place using `grads[i]`
    /// (missing gradients leave the parameter untouched except for decay).
    pub fn apply(&mut self, values: &mut [Vec<f64>], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if values.len() != grads.len() {
            return Err(TrainError::Invalid(format!(
                "{} parameter buffers but {} gradient buffers",
                values.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.v = values.iter().map(|v| vec![0.0; v.len()]).collect();
        } else if self.m.len() != values.len() {
            return Err(TrainError::Invalid(format!(
                "optimizer state holds {} parameters, got {}",
                self.m.len(),
                values.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, vals) in values.iter_mut().enumerate() {
            let Some(g) = &grads[i] else {
                continue;
            };
            if g.len() != vals.len() {
                return Err(TrainError::Invalid(format!(
                    "parameter {i}: {} values but {} gradient entries",
                    vals.len(),
                    g.len()
                )));
            }
            for (j, x) in vals.iter_mut().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                // decay is decoupled from the adaptive step
                *x -= self.learning_rate * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// Owns the model, optimizer, and schedule for a training run.
pub struct Trainer {
    pub model: SwinVnet,
    pub schedule: NoiseSchedule,
    pub steps: ResampledSteps,
    optimizer: AdamW,
    gamma: f64,
    batch_size: usize,
    rng: ChaCha8Rng,
    global_step: usize,
}

impl Trainer {
    pub fn new(model: SwinVnet, config: &RunConfig) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.max_timestep, config.beta_slope)?;
        let steps = schedule.resample(config.reduced_steps)?;
        Ok(Trainer {
            model,
            schedule,
            steps,
            optimizer: AdamW::new(config.learning_rate, config.weight_decay),
            gamma: config.gamma(),
            batch_size: config.batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261696e)),
            global_step: 0,
        })
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    /// Forward/backward on one example with the loss scaled by `scale`;
    /// gradients accumulate into the parameter leaves. Returns the unscaled
    /// loss components.
    fn accumulate(&mut self, item: &TrainItem, scale: f64) -> Result<StepStats> {
        let [h, w, l] = item.extents;
        let n = h * w * l;
        if item.cond.len() != n || item.target.len() != n {
            return Err(TrainError::Invalid(format!(
                "extents {:?} need {n} voxels, got cond {} / target {}",
                item.extents,
                item.cond.len(),
                item.target.len()
            )));
        }
        let j = self.rng.gen_range(1..=self.steps.len());
        let timestep = self.steps.step(j);
        let eps: Vec<f64> = (0..n)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xn_vals = self.schedule.q_sample(&item.target, timestep, &eps)?;

        let shape = [1, h, w, l];
        let x0 = Tensor::constant(&shape, item.target.clone()).map_err(DiffusionError::from)?;
        let xn = Tensor::constant(&shape, xn_vals).map_err(DiffusionError::from)?;
        let cond = Tensor::constant(&shape, item.cond.clone()).map_err(DiffusionError::from)?;
        let eps_t = Tensor::constant(&shape, eps).map_err(DiffusionError::from)?;

        let (eps_pred, k) = self.model.predict(&xn, &cond, timestep)?;
        let lm = loss_mean(&eps_t, &eps_pred)?;
        let lv = loss_vlb(&x0, &xn, &eps_pred, &k, &self.steps, j)?;
        let loss = lm.add(&lv.mul_scalar(self.gamma)).map_err(DiffusionError::from)?;
        let stats = StepStats {
            total: loss.item(),
            noise_term: lm.item(),
            variational_term: lv.item(),
        };
        if !stats.total.is_finite() {
            return Err(TrainError::Diverged(self.global_step + 1));
        }
        loss.mul_scalar(scale)
            .backward()
            .map_err(DiffusionError::from)?;
        Ok(stats)
    }

    /// One optimizer step on a mini-batch: each example gets its own
    /// reduced-chain index and noise draw, the per-example gradients are
    /// averaged, and the parameters are updated once. Returns the mean loss
    /// components over the batch.
    pub fn train_batch(&mut self, items: &[&TrainItem]) -> Result<StepStats> {
        if items.is_empty() {
            return Err(TrainError::Invalid("empty training batch".into()));
        }
        let scale = 1.0 / items.len() as f64;
        let mut sum = StepStats {
            total: 0.0,
            noise_term: 0.0,
            variational_term: 0.0,
        };
        for item in items {
            let s = self.accumulate(item, scale)?;
            sum.total += s.total * scale;
            sum.noise_term += s.noise_term * scale;
            sum.variational_term += s.variational_term * scale;
        }
        self.global_step += 1;

        let params = self.model.params();
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.take_grad()).collect();
        let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
        self.optimizer.apply(&mut values, &grads)?;
        let updated: Vec<Tensor> = params
            .iter()
            .zip(values)
            .map(|(p, v)| Tensor::param(p.shape(), v).expect("shape preserved"))
            .collect();
        self.model.set_params(&updated)?;
        Ok(sum)
    }

    /// One optimization step on one example.
    pub fn train_step(&mut self, item: &TrainItem) -> Result<StepStats> {
        self.train_batch(&[item])
    }

    /// One optimizer step on `batch_size` examples drawn uniformly with
    /// replacement from `items` using the trainer's RNG.
    pub fn train_round(&mut self, items: &[TrainItem]) -> Result<StepStats> {
        if items.is_empty() {
            return Err(TrainError::Invalid("no training items".into()));
        }
        let batch: Vec<&TrainItem> = (0..self.batch_size)
            .map(|_| &items[self.rng.gen_range(0..items.len())])
            .collect();
        self.train_batch(&batch)
    }

    /// One pass over the items in order, in configured-batch-size chunks.
    /// Returns the mean loss.
    pub fn train_epoch(&mut self, items: &[TrainItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(TrainError::Invalid("no training items".into()));
        }
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in items.chunks(self.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().collect();
            sum += self.train_batch(&batch)?.total;
            steps += 1;
        }
        Ok(sum / steps as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (x - 3)^2 without decay; gradient 2(x - 3)
        let mut opt = AdamW::new(0.1, 0.0);
        let mut vals = vec![vec![0.0f64]];
        for _ in 0..200 {
            let g = 2.0 * (vals[0][0] - 3.0);
            opt.apply(&mut vals, &[Some(vec![g])]).unwrap();
        }
        assert!((vals[0][0] - 3.0).abs() < 1e-3, "{}", vals[0][0]);
    }

    #[test]
    fn adamw_first_step_is_signed_learning_rate() {
        // with zero decay, the bias-corrected first step is -lr * sign(g)
        let mut opt = AdamW::new(0.05, 0.0);
        let mut vals = vec![vec![1.0, 1.0]];
        opt.apply(&mut vals, &[Some(vec![3.0, -0.2])]).unwrap();
        assert!((vals[0][0] - (1.0 - 0.05)).abs() < 1e-6);
        assert!((vals[0][1] - (1.0 + 0.05)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: parameter still shrinks by lr * wd * x
        let mut opt = AdamW::new(0.1, 0.5);
        let mut vals = vec![vec![2.0]];
        opt.apply(&mut vals, &[Some(vec![0.0])]).unwrap();
        assert!((vals[0][0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut vals = vec![vec![0.0]];
        assert!(opt.apply(&mut vals, &[]).is_err());
        opt.apply(&mut vals, &[Some(vec![1.0])]).unwrap();
        let mut more = vec![vec![0.0], vec![0.0]];
        assert!(opt
            .apply(&mut more, &[Some(vec![1.0]), Some(vec![1.0])])
            .is_err());
    }

    fn toy_trainer(seed: u64) -> Trainer {
        let mut config = crate::config::RunConfig::profile("toy").unwrap();
        config.seed = seed;
        config.patch = [8, 8, 4];
        let model = SwinVnet::new(config.swin_config(), seed).unwrap();
        Trainer::new(model, &config).unwrap()
    }

    fn toy_item(seed: u64) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8 * 8 * 4;
        TrainItem {
            extents: [8, 8, 4],
            cond: (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
            target: (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        }
    }

    #[test]
    fn training_steps_reduce_loss_on_a_fixed_batch() {
        let mut t = toy_trainer(0);
        let item = toy_item(42);
        let mut losses = Vec::new();
        for _ in 0..30 {
            losses.push(t.train_step(&item).unwrap().total);
        }
        let early: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = losses[25..].iter().sum::<f64>() / 5.0;
        assert!(late < early, "early {early} late {late}");
        assert_eq!(t.global_step(), 30);
    }

    #[test]
    fn training_changes_parameters() {
        let mut t = toy_trainer(1);
        let before = t.model.params();
        t.train_step(&toy_item(7)).unwrap();
        let after = t.model.params();
        let mut changed = false;
        for (a, b) in before.iter().zip(&after) {
            if a.data() != b.data() {
                changed = true;
                break;
            }
        }
        assert!(changed);
    }

    #[test]
    fn bad_item_rejected() {
        let mut t = toy_trainer(2);
        let bad = TrainItem {
            extents: [8, 8, 4],
            cond: vec![0.0; 10],
            target: vec![0.0; 256],
        };
        assert!(t.train_step(&bad).is_err());
    }

    #[test]
    fn epoch_averages_step_losses() {
        let mut t = toy_trainer(3);
        let items = vec![toy_item(1), toy_item(2)];
        // toy batch size is 8, so two items fit one optimizer step
        let mean = t.train_epoch(&items).unwrap();
        assert!(mean.is_finite() && mean > 0.0);
        assert_eq!(t.global_step(), 1);
        assert!(t.train_epoch(&[]).is_err());
    }

    #[test]
    fn batch_takes_one_optimizer_step() {
        let mut t = toy_trainer(4);
        let a = toy_item(1);
        let b = toy_item(2);
        let stats = t.train_batch(&[&a, &b, &a]).unwrap();
        assert!(stats.total.is_finite());
        assert_eq!(t.global_step(), 1);
        assert!(t.train_batch(&[]).is_err());
    }

    #[test]
    fn batch_of_clones_matches_single_step_scale() {
        // a batch of one equals train_step on the same trainer state
        let mut t1 = toy_trainer(5);
        let mut t2 = toy_trainer(5);
        let item = toy_item(9);
        let s1 = t1.train_step(&item).unwrap();
        let s2 = t2.train_batch(&[&item]).unwrap();
        assert_eq!(s1.total, s2.total);
        for (a, b) in t1.model.params().iter().zip(&t2.model.params()) {
            assert_eq!(a.data(), b.data());
        }
    }
}

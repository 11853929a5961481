//! Adam optimization with per-epoch exponential learning-rate decay, early
//! stopping on validation hybrid loss, k-fold split management and the
//! training loop. One whole volume forms one optimization step so the slice
//! recurrence and multiview fusion see the full stack.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{hybrid_loss, MvttModel};
use crate::params::ParamSet;
use crate::phantom::{reslice, MultiviewSlices, Volume};
use crate::tensor::{BnMode, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay_rate: f64,
    pub max_epochs: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            lr_decay_rate: 0.98,
            max_epochs: 100,
            early_stopping: false,
            early_stop_patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            deterministic: false,
            folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return Err(Error::invalid("lr_decay_rate must lie in (0, 1]"));
        }
        if self.early_stopping && self.early_stop_patience == 0 {
            return Err(Error::invalid("early_stop_patience must be >= 1"));
        }
        Ok(())
    }
}

/// lr(epoch) = initial_lr * decay^epoch, epochs counted from zero.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.lr_decay_rate.powi(epoch as i32)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(config: &TrainConfig) -> Self {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over all trainable parameters.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let names = params.trainable_names();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::invalid(format!(
                "adam_step: missing gradient for '{}'",
                name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for name in &names {
        let g = &grads[name];
        let tensor = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let data = tensor.data_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Assignment of volume ids to folds: seeded shuffle then round-robin, so
/// the plan is a balanced partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub assignments: IndexMap<String, usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > ids.len() {
        return Err(Error::invalid(format!(
            "cannot split {} ids into {} folds",
            ids.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.shuffle(&mut rng);
    let mut assignments = IndexMap::new();
    for (i, id) in shuffled.into_iter().enumerate() {
        assignments.insert(id, i % k);
    }
    Ok(FoldPlan {
        assignments,
        folds: k,
        seed,
    })
}

/// One labelled training case; the intensity volume must already be
/// mean-normalized.
#[derive(Debug, Clone)]
pub struct TrainVolume {
    pub id: String,
    pub intensity: Volume,
    pub anatomy: Volume,
    pub scar: Volume,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

pub struct TrainResult {
    pub model: MvttModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn volume_tensor(v: &Volume) -> Tensor {
    let (nz, ny, nx) = v.dims;
    Tensor::new(vec![nz, 1, ny, nx], v.values().to_vec()).expect("volume tensor")
}

fn volume_loss(model: &mut MvttModel, views: &MultiviewSlices, case: &TrainVolume, mode: BnMode) -> Result<(f64, Tape, Option<crate::params::Binding>)> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, views, mode)?;
    let g_l = tape.constant(volume_tensor(&case.anatomy));
    let g_as = tape.constant(volume_tensor(&case.scar));
    let loss = hybrid_loss(&mut tape, pass.m_l, g_l, pass.m_as, g_as)?;
    let value = tape.value(loss).data()[0];
    if mode == BnMode::Train {
        tape.backward(loss)?;
        Ok((value, tape, Some(pass.binding)))
    } else {
        Ok((value, tape, None))
    }
}

/// Minimize the hybrid loss over the training set, logging one line per
/// epoch. With early stopping enabled the best-validation parameters are
/// restored at the end. The optional callback sees the model after each
/// epoch and may request a stop by returning true.
pub fn train(
    mut model: MvttModel,
    train_set: &[TrainVolume],
    val_set: &[TrainVolume],
    config: &TrainConfig,
    mut callback: Option<&mut dyn FnMut(&mut MvttModel, &EpochLog) -> bool>,
) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.early_stopping && val_set.is_empty() {
        return Err(Error::invalid(
            "early stopping requires a nonempty validation set",
        ));
    }
    let train_views: Vec<MultiviewSlices> =
        train_set.iter().map(|c| reslice(&c.intensity)).collect();
    let val_views: Vec<MultiviewSlices> = val_set.iter().map(|c| reslice(&c.intensity)).collect();

    let mut adam = AdamState::new(config);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, MvttModel)> = None;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let t0 = std::time::Instant::now();
        let lr = lr_schedule(epoch, config);
        let mut train_loss = 0.0;
        for (case, views) in train_set.iter().zip(&train_views) {
            let (value, tape, binding) = volume_loss(&mut model, views, case, BnMode::Train)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {} on volume '{}'",
                    epoch, case.id
                )));
            }
            let grads = binding.expect("train mode").grads(&tape, &model.params);
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
            train_loss += value;
        }
        train_loss /= train_set.len() as f64;

        let val_loss = if val_set.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for (case, views) in val_set.iter().zip(&val_views) {
                let (value, _, _) = volume_loss(&mut model, views, case, BnMode::Eval)?;
                total += value;
            }
            Some(total / val_set.len() as f64)
        };

        let seconds = if config.deterministic {
            0.0
        } else {
            t0.elapsed().as_secs_f64()
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            seconds,
        };
        log.push(entry.clone());

        if let Some(vl) = val_loss {
            let improved = best.as_ref().map(|(b, _, _)| vl < *b).unwrap_or(true);
            if improved {
                best = Some((vl, epoch, model.clone()));
            } else if config.early_stopping {
                let since = epoch - best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
                if since >= config.early_stop_patience {
                    stopped_early = true;
                }
            }
        }

        if let Some(cb) = callback.as_deref_mut() {
            if cb(&mut model, &entry) {
                stopped_early = true;
            }
        }
        if stopped_early {
            break;
        }
    }

    let best_epoch = match (&best, config.early_stopping) {
        (Some((_, e, m)), true) => {
            let e = *e;
            model = m.clone();
            e
        }
        (Some((_, e, _)), false) => *e,
        (None, _) => log.len().saturating_sub(1),
    };

    Ok(TrainResult {
        model,
        log,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::MvttConfig;
    use crate::phantom::{generate_phantom, normalize, PhantomSpec};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_matches_the_published_constants() {
        let config = TrainConfig::default();
        assert_eq!(lr_schedule(0, &config), 0.001);
        assert!((lr_schedule(1, &config) - 0.00098).abs() < 1e-12);
        assert!((lr_schedule(10, &config) - 0.001 * 0.98f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn folds_partition_170_ids_into_ten_folds_of_17() {
        let ids: Vec<String> = (0..170).map(|i| format!("scan_{i:03}")).collect();
        let plan = make_folds(&ids, 10, 5).unwrap();
        assert_eq!(plan.folds, 10);
        assert_eq!(plan.assignments.len(), 170);
        for fold in 0..10 {
            assert_eq!(plan.fold_members(fold).len(), 17);
        }
        // Same seed reproduces the plan; a different seed moves ids around.
        let again = make_folds(&ids, 10, 5).unwrap();
        assert_eq!(plan.assignments, again.assignments);
        let other = make_folds(&ids, 10, 6).unwrap();
        assert_ne!(plan.assignments, other.assignments);
    }

    #[test]
    fn uneven_folds_differ_by_at_most_one() {
        let ids: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let plan = make_folds(&ids, 3, 0).unwrap();
        let mut sizes: Vec<usize> = (0..3).map(|f| plan.fold_members(f).len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![6, 7, 7]);
    }

    #[test]
    fn folds_reject_degenerate_counts() {
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        assert!(make_folds(&ids, 0, 0).is_err());
        assert!(make_folds(&ids, 6, 0).is_err());
    }

    #[test]
    fn adam_matches_a_scalar_hand_computation() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let config = TrainConfig::default();
        let mut state = AdamState::new(&config);
        let lr = 0.1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);

        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [0.5f64, -0.25, 0.125].iter().enumerate() {
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), vec![*g]);
            adam_step(&mut params, &grads, &mut state, lr).unwrap();

            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (t + 1) as i32;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (params.get("w").unwrap().data()[0] - w).abs() < 1e-12,
                "step {t}"
            );
        }
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn adam_skips_frozen_parameters_and_requires_gradients() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        params.insert_frozen("stat", Tensor::scalar(5.0));
        let config = TrainConfig::default();
        let mut state = AdamState::new(&config);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params.get("stat").unwrap().data(), &[5.0]);

        let empty = IndexMap::new();
        assert!(adam_step(&mut params, &empty, &mut state, 0.1).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = TrainConfig::default();
        c.lr_decay_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.early_stopping = true;
        c.early_stop_patience = 0;
        assert!(c.validate().is_err());
    }

    fn tiny_case(seed: u64) -> TrainVolume {
        let mut spec = PhantomSpec::desk_scale(seed);
        spec.dims = (3, 8, 8);
        spec.spacing_mm = (2.0, 1.0, 1.0);
        spec.semi_axes_mm = (2.5, 2.5, 2.5);
        spec.center_mm = (3.0, 4.0, 4.0);
        spec.pv_stub_count = 0;
        let p = generate_phantom(&spec).unwrap();
        TrainVolume {
            id: format!("case_{seed}"),
            intensity: normalize(&p.intensity).unwrap(),
            anatomy: p.anatomy_gt,
            scar: p.scar_gt,
        }
    }

    #[test]
    fn one_epoch_produces_one_log_line_and_moves_parameters() {
        let case = tiny_case(1);
        let model = MvttModel::new(MvttConfig::desk_scale(1), case.intensity.dims, 0).unwrap();
        let before = model.params.get("theta_a.enc1.weight").unwrap().clone();
        let config = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let result = train(model, &[case], &[], &config, None).unwrap();
        assert_eq!(result.log.len(), 1);
        assert_eq!(result.log[0].epoch, 0);
        assert_eq!(result.log[0].lr, 0.001);
        assert!(result.log[0].val_loss.is_none());
        assert!(result.log[0].train_loss.is_finite());
        let after = result.model.params.get("theta_a.enc1.weight").unwrap();
        assert_ne!(before.data(), after.data());
    }

    #[test]
    fn deterministic_training_is_bitwise_reproducible() {
        let run = || {
            let case = tiny_case(2);
            let model =
                MvttModel::new(MvttConfig::desk_scale(1), case.intensity.dims, 7).unwrap();
            let config = TrainConfig {
                max_epochs: 2,
                deterministic: true,
                ..TrainConfig::default()
            };
            train(model, &[case], &[], &config, None).unwrap()
        };
        let a = run();
        let b = run();
        for (la, lb) in a.log.iter().zip(&b.log) {
            assert_eq!(la.train_loss.to_bits(), lb.train_loss.to_bits());
            assert_eq!(la.seconds, 0.0);
        }
        for (name, p) in a.model.params.iter() {
            let q = b.model.params.get(name).unwrap();
            assert_eq!(p.tensor.data(), q.data(), "{name}");
        }
    }

    #[test]
    fn early_stopping_restores_the_best_model() {
        let train_case = tiny_case(3);
        let val_case = tiny_case(4);
        let model =
            MvttModel::new(MvttConfig::desk_scale(1), train_case.intensity.dims, 1).unwrap();
        let config = TrainConfig {
            max_epochs: 6,
            early_stopping: true,
            early_stop_patience: 2,
            // An absurd learning rate makes validation loss worsen quickly.
            initial_lr: 0.5,
            ..TrainConfig::default()
        };
        let result = train(model, &[train_case], &[val_case], &config, None).unwrap();
        let best_val = result.log[result.best_epoch].val_loss.unwrap();
        for entry in &result.log {
            assert!(entry.val_loss.unwrap() >= best_val);
        }
        if result.stopped_early {
            let last = result.log.last().unwrap().epoch;
            assert!(last - result.best_epoch >= config.early_stop_patience);
        }
    }

    #[test]
    fn training_rejects_empty_sets() {
        let case = tiny_case(5);
        let model = MvttModel::new(MvttConfig::desk_scale(1), case.intensity.dims, 0).unwrap();
        let config = TrainConfig::default();
        assert!(train(model.clone(), &[], &[], &config, None).is_err());
        let es = TrainConfig {
            early_stopping: true,
            ..TrainConfig::default()
        };
        assert!(train(model, &[case], &[], &es, None).is_err());
    }

    #[test]
    fn callback_can_stop_training() {
        let case = tiny_case(6);
        let model = MvttModel::new(MvttConfig::desk_scale(1), case.intensity.dims, 0).unwrap();
        let config = TrainConfig {
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let mut seen = 0usize;
        let mut cb = |_: &mut MvttModel, log: &EpochLog| {
            seen += 1;
            log.epoch >= 1
        };
        let result = train(model, &[case], &[], &config, Some(&mut cb)).unwrap();
        assert_eq!(result.log.len(), 2);
        assert!(result.stopped_early);
        assert_eq!(seen, 2);
    }
}

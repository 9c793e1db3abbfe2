//! CE warm-up followed by joint deeply supervised training, with optional
//! online adversarial augmentation.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, AttackKind, Classifier, LossMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, joint_loss, PrototypeSet};
use crate::nn::{Model, ModelSpec};
use crate::rng::{rng_for, Stream};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    #[default]
    None,
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub adv_mode: AdvMode,
    pub adv_eps: [f64; 2],
    /// Fraction of each joint-phase batch that gets an adversarial copy.
    pub adv_fraction: f64,
    pub adv_steps: usize,
    /// Per-tap conformity weights; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub seed: u64,
    /// Checkpoint period in epochs for the command-line trainer; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 64,
            lr: 0.1,
            decay_epochs: vec![20, 25],
            decay_factor: 0.1,
            adv_mode: AdvMode::None,
            adv_eps: [0.1, 0.5],
            adv_fraction: 1.0,
            adv_steps: 10,
            loss_weights: Vec::new(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        let [lo, hi] = self.adv_eps;
        if !(0.0 <= lo && lo <= hi) {
            return bad(format!("adv_eps must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.adv_fraction > 0.0 && self.adv_fraction <= 1.0) {
            return bad(format!("adv_fraction must be in (0, 1], got {}", self.adv_fraction));
        }
        if self.adv_steps == 0 {
            return bad("adv_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub joint: bool,
    pub lr: f64,
    pub ce: f64,
    pub pc_per_tap: Vec<f64>,
    pub total: f64,
    pub train_acc: f64,
    /// Mean pairwise centroid distance per tap at the end of the epoch.
    pub proto_dist: Vec<f64>,
    pub batches: usize,
    /// Loss samples processed, including adversarial copies.
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let taps = self.records.iter().map(|r| r.pc_per_tap.len().max(r.proto_dist.len())).max().unwrap_or(0);
        let mut w = crate::report::csv_writer(path, header)?;
        let mut head: Vec<String> = ["epoch", "phase", "lr", "ce", "total", "train_acc", "batches", "samples", "seconds"]
            .map(String::from)
            .to_vec();
        head.extend((0..taps).map(|t| format!("pc_tap{t}")));
        head.extend((0..taps).map(|t| format!("proto_dist_tap{t}")));
        w.write_record(&head)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                if r.joint { "joint" } else { "warmup" }.to_string(),
                r.lr.to_string(),
                format!("{:.6}", r.ce),
                format!("{:.6}", r.total),
                format!("{:.4}", r.train_acc),
                r.batches.to_string(),
                r.samples.to_string(),
                format!("{:.2}", r.seconds),
            ];
            let opt = |v: &Vec<f64>, t: usize| v.get(t).map(|x| format!("{x:.6}")).unwrap_or_default();
            row.extend((0..taps).map(|t| opt(&r.pc_per_tap, t)));
            row.extend((0..taps).map(|t| opt(&r.proto_dist, t)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

fn adv_config(cfg: &TrainConfig, eps: f64) -> AttackConfig {
    let kind = match cfg.adv_mode {
        AdvMode::Pgd => AttackKind::Pgd,
        _ => AttackKind::Fgsm,
    };
    AttackConfig {
        kind,
        epsilon: eps,
        steps: cfg.adv_steps,
        loss_mode: LossMode::Ce,
        ..AttackConfig::default()
    }
}

/// Trains from scratch: `train_from(.., start_epoch = 0, ..)`.
pub fn train(
    model: Model,
    protos: PrototypeSet,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, PrototypeSet, TrainLog)> {
    train_from(model, protos, data, cfg, 0, on_epoch)
}

/// Runs epochs `start_epoch..cfg.epochs`. Every random draw is keyed by
/// epoch and batch index, so resuming from a saved state at epoch `e`
/// reproduces an uninterrupted run bitwise.
pub fn train_from(
    mut model: Model,
    mut protos: PrototypeSet,
    data: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, PrototypeSet, TrainLog)> {
    cfg.validate()?;
    protos.check_against(&model)?;
    if data.sample_shape() != model.spec().input_shape.as_slice() {
        return Err(Error::shape("training data", &model.spec().input_shape, data.sample_shape()));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let n_params = model.params().len();
    let mut log = TrainLog::default();
    for epoch in start_epoch..cfg.epochs {
        let start = Instant::now();
        let joint = epoch >= cfg.warmup_epochs;
        let lr = cfg.lr_at(epoch);
        let mut sums = (0.0, 0.0, vec![0.0; protos.num_taps()]);
        let mut correct = 0usize;
        let mut clean_seen = 0usize;
        let mut samples = 0usize;
        let batches = data.batches(cfg.batch_size, true, crate::rng::derive_seed(cfg.seed, Stream::Shuffle, epoch as u64));
        for (b, idx) in batches.iter().enumerate() {
            let (mut x, mut y) = data.batch(idx);
            let clean_n = y.len();
            if joint && cfg.adv_mode != AdvMode::None {
                let mut rng = rng_for(cfg.seed, Stream::AdvTrain, ((epoch as u64) << 32) | b as u64);
                let [lo, hi] = cfg.adv_eps;
                let eps = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let k = ((clean_n as f64 * cfg.adv_fraction).round() as usize).clamp(1, clean_n);
                let sel: Vec<usize> = (0..k).collect();
                let target = Classifier::new(&model, Some(&protos));
                let adv = attack_batch(&target, &x.select_rows(&sel), &y[..k], &adv_config(cfg, eps), &mut rng)?;
                x = Tensor::concat_rows(&[&x, &adv.x_adv])?;
                y.extend_from_within(..k);
            }

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, &bound, xv)?;
            let (loss, ce, pcs, centroid_vars) = if joint {
                let c = protos.bind(&mut tape, true);
                let (loss, br) = joint_loss(&mut tape, &out, &y, &c, &cfg.loss_weights)?;
                (loss, br.ce, br.pc_per_tap, c)
            } else {
                let loss = cross_entropy(&mut tape, out.logits, &y)?;
                let ce = tape.value(loss).item();
                (loss, ce, Vec::new(), Vec::new())
            };
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, value: total });
            }
            let preds = tape.value(out.logits).argmax_rows();
            correct += preds[..clean_n].iter().zip(&y).filter(|(p, t)| p == t).count();
            clean_seen += clean_n;
            let n = y.len() as f64;
            sums.0 += ce * n;
            sums.1 += total * n;
            for (s, v) in sums.2.iter_mut().zip(&pcs) {
                *s += v * n;
            }
            samples += y.len();

            tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
            debug_assert_eq!(grads.len(), n_params);
            sgd_step(model.params_mut(), &grads, lr)?;
            if joint {
                let cg: Vec<Tensor> = centroid_vars.iter().map(|&v| tape.grad(v)).collect();
                sgd_step(protos.centroids_mut(), &cg, lr)?;
            }
        }
        let s = samples as f64;
        let record = EpochRecord {
            epoch,
            joint,
            lr,
            ce: sums.0 / s,
            pc_per_tap: if joint { sums.2.iter().map(|v| v / s).collect() } else { Vec::new() },
            total: sums.1 / s,
            train_acc: correct as f64 / clean_seen as f64,
            proto_dist: (0..protos.num_taps()).map(|t| protos.mean_pairwise_distance(t)).collect(),
            batches: batches.len(),
            samples,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((model, protos, log))
}

/// Clean softmax accuracy.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let pred = model.predict_softmax(&data.images)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, t)| p == t).count() as f64 / data.len() as f64)
}

/// Independently seeded CE-only model of a different, shallower
/// architecture, used only to craft black-box adversarial examples.
pub fn make_black_box_source(data: &Dataset, seed: u64, epochs: usize) -> Result<Model> {
    let spec = ModelSpec::source_cnn(data.sample_shape(), data.num_classes.max(2));
    let model = Model::build(spec, seed ^ 0x5eed_50c3)?;
    let protos = PrototypeSet::for_model(&model, seed)?;
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: epochs,
        batch_size: 64,
        lr: 0.05,
        decay_epochs: Vec::new(),
        seed: seed ^ 0x5eed_50c3,
        ..TrainConfig::default()
    };
    Ok(train(model, protos, data, &cfg, &mut |_| {})?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn sgd_examples() {
        let mut p = vec![Tensor::scalar(1.0)];
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.0).unwrap();
        assert_eq!(p, before);

        let g = [Tensor::from_vec(vec![0.25, -0.5])];
        let mut twice = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let mut once = twice.clone();
        sgd_step(&mut twice, &g, 0.5).unwrap();
        sgd_step(&mut twice, &g, 0.5).unwrap();
        sgd_step(&mut once, &g, 1.0).unwrap();
        assert_eq!(twice, once);
        assert!(sgd_step(&mut once, &[Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(20) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(29) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 31;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.adv_eps = [0.5, 0.1];
        assert!(c.validate().is_err());
        assert!(toml::from_str::<TrainConfig>("epochs = 3\nmomentum = 0.9").is_err());
    }

    fn blobs() -> Dataset {
        synth_blobs(3, 20, &[6], 0.05, 1).unwrap()
    }

    #[test]
    fn warmup_only_leaves_prototypes_untouched() {
        let data = blobs();
        let model = Model::build(ModelSpec::mlp(&[6], &[8, 4], 3), 2).unwrap();
        let protos = PrototypeSet::for_model(&model, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 3,
            batch_size: 16,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let (m, p, log) = train(model.clone(), protos.clone(), &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(p, protos);
        assert_ne!(m.params(), model.params());
        assert_eq!(log.records.len(), 3);
        assert!(log.records.iter().all(|r| !r.joint && r.pc_per_tap.is_empty()));
    }

    #[test]
    fn adversarial_augmentation_doubles_joint_samples() {
        let data = blobs();
        let model = Model::build(ModelSpec::mlp(&[6], &[8], 3), 2).unwrap();
        let protos = PrototypeSet::for_model(&model, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            adv_mode: AdvMode::Fgsm,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let (_, p, log) = train(model, protos.clone(), &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(log.records[0].samples, data.len());
        assert_eq!(log.records[1].samples, 2 * data.len());
        assert_eq!(log.records[0].batches, log.records[1].batches);
        assert_ne!(p, protos);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = blobs();
        let model = Model::build(ModelSpec::mlp(&[6], &[8, 4], 3), 5).unwrap();
        let protos = PrototypeSet::for_model(&model, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 8,
            adv_mode: AdvMode::Pgd,
            adv_steps: 2,
            decay_epochs: vec![2],
            ..TrainConfig::default()
        };
        let (full_m, full_p, _) = train(model.clone(), protos.clone(), &data, &cfg, &mut |_| {}).unwrap();
        let first = TrainConfig { epochs: 1, ..cfg.clone() };
        let (m1, p1, _) = train(model, protos, &data, &first, &mut |_| {}).unwrap();
        let (m2, p2, log) = train_from(m1, p1, &data, &cfg, 1, &mut |_| {}).unwrap();
        assert_eq!(m2.params(), full_m.params());
        assert_eq!(p2, full_p);
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn non_finite_loss_names_epoch_and_batch() {
        let data = blobs();
        let mut model = Model::build(ModelSpec::mlp(&[6], &[4], 3), 0).unwrap();
        model.params_mut()[0].data_mut()[0] = f64::NAN;
        let protos = PrototypeSet::for_model(&model, 0).unwrap();
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, ..TrainConfig::default() };
        match train(model, protos, &data, &cfg, &mut |_| {}) {
            Err(Error::NonFinite { epoch: 0, batch: 0, .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}

//! FGSM, BIM, MIM, Carlini-Wagner and PGD under an L-infinity budget
//! (C&W optimizes its own L2 objective and is not budget-bound).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, joint_loss, PrototypeSet};
use crate::nn::Model;
use crate::rng::{rng_for, Stream};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Mim,
    Cw,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Cw, AttackKind::Mim, AttackKind::Pgd];

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Bim => "BIM",
            AttackKind::Mim => "MIM",
            AttackKind::Cw => "C&W",
            AttackKind::Pgd => "PGD",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, AttackKind::Bim | AttackKind::Mim | AttackKind::Pgd)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "mim" => Ok(AttackKind::Mim),
            "cw" | "c&w" => Ok(AttackKind::Cw),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }
}

/// Which objective the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Ce,
    /// The defender's full training objective (adaptive white-box).
    CePc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size; `None` means `epsilon / steps`.
    pub step_size: Option<f64>,
    /// MIM momentum decay.
    pub decay: f64,
    pub c: f64,
    pub kappa: f64,
    pub lr: f64,
    pub iters: usize,
    pub loss_mode: LossMode,
    pub clip_min: f64,
    pub clip_max: f64,
    /// PGD random restarts.
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 0.3,
            steps: 10,
            step_size: None,
            decay: 1.0,
            c: 10.0,
            kappa: 0.0,
            lr: 0.01,
            iters: 1000,
            loss_mode: LossMode::Ce,
            clip_min: 0.0,
            clip_max: 1.0,
            restarts: 1,
        }
    }
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackConfig {
            kind,
            epsilon,
            ..Default::default()
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / self.steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("attack {}: {m}", self.kind.label())));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.clip_min < self.clip_max) {
            return bad(format!("clip_min {} must be below clip_max {}", self.clip_min, self.clip_max));
        }
        if self.decay < 0.0 {
            return bad(format!("decay must be >= 0, got {}", self.decay));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return bad(format!("step_size must be > 0, got {s}"));
            }
        }
        if self.kind == AttackKind::Pgd && self.epsilon > 0.0 && !(self.step() > 0.0) {
            return bad("PGD needs a positive step size".into());
        }
        if self.kind == AttackKind::Cw && (self.iters == 0 || !(self.lr > 0.0) || self.c < 0.0) {
            return bad("C&W needs iters >= 1, lr > 0 and c >= 0".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        Ok(())
    }

    /// Value reported in tables: `c` for C&W, epsilon otherwise.
    pub fn strength(&self) -> f64 {
        if self.kind == AttackKind::Cw {
            self.c
        } else {
            self.epsilon
        }
    }
}

/// What an attack needs from the model under attack.
pub trait Target {
    /// Batch-mean loss and its gradient with respect to the input.
    fn loss_grad(&self, x: &Tensor, y: &[usize], mode: LossMode) -> Result<(f64, Tensor)>;

    /// Per-sample `max(Z_y - max_{j != y} Z_j, -kappa)` and the gradient of its sum.
    fn margin_grad(&self, x: &Tensor, y: &[usize], kappa: f64) -> Result<(Vec<f64>, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    #[default]
    Softmax,
    Prototype,
}

/// A frozen model, optionally with its prototypes.
#[derive(Debug, Clone, Copy)]
pub struct Classifier<'a> {
    pub model: &'a Model,
    pub protos: Option<&'a PrototypeSet>,
    pub prediction: Prediction,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a Model, protos: Option<&'a PrototypeSet>) -> Self {
        Classifier {
            model,
            protos,
            prediction: Prediction::Softmax,
        }
    }

    pub fn with_prediction(mut self, prediction: Prediction) -> Self {
        self.prediction = prediction;
        self
    }
}

impl Target for Classifier<'_> {
    fn loss_grad(&self, x: &Tensor, y: &[usize], mode: LossMode) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.model.forward(&mut tape, &bound, xv)?;
        let loss = match mode {
            LossMode::Ce => cross_entropy(&mut tape, out.logits, y)?,
            LossMode::CePc => {
                let protos = self
                    .protos
                    .ok_or_else(|| Error::Config("CE+PC attack needs prototypes".into()))?;
                protos.check_against(self.model)?;
                let c = protos.bind(&mut tape, false);
                joint_loss(&mut tape, &out, y, &c, &[])?.0
            }
        };
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), tape.grad(xv)))
    }

    fn margin_grad(&self, x: &Tensor, y: &[usize], kappa: f64) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.model.forward(&mut tape, &bound, xv)?;
        let zy = tape.pick(out.logits, y)?;
        let zo = tape.max_excluding(out.logits, y)?;
        let diff = tape.sub(zy, zo)?;
        let f = tape.clamp_min(diff, -kappa);
        let s = tape.sum(f);
        tape.backward(s)?;
        Ok((tape.value(f).data().to_vec(), tape.grad(xv)))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        match self.prediction {
            Prediction::Softmax => self.model.predict_softmax(x),
            Prediction::Prototype => {
                let protos = self
                    .protos
                    .ok_or_else(|| Error::Config("prototype prediction needs prototypes".into()))?;
                let (_, taps) = self.model.infer(x, 256)?;
                protos.predict(&taps)
            }
        }
    }
}

/// Attack output for one batch (or a concatenation of batches).
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x: Tensor,
    pub x_adv: Tensor,
    pub labels: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
    /// `adv_pred != label`.
    pub success: Vec<bool>,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.len() as f64
    }

    /// Per-sample L-infinity distance between `x_adv` and `x`.
    pub fn linf(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.x
                    .row(i)
                    .iter()
                    .zip(self.x_adv.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn concat(parts: &[AdvBatch]) -> Result<AdvBatch> {
        let cat = |f: fn(&AdvBatch) -> &Tensor| Tensor::concat_rows(&parts.iter().map(f).collect::<Vec<_>>());
        let flat = |f: fn(&AdvBatch) -> &Vec<usize>| parts.iter().flat_map(f).copied().collect();
        Ok(AdvBatch {
            x: cat(|b| &b.x)?,
            x_adv: cat(|b| &b.x_adv)?,
            labels: flat(|b| &b.labels),
            clean_pred: flat(|b| &b.clean_pred),
            adv_pred: flat(|b| &b.adv_pred),
            success: parts.iter().flat_map(|b| b.success.iter().copied()).collect(),
        })
    }

    /// Writes `x_adv` in tensor format to `bin` and per-sample rows to `csv`.
    pub fn export(&self, bin: &Path, csv: &Path, header: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(bin).map_err(|e| Error::io(bin, e))?);
        self.x_adv.write_to(&mut f).map_err(|e| Error::io(bin, e))?;
        let mut w = crate::report::csv_writer(csv, header)?;
        w.write_record(["index", "label", "clean_pred", "adv_pred", "linf"])?;
        for (i, d) in self.linf().iter().enumerate() {
            w.write_record([
                i.to_string(),
                self.labels[i].to_string(),
                self.clean_pred[i].to_string(),
                self.adv_pred[i].to_string(),
                format!("{d:.6}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(csv, e))
    }
}

fn sign(v: f64) -> f64 {
    crate::tensor::sign(v)
}

/// Clamps `v` into `[x - eps, x + eps]` and the pixel range.
#[inline]
fn project(v: f64, x: f64, eps: f64, lo: f64, hi: f64) -> f64 {
    v.max(x - eps).min(x + eps).max(lo).min(hi)
}

fn finish(target: &dyn Target, x: &Tensor, x_adv: Tensor, y: &[usize]) -> Result<AdvBatch> {
    let clean_pred = target.predict(x)?;
    let adv_pred = target.predict(&x_adv)?;
    let success = adv_pred.iter().zip(y).map(|(p, t)| p != t).collect();
    Ok(AdvBatch {
        x: x.clone(),
        x_adv,
        labels: y.to_vec(),
        clean_pred,
        adv_pred,
        success,
    })
}

fn check_kind(cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "{} config passed to {}",
            cfg.kind.label(),
            kind.label()
        )));
    }
    Ok(())
}

/// Signed-gradient iterations shared by FGSM, BIM and MIM.
fn iterate_sign(
    target: &dyn Target,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    steps: usize,
    alpha: f64,
    momentum: Option<f64>,
) -> Result<Tensor> {
    let (eps, lo, hi) = (cfg.epsilon, cfg.clip_min, cfg.clip_max);
    let mut cur = x.clone();
    let mut g_acc = vec![0.0; x.len()];
    let w = x.row_len();
    for _ in 0..steps {
        let (_, grad) = target.loss_grad(&cur, y, cfg.loss_mode)?;
        let dir: &[f64] = match momentum {
            None => grad.data(),
            Some(mu) => {
                for i in 0..x.rows() {
                    let g = &grad.data()[i * w..(i + 1) * w];
                    let l1: f64 = g.iter().map(|v| v.abs()).sum();
                    for (acc, &gv) in g_acc[i * w..(i + 1) * w].iter_mut().zip(g) {
                        let normed = if l1 > 0.0 { gv / l1 } else { 0.0 };
                        *acc = mu * *acc + normed;
                    }
                }
                &g_acc
            }
        };
        for ((c, &x0), &d) in cur.data_mut().iter_mut().zip(x.data()).zip(dir) {
            *c = project(*c + alpha * sign(d), x0, eps, lo, hi);
        }
    }
    Ok(cur)
}

/// One step of size epsilon along the gradient sign.
pub fn fgsm(target: &dyn Target, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    check_kind(cfg, AttackKind::Fgsm)?;
    let adv = iterate_sign(target, x, y, cfg, 1, cfg.epsilon, None)?;
    finish(target, x, adv, y)
}

/// `steps` signed steps of `step_size` (default `epsilon / steps`), projected after each.
pub fn bim(target: &dyn Target, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    check_kind(cfg, AttackKind::Bim)?;
    let adv = iterate_sign(target, x, y, cfg, cfg.steps, cfg.step(), None)?;
    finish(target, x, adv, y)
}

/// BIM on the sign of an accumulated, per-sample L1-normalized gradient.
pub fn mim(target: &dyn Target, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    check_kind(cfg, AttackKind::Mim)?;
    let adv = iterate_sign(target, x, y, cfg, cfg.steps, cfg.step(), Some(cfg.decay))?;
    finish(target, x, adv, y)
}

/// Random start in the epsilon-ball, then signed steps projected onto the
/// ball around the original input. With several restarts the first
/// successful one is kept per sample, otherwise the last.
pub fn pgd(target: &dyn Target, x: &Tensor, y: &[usize], cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> Result<AdvBatch> {
    check_kind(cfg, AttackKind::Pgd)?;
    let (eps, lo, hi) = (cfg.epsilon, cfg.clip_min, cfg.clip_max);
    let gamma = cfg.step();
    let mut best: Option<AdvBatch> = None;
    for _ in 0..cfg.restarts {
        let mut cur = x.clone();
        for (c, &x0) in cur.data_mut().iter_mut().zip(x.data()) {
            let u: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            *c = project(x0 + u * eps, x0, eps, lo, hi);
        }
        for _ in 0..cfg.steps {
            let (_, grad) = target.loss_grad(&cur, y, cfg.loss_mode)?;
            for ((c, &x0), &g) in cur.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
                *c = project(*c + gamma * sign(g), x0, eps, lo, hi);
            }
        }
        let run = finish(target, x, cur, y)?;
        best = Some(match best {
            None => run,
            Some(mut b) => {
                let w = x.row_len();
                for i in 0..b.len() {
                    if !b.success[i] {
                        b.x_adv.data_mut()[i * w..(i + 1) * w].copy_from_slice(run.x_adv.row(i));
                        b.adv_pred[i] = run.adv_pred[i];
                        b.success[i] = run.success[i];
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("restarts >= 1"))
}

/// Carlini-Wagner: Adam on `zeta` with `x' = lo + (hi - lo) * (tanh(zeta) + 1) / 2`,
/// minimizing `|x' - x|^2 + c * max(Z_y - max_{j != y} Z_j, -kappa)` per
/// sample. Returns the closest misclassified iterate seen, or the final
/// iterate when none was found.
pub fn cw(target: &dyn Target, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    check_kind(cfg, AttackKind::Cw)?;
    let (lo, hi) = (cfg.clip_min, cfg.clip_max);
    let span = hi - lo;
    let n = x.rows();
    let w = x.row_len();
    const NUDGE: f64 = 1e-6;
    let mut zeta: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let u = ((v - lo) / span).clamp(NUDGE, 1.0 - NUDGE);
            (2.0 * u - 1.0).atanh()
        })
        .collect();
    let to_x = |z: &[f64]| -> Result<Tensor> {
        Tensor::new(
            x.shape().to_vec(),
            z.iter().map(|&v| lo + span * 0.5 * (v.tanh() + 1.0)).collect(),
        )
    };
    let (b1, b2, adam_eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; zeta.len()];
    let mut v = vec![0.0; zeta.len()];
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best = x.clone();
    let mut cur = to_x(&zeta)?;
    for it in 0..=cfg.iters {
        let pred = target.predict(&cur)?;
        for i in 0..n {
            if pred[i] != y[i] {
                let d: f64 = cur.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_dist[i] {
                    best_dist[i] = d;
                    best.data_mut()[i * w..(i + 1) * w].copy_from_slice(cur.row(i));
                }
            }
        }
        if it == cfg.iters {
            break;
        }
        let (_, gf) = target.margin_grad(&cur, y, cfg.kappa)?;
        let t = (it + 1) as i32;
        for j in 0..zeta.len() {
            let th = zeta[j].tanh();
            let dx = 2.0 * (cur.data()[j] - x.data()[j]) + cfg.c * gf.data()[j];
            let g = dx * span * 0.5 * (1.0 - th * th);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            zeta[j] -= cfg.lr * mh / (vh.sqrt() + adam_eps);
        }
        cur = to_x(&zeta)?;
    }
    for i in 0..n {
        if best_dist[i].is_infinite() {
            best.data_mut()[i * w..(i + 1) * w].copy_from_slice(cur.row(i));
        }
    }
    finish(target, x, best, y)
}

/// Runs `cfg` on one batch; `rng` feeds PGD's random start.
pub fn attack_batch(
    target: &dyn Target,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(target, x, y, cfg),
        AttackKind::Bim => bim(target, x, y, cfg),
        AttackKind::Mim => mim(target, x, y, cfg),
        AttackKind::Cw => cw(target, x, y, cfg),
        AttackKind::Pgd => pgd(target, x, y, cfg, rng),
    }
}

/// Attacks `x` in consecutive batches; batch `b` draws from the seed
/// stream `(seed, Attack, b)`, so results do not depend on batch scheduling.
pub fn attack_all(
    target: &dyn Target,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::shape("attack labels", x.shape(), &[y.len()]));
    }
    let bs = batch_size.max(1);
    let mut parts = Vec::new();
    for (b, start) in (0..y.len()).step_by(bs).enumerate() {
        let idx: Vec<usize> = (start..(start + bs).min(y.len())).collect();
        let mut rng = rng_for(seed, Stream::Attack, b as u64);
        parts.push(attack_batch(target, &x.select_rows(&idx), &y[start..start + idx.len()], cfg, &mut rng)?);
    }
    AdvBatch::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L = sum_i w . x_i`, predicting class 1 when `w . x > 0`.
    struct Linear {
        w: Vec<f64>,
        scale: f64,
    }

    impl Target for Linear {
        fn loss_grad(&self, x: &Tensor, _y: &[usize], _m: LossMode) -> Result<(f64, Tensor)> {
            let n = x.rows();
            let mut g = Vec::with_capacity(x.len());
            let mut loss = 0.0;
            for i in 0..n {
                for (a, &b) in x.row(i).iter().zip(&self.w) {
                    loss += self.scale * a * b;
                    g.push(self.scale * b);
                }
            }
            Ok((loss, Tensor::new(x.shape().to_vec(), g)?))
        }

        fn margin_grad(&self, x: &Tensor, y: &[usize], kappa: f64) -> Result<(Vec<f64>, Tensor)> {
            let mut f = Vec::new();
            let mut g = Vec::new();
            for (i, &yi) in y.iter().enumerate() {
                let s: f64 = x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum();
                let m = if yi == 1 { s } else { -s };
                f.push(m.max(-kappa));
                let active = m > -kappa;
                for &wv in &self.w {
                    g.push(if !active { 0.0 } else if yi == 1 { wv } else { -wv });
                }
            }
            Ok((f, Tensor::new(x.shape().to_vec(), g)?))
        }

        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok((0..x.rows())
                .map(|i| {
                    let s: f64 = x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum();
                    usize::from(s > 0.0)
                })
                .collect())
        }
    }

    fn lin(w: &[f64]) -> Linear {
        Linear { w: w.to_vec(), scale: 1.0 }
    }

    #[test]
    fn fgsm_scalar_toy() {
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let adv = fgsm(&lin(&[2.0]), &x, &[0], &AttackConfig::new(AttackKind::Fgsm, 0.1)).unwrap();
        assert!((adv.x_adv.item() - 0.6).abs() < 1e-15);
        let zero = fgsm(&lin(&[2.0]), &x, &[0], &AttackConfig::new(AttackKind::Fgsm, 0.0)).unwrap();
        assert_eq!(zero.x_adv, x);
    }

    #[test]
    fn bim_one_step_is_fgsm() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.95, 0.0, 0.3, 0.7]).unwrap();
        let t = lin(&[1.0, -2.0, 0.5]);
        let f = fgsm(&t, &x, &[0, 1], &AttackConfig::new(AttackKind::Fgsm, 0.2)).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Bim, 0.2);
        cfg.steps = 1;
        let b = bim(&t, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(f.x_adv, b.x_adv);
    }

    #[test]
    fn pgd_zero_eps_is_identity() {
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, 0.0);
        cfg.step_size = Some(0.05);
        let mut rng = rng_for(0, Stream::Attack, 0);
        let out = pgd(&lin(&[1.0, 1.0, -1.0]), &x, &[1], &cfg, &mut rng).unwrap();
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn mim_is_invariant_to_loss_scale() {
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        let cfg = AttackConfig::new(AttackKind::Mim, 0.3);
        let a = mim(&lin(&[1.0, -0.5, 0.1]), &x, &[1], &cfg).unwrap();
        let b = mim(&Linear { w: vec![1.0, -0.5, 0.1], scale: 10.0 }, &x, &[1], &cfg).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }

    #[test]
    fn mim_zero_gradient_does_not_move() {
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Mim, 0.3);
        cfg.decay = 0.0;
        let a = mim(&lin(&[0.0, 0.0]), &x, &[1], &cfg).unwrap();
        assert_eq!(a.x_adv, x);
    }

    #[test]
    fn cw_starts_at_input_and_keeps_misclassified_points() {
        // zeta = 0 maps to the middle of the pixel range.
        assert_eq!(0.5 * (0f64.tanh() + 1.0), 0.5);
        let x = Tensor::new(vec![1, 2], vec![0.7, 0.2]).unwrap();
        // w . x > 0 so the model predicts 1; the label 0 is already wrong.
        let t = lin(&[1.0, 1.0]);
        let mut cfg = AttackConfig::new(AttackKind::Cw, 0.0);
        cfg.iters = 50;
        let (f, _) = t.margin_grad(&x, &[0], 0.0).unwrap();
        assert!(f[0] <= 0.0);
        let out = cw(&t, &x, &[0], &cfg).unwrap();
        assert!(out.success[0]);
        assert!(out.x_adv.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn cw_crosses_the_boundary() {
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.2]).unwrap();
        let t = lin(&[1.0, -1.0]);
        let mut cfg = AttackConfig::new(AttackKind::Cw, 0.0);
        cfg.iters = 300;
        cfg.lr = 0.05;
        let out = cw(&t, &x, &[1], &cfg).unwrap();
        assert!(out.success[0]);
        assert!(out.x_adv.max_abs_diff(&x) < 0.2);
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::new(AttackKind::Bim, -0.1);
        assert!(c.validate().is_err());
        c.epsilon = 0.1;
        c.steps = 0;
        assert!(c.validate().is_err());
        c.steps = 3;
        c.clip_min = 1.0;
        assert!(c.validate().is_err());
        assert!(AttackKind::parse("deepfool").is_err());
        assert_eq!(AttackKind::parse("PGD").unwrap(), AttackKind::Pgd);
        let x = Tensor::zeros(&[1, 1]);
        assert!(fgsm(&lin(&[1.0]), &x, &[0], &AttackConfig::new(AttackKind::Bim, 0.1)).is_err());
    }

    #[test]
    fn config_toml_defaults() {
        let c: AttackConfig = toml::from_str("kind = \"mim\"\nepsilon = 0.2\nloss_mode = \"ce-pc\"").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.decay, 1.0);
        assert_eq!(c.loss_mode, LossMode::CePc);
        assert!((c.step() - 0.02).abs() < 1e-15);
        assert!(toml::from_str::<AttackConfig>("kind = \"pgd\"\nbogus = 1").is_err());
    }
}

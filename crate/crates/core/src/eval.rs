//! Robustness tables, transferability, epsilon sweeps, the
//! gradient-masking checklist, feature-space margin probes and tap
//! ablations.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_all, AttackConfig, AttackKind, Classifier, LossMode, Target};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{dist, PrototypeSet};
use crate::nn::{Model, ModelSpec, TapSpec};
use crate::report::{csv_writer, text_table};
use crate::rng::{rng_for, Stream};
use crate::tensor::Tensor;
use crate::training::{accuracy, train_from, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    White,
    Black,
    Adaptive,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::White => "white",
            Setting::Black => "black",
            Setting::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub variant: String,
    pub kind: AttackKind,
    pub setting: Setting,
    /// Epsilon, or `c` for C&W.
    pub strength: f64,
    pub correct: usize,
    pub n: usize,
}

impl RobustnessRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    /// Clean accuracy per variant, in insertion order.
    pub clean: Vec<(String, f64)>,
}

impl RobustnessReport {
    pub fn extend(&mut self, other: RobustnessReport) {
        self.rows.extend(other.rows);
        for c in other.clean {
            if !self.clean.iter().any(|(v, _)| *v == c.0) {
                self.clean.push(c);
            }
        }
    }

    pub fn find(&self, variant: &str, kind: AttackKind, setting: Setting) -> Option<&RobustnessRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.kind == kind && r.setting == setting)
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = csv_writer(path, header)?;
        w.write_record(["variant", "attack", "setting", "strength", "correct", "n", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.kind.label().to_string(),
                r.setting.label().to_string(),
                r.strength.to_string(),
                r.correct.to_string(),
                r.n.to_string(),
                format!("{:.4}", r.accuracy()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One line per (variant, setting); one column per attack, accuracy in percent.
    pub fn to_text(&self) -> String {
        let mut kinds: Vec<(AttackKind, f64)> = Vec::new();
        for r in &self.rows {
            if !kinds.contains(&(r.kind, r.strength)) {
                kinds.push((r.kind, r.strength));
            }
        }
        let mut head = vec!["Training".to_string(), "Clean".to_string(), "Setting".to_string()];
        head.extend(kinds.iter().map(|(k, s)| {
            let sym = if *k == AttackKind::Cw { "c" } else { "eps" };
            format!("{}({sym}={s})", k.label())
        }));
        let mut keys: Vec<(String, Setting)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.variant.clone(), r.setting)) {
                keys.push((r.variant.clone(), r.setting));
            }
        }
        let rows: Vec<Vec<String>> = keys
            .iter()
            .map(|(v, s)| {
                let clean = self
                    .clean
                    .iter()
                    .find(|(name, _)| name == v)
                    .map(|(_, a)| format!("{:.1}", 100.0 * a))
                    .unwrap_or_else(|| "-".into());
                let mut row = vec![v.clone(), clean, s.label().to_string()];
                row.extend(kinds.iter().map(|&(k, st)| {
                    self.rows
                        .iter()
                        .find(|r| &r.variant == v && r.setting == *s && r.kind == k && r.strength == st)
                        .map(|r| format!("{:.1}", 100.0 * r.accuracy()))
                        .unwrap_or_else(|| "-".into())
                }));
                row
            })
            .collect();
        text_table(&head, &rows)
    }
}

fn correct_count(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, t)| p == t).count()
}

/// Accuracy of `target` under each attack in `attacks`.
///
/// White uses the target's own gradients; adaptive additionally switches
/// the attack loss to CE+PC; black crafts on `source` and only evaluates on
/// the target. Attacks are seeded with `seed` so equal configs give equal rows.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_robustness(
    variant: &str,
    target: &Classifier,
    attacks: &[AttackConfig],
    data: &Dataset,
    setting: Setting,
    source: Option<&Classifier>,
    batch_size: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if setting == Setting::Black && source.is_none() {
        return Err(Error::Config("black-box evaluation needs a source model".into()));
    }
    let clean = correct_count(&target.predict(&data.images)?, &data.labels) as f64 / data.len() as f64;
    let mut rows = Vec::with_capacity(attacks.len());
    for cfg in attacks {
        let mut cfg = cfg.clone();
        if setting == Setting::Adaptive {
            cfg.loss_mode = LossMode::CePc;
        }
        let pred = match (setting, source) {
            (Setting::Black, Some(src)) => {
                let adv = attack_all(src, &data.images, &data.labels, &cfg, batch_size, seed)?;
                target.predict(&adv.x_adv)?
            }
            _ => attack_all(target, &data.images, &data.labels, &cfg, batch_size, seed)?.adv_pred,
        };
        rows.push(RobustnessRow {
            variant: variant.to_string(),
            kind: cfg.kind,
            setting,
            strength: cfg.strength(),
            correct: correct_count(&pred, &data.labels),
            n: data.len(),
        });
    }
    Ok(RobustnessReport {
        rows,
        clean: vec![(variant.to_string(), clean)],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    /// `acc[s][t]`: accuracy of model `t` on examples crafted on model `s`.
    pub acc: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = csv_writer(path, header)?;
        let mut head = vec!["source".to_string()];
        head.extend(self.names.iter().cloned());
        w.write_record(&head)?;
        for (s, row) in self.acc.iter().enumerate() {
            let mut rec = vec![self.names[s].clone()];
            rec.extend(row.iter().map(|a| format!("{a:.4}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut head = vec!["source \\ target".to_string()];
        head.extend(self.names.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .acc
            .iter()
            .enumerate()
            .map(|(s, row)| {
                let mut r = vec![self.names[s].clone()];
                r.extend(row.iter().map(|a| format!("{:.1}", 100.0 * a)));
                r
            })
            .collect();
        text_table(&head, &rows)
    }
}

pub fn transfer_matrix(
    models: &[(String, Classifier)],
    cfg: &AttackConfig,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "transfer matrix needs at least 2 models, got {}",
            models.len()
        )));
    }
    let mut acc = Vec::with_capacity(models.len());
    for (_, src) in models {
        let adv = attack_all(src, &data.images, &data.labels, cfg, batch_size, seed)?;
        let row = models
            .iter()
            .map(|(_, t)| Ok(correct_count(&t.predict(&adv.x_adv)?, &data.labels) as f64 / data.len() as f64))
            .collect::<Result<Vec<_>>>()?;
        acc.push(row);
    }
    Ok(TransferMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        acc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub grid: Vec<f64>,
    /// `(kind, accuracy per grid point)`.
    pub curves: Vec<(AttackKind, Vec<f64>)>,
}

impl SweepReport {
    pub fn curve(&self, kind: AttackKind) -> Option<&[f64]> {
        self.curves.iter().find(|(k, _)| *k == kind).map(|(_, c)| c.as_slice())
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = csv_writer(path, header)?;
        w.write_record(["attack", "epsilon", "accuracy"])?;
        for (k, c) in &self.curves {
            for (e, a) in self.grid.iter().zip(c) {
                w.write_record([k.label().to_string(), e.to_string(), format!("{a:.4}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut head = vec!["attack".to_string()];
        head.extend(self.grid.iter().map(|e| format!("eps={e}")));
        let rows: Vec<Vec<String>> = self
            .curves
            .iter()
            .map(|(k, c)| {
                let mut r = vec![k.label().to_string()];
                r.extend(c.iter().map(|a| format!("{:.1}", 100.0 * a)));
                r
            })
            .collect();
        text_table(&head, &rows)
    }
}

/// White-box accuracy for each kind at each epsilon of `grid`.
/// `base` supplies every setting except kind and epsilon.
pub fn epsilon_sweep(
    target: &Classifier,
    kinds: &[AttackKind],
    grid: &[f64],
    base: &AttackConfig,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<SweepReport> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "epsilon grid must start at 0 and increase strictly, got {grid:?}"
        )));
    }
    if kinds.contains(&AttackKind::Cw) {
        return Err(Error::Config("C&W has no epsilon budget; sweep it over c instead".into()));
    }
    let mut curves = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut curve = Vec::with_capacity(grid.len());
        for &eps in grid {
            let cfg = AttackConfig {
                kind,
                epsilon: eps,
                ..base.clone()
            };
            let adv = attack_all(target, &data.images, &data.labels, &cfg, batch_size, seed)?;
            curve.push(correct_count(&adv.adv_pred, &data.labels) as f64 / data.len() as f64);
        }
        curves.push((kind, curve));
    }
    Ok(SweepReport {
        grid: grid.to_vec(),
        curves,
    })
}

/// Largest rise between consecutive points of a curve (0 when non-increasing).
pub fn max_rise(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Thresholds for [`masking_checklist`].
#[derive(Debug, Clone, Copy)]
pub struct MaskingTolerance {
    /// Allowed rise of a sweep curve, and allowed iterative-over-FGSM excess, in accuracy units.
    pub noise: f64,
    /// Accuracy the strongest sweep point must fall below.
    pub floor: f64,
}

impl Default for MaskingTolerance {
    fn default() -> Self {
        MaskingTolerance { noise: 0.02, floor: 0.05 }
    }
}

/// The three obfuscated-gradient sanity checks:
/// (a) iterative attacks are at least as strong as FGSM,
/// (b) white-box accuracy does not exceed black-box accuracy,
/// (c) the sweep declines monotonically to near zero.
pub fn masking_checklist(
    report: &RobustnessReport,
    variant: &str,
    sweep: &SweepReport,
    tol: MaskingTolerance,
) -> Vec<CheckLine> {
    let mut out = Vec::new();

    let mut worst = f64::NEG_INFINITY;
    let mut detail = Vec::new();
    if let Some(fgsm) = sweep.curve(AttackKind::Fgsm) {
        for (kind, curve) in sweep.curves.iter().filter(|(k, _)| k.is_iterative()) {
            for (i, (&a, &f)) in curve.iter().zip(fgsm).enumerate().skip(1) {
                worst = worst.max(a - f);
                if a > f + tol.noise {
                    detail.push(format!("{} {:.1} > FGSM {:.1} at eps={}", kind.label(), 100.0 * a, 100.0 * f, sweep.grid[i]));
                }
            }
        }
    }
    out.push(CheckLine {
        name: "iterative attacks at or below FGSM".into(),
        pass: worst.is_finite() && detail.is_empty(),
        detail: if !worst.is_finite() {
            "sweep lacks FGSM or an iterative attack".into()
        } else if detail.is_empty() {
            format!("max excess {:.1} points", 100.0 * worst.max(0.0))
        } else {
            detail.join("; ")
        },
    });

    let mut pairs = 0;
    let mut bad = Vec::new();
    for w in report.rows.iter().filter(|r| r.variant == variant && r.setting == Setting::White) {
        if let Some(b) = report
            .rows
            .iter()
            .find(|r| r.variant == variant && r.setting == Setting::Black && r.kind == w.kind && r.strength == w.strength)
        {
            pairs += 1;
            if w.accuracy() > b.accuracy() {
                bad.push(format!("{} white {:.1} > black {:.1}", w.kind.label(), 100.0 * w.accuracy(), 100.0 * b.accuracy()));
            }
        }
    }
    out.push(CheckLine {
        name: "white-box accuracy <= black-box accuracy".into(),
        pass: pairs > 0 && bad.is_empty(),
        detail: if pairs == 0 {
            "no matching white/black rows".into()
        } else if bad.is_empty() {
            format!("{pairs} attack pairs hold")
        } else {
            bad.join("; ")
        },
    });

    let mut bad = Vec::new();
    for (kind, curve) in &sweep.curves {
        let rise = max_rise(curve);
        let last = *curve.last().unwrap_or(&1.0);
        if rise > tol.noise {
            bad.push(format!("{} rises {:.1} points", kind.label(), 100.0 * rise));
        }
        if last >= tol.floor {
            bad.push(format!(
                "{} still {:.1}% at eps={}",
                kind.label(),
                100.0 * last,
                sweep.grid.last().unwrap_or(&0.0)
            ));
        }
    }
    out.push(CheckLine {
        name: "sweep declines monotonically to near zero".into(),
        pass: !sweep.curves.is_empty() && bad.is_empty(),
        detail: if bad.is_empty() {
            format!(
                "final accuracies {}",
                sweep
                    .curves
                    .iter()
                    .map(|(k, c)| format!("{} {:.1}%", k.label(), 100.0 * c.last().unwrap_or(&0.0)))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        } else {
            bad.join("; ")
        },
    });
    out
}

/// Sampled feature-space geometry at the deepest tap.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginProbe {
    pub epsilon: f64,
    pub classes: Vec<usize>,
    /// Per class: largest feature displacement seen under random perturbation.
    pub lambda: Vec<f64>,
    /// Per class: smallest feature distance from a class member to any other-class sample.
    pub class_margin: Vec<f64>,
    /// Smallest feature distance between any two different-class samples.
    pub margin: f64,
}

impl MarginProbe {
    /// `m <= 2 lambda` per class.
    pub fn overlap(&self) -> Vec<bool> {
        self.class_margin.iter().zip(&self.lambda).map(|(m, l)| *m <= 2.0 * l).collect()
    }

    /// Mean over classes of `m_c / (2 lambda_c)`; infinite when some lambda is zero.
    pub fn ratio(&self) -> f64 {
        let r: Vec<f64> = self
            .class_margin
            .iter()
            .zip(&self.lambda)
            .map(|(m, l)| if *l > 0.0 { m / (2.0 * l) } else { f64::INFINITY })
            .collect();
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = csv_writer(path, header)?;
        w.write_record(["class", "epsilon", "lambda", "class_margin", "overlap"])?;
        for (i, c) in self.classes.iter().enumerate() {
            w.write_record([
                c.to_string(),
                self.epsilon.to_string(),
                format!("{:.6}", self.lambda[i]),
                format!("{:.6}", self.class_margin[i]),
                self.overlap()[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Deepest-tap features of every row of `x`.
fn deepest_features(model: &Model, x: &Tensor) -> Result<Tensor> {
    let (_, taps) = model.infer(x, 256)?;
    taps.into_iter()
        .last()
        .ok_or_else(|| Error::Config(format!("model {} has no taps to probe", model.spec().name)))
}

/// Estimates the per-class polytope radius by drawing `n_draws` uniform
/// perturbations in the L-infinity ball (clipped to [0, 1]) per sample. A
/// random-sampling lower bound on the true radius, not an exact polytope.
pub fn margin_probe(model: &Model, sample: &Dataset, epsilon: f64, n_draws: usize, seed: u64) -> Result<MarginProbe> {
    if n_draws < 100 {
        return Err(Error::Config(format!("margin probe needs n_draws >= 100, got {n_draws}")));
    }
    let classes: Vec<usize> = sample.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Config("margin probe needs samples from at least 2 classes".into()));
    }
    let feats = deepest_features(model, &sample.images)?;
    let mut lambda = vec![0.0f64; classes.len()];
    let slot = |c: usize| classes.binary_search(&c).expect("class present");
    if epsilon > 0.0 {
        let w = sample.images.row_len();
        for i in 0..sample.len() {
            let mut rng = rng_for(seed, Stream::Probe, i as u64);
            let base = sample.images.row(i);
            let mut pert = Vec::with_capacity(n_draws * w);
            for _ in 0..n_draws {
                pert.extend(base.iter().map(|&v| (v + epsilon * (rng.gen::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0)));
            }
            let mut shape = sample.images.shape().to_vec();
            shape[0] = n_draws;
            let f = deepest_features(model, &Tensor::new(shape, pert)?)?;
            let reach = (0..n_draws).map(|d| dist(f.row(d), feats.row(i))).fold(0.0, f64::max);
            let s = slot(sample.labels[i]);
            lambda[s] = lambda[s].max(reach);
        }
    }
    let mut class_margin = vec![f64::INFINITY; classes.len()];
    for i in 0..sample.len() {
        for j in 0..sample.len() {
            if sample.labels[i] != sample.labels[j] {
                let d = dist(feats.row(i), feats.row(j));
                let s = slot(sample.labels[i]);
                class_margin[s] = class_margin[s].min(d);
            }
        }
    }
    let margin = class_margin.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MarginProbe {
        epsilon,
        classes,
        lambda,
        class_margin,
        margin,
    })
}

/// Per-class deterministic sample of up to `per_class` members.
pub fn stratified_sample(data: &Dataset, per_class: usize) -> Dataset {
    let mut idx = Vec::new();
    for c in 0..data.num_classes {
        idx.extend(data.labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).take(per_class));
    }
    idx.sort_unstable();
    data.take(&idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub taps: Vec<usize>,
    pub label: String,
    pub clean: f64,
    /// Accuracy under each configured attack, in order.
    pub attacked: Vec<f64>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub attacks: Vec<AttackConfig>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut head = vec!["L_PC at".to_string(), "Clean".to_string()];
        head.extend(self.attacks.iter().map(|a| format!("{}(eps={})", a.kind.label(), a.epsilon)));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.label.clone(), format!("{:.1}", 100.0 * r.clean)];
                v.extend(r.attacked.iter().map(|a| format!("{:.1}", 100.0 * a)));
                v
            })
            .collect();
        text_table(&head, &rows)
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = csv_writer(path, header)?;
        let mut head = vec!["taps".to_string(), "clean".to_string()];
        head.extend(self.attacks.iter().map(|a| format!("{}_{}", a.kind.label(), a.epsilon)));
        w.write_record(&head)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), format!("{:.4}", r.clean)];
            rec.extend(r.attacked.iter().map(|a| format!("{a:.4}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Every subset of `n` taps, smallest first.
pub fn all_tap_subsets(n: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (0u32..1 << n)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    subsets
}

pub fn subset_label(spec: &ModelSpec, subset: &[usize]) -> String {
    if subset.is_empty() {
        "None".into()
    } else {
        subset
            .iter()
            .map(|&t| format!("L{}", spec.taps[t].layer))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Trains one model per tap subset of `spec` with a shared seed and
/// schedule, then reports clean and attacked accuracy on `eval`.
///
/// `warm` may supply a model already trained through the CE warm-up with
/// the same seed; the warm-up does not touch tap parameters, so it is
/// shared by every subset whose taps add no parameters.
#[allow(clippy::too_many_arguments)]
pub fn layer_ablation(
    spec: &ModelSpec,
    subsets: &[Vec<usize>],
    train_data: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    attacks: &[AttackConfig],
    warm: Option<&Model>,
    seed: u64,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        if let Some(&bad) = subset.iter().find(|&&t| t >= spec.taps.len()) {
            return Err(Error::Config(format!("ablation tap {bad} not in spec ({} taps)", spec.taps.len())));
        }
        let taps: Vec<TapSpec> = subset.iter().map(|&t| spec.taps[t].clone()).collect();
        let sub = spec.with_taps(taps);
        let fresh = Model::build(sub.clone(), seed)?;
        let (model, start) = match warm {
            Some(w) if w.params().len() == fresh.params().len() => {
                (Model::from_params(sub.clone(), w.params().to_vec())?, cfg.warmup_epochs)
            }
            _ => (fresh, 0),
        };
        let protos = PrototypeSet::for_model(&model, seed)?;
        let (model, protos, _) = train_from(model, protos, train_data, cfg, start, &mut |_| {})?;
        let clf = Classifier::new(&model, Some(&protos));
        let attacked = attacks
            .iter()
            .map(|a| {
                let adv = attack_all(&clf, &eval.images, &eval.labels, a, 100, seed)?;
                Ok(correct_count(&adv.adv_pred, &eval.labels) as f64 / eval.len() as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            taps: subset.clone(),
            label: subset_label(spec, subset),
            clean: accuracy(&model, eval)?,
            attacked,
            checksum: model.checksum(),
        });
    }
    Ok(AblationTable {
        attacks: attacks.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn toy() -> (Model, PrototypeSet, Dataset) {
        let data = synth_blobs(3, 8, &[4], 0.05, 3).unwrap();
        let model = Model::build(ModelSpec::mlp(&[4], &[6, 3], 3), 1).unwrap();
        let protos = PrototypeSet::for_model(&model, 1).unwrap();
        (model, protos, data)
    }

    #[test]
    fn zero_epsilon_rows_equal_clean_accuracy() {
        let (m, p, d) = toy();
        let clf = Classifier::new(&m, Some(&p));
        let attacks: Vec<_> = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::Pgd]
            .iter()
            .map(|&k| AttackConfig::new(k, 0.0))
            .collect();
        let r = evaluate_robustness("toy", &clf, &attacks, &d, Setting::White, None, 5, 0).unwrap();
        let clean = r.clean[0].1;
        assert!(r.rows.iter().all(|row| row.accuracy() == clean));
        assert_eq!(r.rows.len(), 4);
    }

    #[test]
    fn black_box_needs_source() {
        let (m, p, d) = toy();
        let clf = Classifier::new(&m, Some(&p));
        let err = evaluate_robustness("toy", &clf, &[AttackConfig::default()], &d, Setting::Black, None, 8, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn transfer_needs_two_models_and_diagonal_is_white_box() {
        let (m, p, d) = toy();
        let other = Model::build(m.spec().clone(), 9).unwrap();
        let a = Classifier::new(&m, Some(&p));
        let b = Classifier::new(&other, None);
        let cfg = AttackConfig::new(AttackKind::Pgd, 0.2);
        assert!(transfer_matrix(&[("a".into(), a)], &cfg, &d, 8, 0).is_err());
        let t = transfer_matrix(&[("a".into(), a), ("b".into(), b)], &cfg, &d, 8, 4).unwrap();
        assert_eq!(t.acc.len(), 2);
        assert!(t.acc.iter().all(|r| r.len() == 2));
        let white = evaluate_robustness("a", &a, &[cfg], &d, Setting::White, None, 8, 4).unwrap();
        assert_eq!(t.acc[0][0], white.rows[0].accuracy());
    }

    #[test]
    fn sweep_shape_and_grid_checks() {
        let (m, p, d) = toy();
        let clf = Classifier::new(&m, Some(&p));
        let kinds = [AttackKind::Fgsm, AttackKind::Pgd];
        let grid = [0.0, 0.1, 0.3];
        let s = epsilon_sweep(&clf, &kinds, &grid, &AttackConfig::default(), &d, 8, 0).unwrap();
        assert_eq!(s.curves.len() * s.grid.len(), 6);
        let clean = accuracy(&m, &d).unwrap();
        assert!(s.curves.iter().all(|(_, c)| c[0] == clean));
        assert!(epsilon_sweep(&clf, &kinds, &[0.1, 0.2], &AttackConfig::default(), &d, 8, 0).is_err());
        assert!(epsilon_sweep(&clf, &kinds, &[0.0, 0.2, 0.2], &AttackConfig::default(), &d, 8, 0).is_err());
    }

    #[test]
    fn probe_zero_epsilon_and_degenerate_margin() {
        let (m, _, d) = toy();
        let probe = margin_probe(&m, &d, 0.0, 100, 0).unwrap();
        assert!(probe.lambda.iter().all(|&l| l == 0.0));
        assert!(margin_probe(&m, &d, 0.1, 10, 0).is_err());
        let one = d.take(&[0]);
        assert!(margin_probe(&m, &one, 0.1, 100, 0).is_err());

        let mut twin = d.take(&[0, 1]);
        let row = twin.images.row(0).to_vec();
        twin.images.data_mut()[4..8].copy_from_slice(&row);
        twin.labels = vec![0, 1];
        let p = margin_probe(&m, &twin, 0.1, 100, 0).unwrap();
        assert_eq!(p.margin, 0.0);
        assert!(p.overlap().iter().all(|&o| o));
    }

    #[test]
    fn max_rise_and_subsets() {
        assert_eq!(max_rise(&[0.9, 0.5, 0.52, 0.1]), 0.020000000000000018);
        assert_eq!(max_rise(&[0.9, 0.5]), 0.0);
        let s = all_tap_subsets(3);
        assert_eq!(s.len(), 8);
        assert!(s[0].is_empty());
        assert_eq!(s[7], vec![0, 1, 2]);
    }

    #[test]
    fn checklist_flags_violations() {
        let row = |setting, correct| RobustnessRow {
            variant: "v".into(),
            kind: AttackKind::Pgd,
            setting,
            strength: 0.3,
            correct,
            n: 100,
        };
        let report = RobustnessReport {
            rows: vec![row(Setting::White, 40), row(Setting::Black, 30)],
            clean: vec![],
        };
        let sweep = SweepReport {
            grid: vec![0.0, 0.3, 0.6],
            curves: vec![(AttackKind::Fgsm, vec![0.99, 0.5, 0.2]), (AttackKind::Pgd, vec![0.99, 0.6, 0.01])],
        };
        let lines = masking_checklist(&report, "v", &sweep, MaskingTolerance::default());
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| !l.pass), "{lines:?}");
    }

    #[test]
    fn ablation_none_row_matches_ce_only_training() {
        let data = synth_blobs(3, 10, &[4], 0.05, 3).unwrap();
        let spec = ModelSpec::mlp(&[4], &[6, 3], 3);
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 8,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let attacks = [AttackConfig::new(AttackKind::Fgsm, 0.1)];
        let t = layer_ablation(&spec, &all_tap_subsets(2), &data, &data, &cfg, &attacks, None, 7).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].label, "None");

        let ce_cfg = TrainConfig { warmup_epochs: 2, ..cfg };
        let model = Model::build(spec.clone(), 7).unwrap();
        let protos = PrototypeSet::for_model(&model, 7).unwrap();
        let (ce, _, _) = crate::training::train(model, protos, &data, &ce_cfg, &mut |_| {}).unwrap();
        assert_eq!(ce.checksum(), t.rows[0].checksum);
    }
}

//! Cross-entropy, the prototype conformity loss, their deeply supervised
//! sum, and nearest-prototype classification.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelOutput};
use crate::rng::{rng_for, Stream};
use crate::tensor::{Tape, Tensor, Var};

/// Trainable class centroids, one `[k, d_l]` matrix per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    centroids: Vec<Tensor>,
}

impl PrototypeSet {
    /// i.i.d. standard normal centroids.
    pub fn init(num_classes: usize, tap_dims: &[usize], seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("prototypes need k >= 2, got {num_classes}")));
        }
        let centroids = tap_dims
            .iter()
            .enumerate()
            .map(|(t, &d)| {
                let mut rng = rng_for(seed, Stream::PrototypeInit, t as u64);
                let data = (0..num_classes * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::new(vec![num_classes, d], data)
            })
            .collect::<Result<_>>()?;
        Ok(PrototypeSet { centroids })
    }

    pub fn for_model(model: &Model, seed: u64) -> Result<Self> {
        Self::init(model.num_classes(), model.tap_dims(), seed)
    }

    pub fn from_centroids(centroids: Vec<Tensor>) -> Result<Self> {
        let k = centroids.first().map(|c| c.shape()[0]);
        for c in &centroids {
            if c.rank() != 2 || Some(c.shape()[0]) != k {
                return Err(Error::Config(format!("bad centroid matrix shape {:?}", c.shape())));
            }
        }
        Ok(PrototypeSet { centroids })
    }

    pub fn centroids(&self) -> &[Tensor] {
        &self.centroids
    }

    pub fn centroids_mut(&mut self) -> &mut [Tensor] {
        &mut self.centroids
    }

    pub fn num_taps(&self) -> usize {
        self.centroids.len()
    }

    /// Errors unless there is one `[k, d_l]` set per model tap.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let dims = model.tap_dims();
        if dims.len() != self.centroids.len() {
            return Err(Error::Config(format!(
                "model has {} taps but {} prototype sets were given",
                dims.len(),
                self.centroids.len()
            )));
        }
        for (c, &d) in self.centroids.iter().zip(dims) {
            if c.shape() != [model.num_classes(), d] {
                return Err(Error::shape("prototypes", &[model.num_classes(), d], c.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.centroids.iter().map(|c| tape.leaf(c.clone(), trainable)).collect()
    }

    /// Mean Euclidean distance over distinct centroid pairs at one tap.
    pub fn mean_pairwise_distance(&self, tap: usize) -> f64 {
        let c = &self.centroids[tap];
        let k = c.rows();
        let mut total = 0.0;
        for a in 0..k {
            for b in a + 1..k {
                total += dist(c.row(a), c.row(b));
            }
        }
        total / (k * (k - 1) / 2) as f64
    }

    /// Nearest centroid at the deepest tap.
    pub fn predict(&self, taps: &[Tensor]) -> Result<Vec<usize>> {
        let (f, c) = match (taps.last(), self.centroids.last()) {
            (Some(f), Some(c)) => (f, c),
            _ => return Err(Error::Config("prototype prediction needs at least one tap".into())),
        };
        predict_prototype(f, c)
    }

    /// One row per `(tap, class, dim, value)`.
    pub fn export_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = crate::report::csv_writer(path, header)?;
        w.write_record(["tap", "class", "dim", "value"])?;
        for (t, c) in self.centroids.iter().enumerate() {
            for class in 0..c.rows() {
                for (d, v) in c.row(class).iter().enumerate() {
                    w.write_record([t.to_string(), class.to_string(), d.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(logits).get(1).copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let ls = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Batch mean of `|f_i - w_y| - 1/(k-1) * sum_{j != y} (|f_i - w_j| + |w_y - w_j|)`.
pub fn prototype_conformity(tape: &mut Tape, features: Var, labels: &[usize], centroids: Var) -> Result<Var> {
    let cs = tape.shape(centroids).to_vec();
    let fs = tape.shape(features).to_vec();
    if cs.len() != 2 || fs.len() != 2 || cs[1] != fs[1] || fs[0] != labels.len() {
        return Err(Error::shape("prototype_conformity", &fs, &cs));
    }
    let (n, k) = (fs[0], cs[0]);
    if k < 2 {
        return Err(Error::Config("prototype conformity needs k >= 2".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let push = -1.0 / (k - 1) as f64;
    let inv_n = 1.0 / n as f64;

    let mut mask = vec![push * inv_n; n * k];
    let mut per_class = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = inv_n;
        per_class[y] += 1;
    }
    let mut cmask = vec![0.0; k * k];
    for (c, &cnt) in per_class.iter().enumerate() {
        for j in (0..k).filter(|&j| j != c) {
            cmask[c * k + j] = push * cnt as f64 * inv_n;
        }
    }

    let d = tape.pairwise_dist(features, centroids)?;
    let m = tape.constant(Tensor::new(vec![n, k], mask)?);
    let fd = tape.mul(d, m)?;
    let feature_term = tape.sum(fd);

    let dw = tape.pairwise_dist(centroids, centroids)?;
    let cm = tape.constant(Tensor::new(vec![k, k], cmask)?);
    let cd = tape.mul(dw, cm)?;
    let centroid_term = tape.sum(cd);
    tape.add(feature_term, centroid_term)
}

/// Scalar loss values of one joint evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub pc_per_tap: Vec<f64>,
}

/// CE on the logits plus a weighted conformity term at each tap.
/// `weights` defaults to all ones when empty.
pub fn joint_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    labels: &[usize],
    centroids: &[Var],
    weights: &[f64],
) -> Result<(Var, LossBreakdown)> {
    if centroids.len() != out.taps.len() {
        return Err(Error::Config(format!(
            "{} taps but {} prototype sets",
            out.taps.len(),
            centroids.len()
        )));
    }
    if !weights.is_empty() && weights.len() != centroids.len() {
        return Err(Error::Config(format!(
            "{} loss weights for {} taps",
            weights.len(),
            centroids.len()
        )));
    }
    let mut total = cross_entropy(tape, out.logits, labels)?;
    let ce = tape.value(total).item();
    let mut sum = ce;
    let mut pc_per_tap = Vec::with_capacity(centroids.len());
    for (t, (&f, &c)) in out.taps.iter().zip(centroids).enumerate() {
        let mut pc = prototype_conformity(tape, f, labels, c)?;
        if let Some(&w) = weights.get(t) {
            if w != 1.0 {
                pc = tape.scale(pc, w);
            }
        }
        let v = tape.value(pc).item();
        pc_per_tap.push(v);
        sum += v;
        total = tape.add(total, pc)?;
    }
    debug_assert!(sum.is_nan() || sum == tape.value(total).item());
    Ok((
        total,
        LossBreakdown {
            total: tape.value(total).item(),
            ce,
            pc_per_tap,
        },
    ))
}

/// `argmin_j |f_i - w_j|`; ties go to the lowest class.
pub fn predict_prototype(features: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    if features.rank() != 2 || centroids.rank() != 2 || features.shape()[1] != centroids.shape()[1] {
        return Err(Error::shape("predict_prototype", features.shape(), centroids.shape()));
    }
    Ok((0..features.rows())
        .map(|i| {
            let f = features.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..centroids.rows() {
                let d = dist(f, centroids.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

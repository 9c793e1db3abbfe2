//! Central finite-difference checks for every differentiable tape op and
//! both losses.
//!
//! Each case maps a handful of random inputs to a scalar (non-scalar ops
//! are contracted against a fixed random weight tensor), then compares the
//! tape's gradients with `(f(x+h) - f(x-h)) / 2h` for every input element.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cross_entropy, joint_loss, prototype_conformity};
use crate::nn::{LayerSpec, Model, ModelSpec, TapSpec};
use crate::rng::{rng_for, Stream};
use crate::tensor::{Norm, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error, so that exact zeros compare absolutely.
const FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

fn eval(case: &Case, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Largest per-element `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn check(case: &Case) -> Result<CaseResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = case.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v);
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(case, &probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(case, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(CaseResult {
        name: case.name,
        max_rel_err: worst,
        checked,
    })
}

/// Values with magnitude in [0.1, 1] and random sign, away from every kink.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).expect("shape")
}

/// Shuffled distinct values 0.01 apart, so max/argmax ops have no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(y * r)` for a fixed weight tensor `r`.
fn contract(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

macro_rules! case {
    ($name:expr, [$($input:expr),*], $r:expr, |$t:ident, $v:ident| $body:expr) => {{
        let r: Tensor = $r;
        Case {
            name: $name,
            inputs: vec![$($input),*],
            build: Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body;
                contract($t, y, &r)
            }),
        }
    }};
}

/// Every case, with inputs drawn from `seed`.
pub fn suite(seed: u64) -> Vec<Case> {
    let mut rng = rng_for(seed, Stream::Probe, 0xfd);
    let g = &mut rng;
    let mut cases = vec![
        case!("matmul", [signed(g, &[3, 3]), signed(g, &[3, 3])], signed(g, &[3, 3]), |t, v| t.matmul(v[0], v[1])?),
        case!("add", [signed(g, &[2, 3]), signed(g, &[2, 3])], signed(g, &[2, 3]), |t, v| t.add(v[0], v[1])?),
        case!("sub", [signed(g, &[2, 3]), signed(g, &[2, 3])], signed(g, &[2, 3]), |t, v| t.sub(v[0], v[1])?),
        case!("mul", [signed(g, &[2, 3]), signed(g, &[2, 3])], signed(g, &[2, 3]), |t, v| t.mul(v[0], v[1])?),
        case!("scale", [signed(g, &[4])], signed(g, &[4]), |t, v| t.scale(v[0], -1.7)),
        case!("add_scalar", [signed(g, &[4])], signed(g, &[4]), |t, v| t.add_scalar(v[0], 0.3)),
        case!("add_bias_rows", [signed(g, &[3, 4]), signed(g, &[4])], signed(g, &[3, 4]), |t, v| t
            .add_bias(v[0], v[1])?),
        case!("add_bias_channels", [signed(g, &[2, 3, 2, 2]), signed(g, &[3])], signed(g, &[2, 3, 2, 2]), |t, v| t
            .add_bias(v[0], v[1])?),
        case!("relu", [signed(g, &[2, 5])], signed(g, &[2, 5]), |t, v| t.relu(v[0])),
        case!("prelu", [signed(g, &[2, 3, 2, 2]), signed(g, &[3])], signed(g, &[2, 3, 2, 2]), |t, v| t
            .prelu(v[0], v[1])?),
        case!("tanh", [signed(g, &[6])], signed(g, &[6]), |t, v| t.tanh(v[0])),
        case!("exp", [signed(g, &[6])], signed(g, &[6]), |t, v| t.exp(v[0])),
        case!("log", [positive(g, &[6])], signed(g, &[6]), |t, v| t.log(v[0])?),
        case!("sign", [signed(g, &[6])], signed(g, &[6]), |t, v| t.sign(v[0])),
        case!("max_pool2d", [distinct(g, &[2, 2, 4, 5])], signed(g, &[2, 2, 2, 2]), |t, v| t.max_pool2d(v[0])?),
        case!("global_avg_pool", [signed(g, &[2, 3, 3, 2])], signed(g, &[2, 3]), |t, v| t.global_avg_pool(v[0])?),
        case!("softmax_axis1", [signed(g, &[3, 4])], signed(g, &[3, 4]), |t, v| t.softmax(v[0], 1)?),
        case!("softmax_axis0", [signed(g, &[3, 4])], signed(g, &[3, 4]), |t, v| t.softmax(v[0], 0)?),
        case!("log_softmax", [signed(g, &[3, 4])], signed(g, &[3, 4]), |t, v| t.log_softmax(v[0], 1)?),
        case!("norm_l1", [signed(g, &[2, 3])], Tensor::scalar(1.3), |t, v| t.norm_p(v[0], Norm::L1)),
        case!("norm_l2", [signed(g, &[2, 3])], Tensor::scalar(1.3), |t, v| t.norm_p(v[0], Norm::L2)),
        case!("norm_linf", [distinct(g, &[2, 3])], Tensor::scalar(1.3), |t, v| t.norm_p(v[0], Norm::LInf)),
        case!("sum", [signed(g, &[2, 3])], Tensor::scalar(0.7), |t, v| t.sum(v[0])),
        case!("mean", [signed(g, &[2, 3])], Tensor::scalar(0.7), |t, v| t.mean(v[0])),
        case!("reshape", [signed(g, &[2, 3])], signed(g, &[3, 2]), |t, v| t.reshape(v[0], &[3, 2])?),
        case!("flatten", [signed(g, &[2, 2, 2, 2])], signed(g, &[2, 8]), |t, v| t.flatten(v[0])?),
        case!("conv2d", [signed(g, &[1, 2, 5, 5]), signed(g, &[3, 2, 3, 3])], signed(g, &[1, 3, 3, 3]), |t, v| t
            .conv2d(v[0], v[1], 1, 0)?),
        case!("conv2d_pad_stride", [signed(g, &[2, 2, 5, 5]), signed(g, &[2, 2, 3, 3])], signed(g, &[2, 2, 3, 3]), |t, v| t
            .conv2d(v[0], v[1], 2, 1)?),
        case!("pairwise_dist", [signed(g, &[3, 4]), signed(g, &[2, 4])], signed(g, &[3, 2]), |t, v| t
            .pairwise_dist(v[0], v[1])?),
        case!("pick", [signed(g, &[3, 4])], signed(g, &[3]), |t, v| t.pick(v[0], &[2, 0, 3])?),
        case!("max_excluding", [distinct(g, &[3, 4])], signed(g, &[3]), |t, v| t.max_excluding(v[0], &[1, 1, 3])?),
        case!("clamp_min", [signed(g, &[8])], signed(g, &[8]), |t, v| t.clamp_min(v[0], 0.05)),
    ];

    let labels: Vec<usize> = (0..5).map(|_| g.gen_range(0..4)).collect();
    let l1 = labels.clone();
    cases.push(Case {
        name: "cross_entropy",
        inputs: vec![signed(g, &[5, 4])],
        build: Box::new(move |t, v| cross_entropy(t, v[0], &l1)),
    });
    let l2 = labels.clone();
    cases.push(Case {
        name: "prototype_conformity",
        inputs: vec![signed(g, &[5, 3]), signed(g, &[4, 3])],
        build: Box::new(move |t, v| prototype_conformity(t, v[0], &l2, v[1])),
    });

    let (x, w1, b1, w2, b2) = (
        signed(g, &[4, 3]),
        signed(g, &[3, 5]),
        signed(g, &[5]),
        signed(g, &[5, 3]),
        signed(g, &[3]),
    );
    let l3: Vec<usize> = (0..4).map(|_| g.gen_range(0..3)).collect();
    cases.push(Case {
        name: "mlp_cross_entropy",
        inputs: vec![x, w1, b1, w2, b2],
        build: Box::new(move |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.relu(h);
            let z = t.matmul(h, v[3])?;
            let z = t.add_bias(z, v[4])?;
            cross_entropy(t, z, &l3)
        }),
    });

    cases.push(model_case(g));
    cases
}

/// A small conv net with two taps, differentiated through the joint loss
/// with respect to input, parameters and centroids at once.
fn model_case(g: &mut ChaCha8Rng) -> Case {
    let spec = ModelSpec {
        name: "gradcheck".into(),
        input_shape: vec![1, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, padding: 1, stride: 1 },
            LayerSpec::Prelu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 4 },
            LayerSpec::Prelu,
            LayerSpec::Fc { out: 3 },
        ],
        taps: vec![TapSpec { layer: 2, gap: true, fc: Some(2) }, TapSpec::identity(4)],
    };
    let model = Model::build(spec, g.gen()).expect("valid spec");
    let n_params = model.params().len();
    let mut inputs = vec![distinct(g, &[2, 1, 6, 6])];
    inputs.extend(model.params().iter().map(|p| {
        // Keep PReLU slopes and biases away from zero so no unit sits on a kink.
        let mut q = p.clone();
        for v in q.data_mut() {
            *v += g.gen_range(0.05..0.2) * if g.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        q
    }));
    inputs.push(signed(g, &[3, 2]));
    inputs.push(signed(g, &[3, 4]));
    let labels = vec![g.gen_range(0..3), g.gen_range(0..3)];
    Case {
        name: "model_joint_loss",
        inputs,
        build: Box::new(move |t, v| {
            let bound = crate::nn::Bound {
                vars: v[1..1 + n_params].to_vec(),
            };
            let out = model.forward(t, &bound, v[0])?;
            let (loss, _) = joint_loss(t, &out, &labels, &v[1 + n_params..], &[])?;
            Ok(loss)
        }),
    }
}

/// Runs the whole suite for `seed`.
pub fn run(seed: u64) -> Result<Vec<CaseResult>> {
    suite(seed).iter().map(check).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for r in run(seed).unwrap() {
                assert!(
                    r.max_rel_err < TOLERANCE,
                    "{} seed {seed}: relative error {:.3e}",
                    r.name,
                    r.max_rel_err
                );
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn oracle_flags_a_detached_path() {
        // x * stop_gradient(x): the tape sees d/dx = x, the true derivative is 2x.
        let case = Case {
            name: "detached",
            inputs: vec![Tensor::from_vec(vec![0.5, -0.3])],
            build: Box::new(|t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                Ok(t.sum(y))
            }),
        };
        assert!(check(&case).unwrap().max_rel_err > 0.4);
    }
}

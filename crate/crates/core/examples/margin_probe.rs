//! Empirical class margin m and perturbation radius lambda in the deepest
//! feature space, for a CE-only and a PCL model trained from the same start.

use pshield::data::synth_blobs;
use pshield::eval::{margin_probe, stratified_sample};
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(4, 40, &[1, 12, 12], 0.3, 8)?;
    let (train_set, eval_set) = data.split_at(120)?;
    let sample = stratified_sample(&eval_set, 5);
    for (name, warmup) in [("CE-only", 6), ("PCL", 2)] {
        let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 4), 2)?;
        let protos = PrototypeSet::for_model(&model, 2)?;
        let cfg = TrainConfig { epochs: 6, warmup_epochs: warmup, batch_size: 16, lr: 0.02, decay_epochs: vec![], ..Default::default() };
        let (m, _, _) = train(model, protos, &train_set, &cfg, &mut |_| {})?;
        let p = margin_probe(&m, &sample, 0.1, 200, 0)?;
        println!(
            "{name:>8}: m {:.3}  max lambda {:.3}  mean m_c/(2 lambda_c) {:.3}  overlapping classes {:?}",
            p.margin,
            p.lambda.iter().copied().fold(0.0, f64::max),
            p.ratio(),
            p.classes.iter().zip(p.overlap()).filter(|(_, o)| *o).map(|(c, _)| *c).collect::<Vec<_>>()
        );
    }
    Ok(())
}

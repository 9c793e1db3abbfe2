//! CE warm-up followed by joint CE + prototype conformity training on
//! synthetic blobs, printing the per-tap loss and prototype spread.

use pshield::data::synth_blobs;
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{accuracy, train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(4, 40, &[1, 12, 12], 0.3, 1)?;
    let (train_set, eval_set) = data.split_at(120)?;
    let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 4), 7)?;
    let protos = PrototypeSet::for_model(&model, 7)?;
    let cfg = TrainConfig {
        epochs: 6,
        warmup_epochs: 2,
        batch_size: 16,
        lr: 0.02,
        decay_epochs: vec![5],
        ..TrainConfig::default()
    };
    let (model, protos, _) = train(model, protos, &train_set, &cfg, &mut |r| {
        println!(
            "epoch {} {:<6} ce {:.4} pc {:?} acc {:.3} spread {:?}",
            r.epoch,
            if r.joint { "joint" } else { "warmup" },
            r.ce,
            r.pc_per_tap.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            r.train_acc,
            r.proto_dist.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        )
    })?;
    let (_, taps) = model.infer(&eval_set.images, 64)?;
    let by_proto = protos.predict(&taps)?;
    let by_softmax = model.predict_softmax(&eval_set.images)?;
    let agree = by_proto.iter().zip(&by_softmax).filter(|(a, b)| a == b).count();
    println!(
        "eval accuracy {:.3}, prototype/softmax agreement {}/{}",
        accuracy(&model, &eval_set)?,
        agree,
        eval_set.len()
    );
    Ok(())
}

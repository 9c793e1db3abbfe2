//! Runs all five attacks against one model and reports success rate and
//! the largest L-infinity perturbation.

use pshield::attacks::{attack_all, AttackConfig, AttackKind, Classifier};
use pshield::data::synth_blobs;
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(3, 30, &[1, 12, 12], 0.3, 2)?;
    let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3), 3)?;
    let protos = PrototypeSet::for_model(&model, 3)?;
    let cfg = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 15, lr: 0.02, decay_epochs: vec![], ..Default::default() };
    let (model, protos, _) = train(model, protos, &data, &cfg, &mut |_| {})?;
    let clf = Classifier::new(&model, Some(&protos));
    for kind in AttackKind::ALL {
        let mut a = AttackConfig::new(kind, 0.2);
        a.iters = 100;
        let adv = attack_all(&clf, &data.images, &data.labels, &a, 30, 0)?;
        let linf = adv.linf().into_iter().fold(0.0, f64::max);
        println!("{:>4}: success {:5.1}%  max linf {:.3}", kind.label(), 100.0 * adv.success_rate(), linf);
    }
    Ok(())
}

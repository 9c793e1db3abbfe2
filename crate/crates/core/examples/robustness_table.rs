//! White-box and black-box robustness of a CE-only and a PCL model, in
//! one table. The black-box source is an independently trained small CNN.

use pshield::attacks::{Classifier, AttackConfig, AttackKind};
use pshield::data::synth_blobs;
use pshield::eval::{evaluate_robustness, RobustnessReport, Setting};
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{make_black_box_source, train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(3, 40, &[1, 12, 12], 0.3, 4)?;
    let (train_set, eval_set) = data.split_at(90)?;
    let attacks: Vec<_> = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd]
        .iter()
        .map(|&k| AttackConfig::new(k, 0.2))
        .collect();
    let source = make_black_box_source(&train_set, 0, 4)?;
    let src = Classifier::new(&source, None);
    let mut report = RobustnessReport::default();
    for (name, warmup) in [("Softmax", 5), ("Ours", 2)] {
        let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3), 0)?;
        let protos = PrototypeSet::for_model(&model, 0)?;
        let cfg = TrainConfig { epochs: 5, warmup_epochs: warmup, batch_size: 15, lr: 0.02, decay_epochs: vec![], ..Default::default() };
        let (m, p, _) = train(model, protos, &train_set, &cfg, &mut |_| {})?;
        let clf = Classifier::new(&m, Some(&p));
        for setting in [Setting::White, Setting::Black] {
            report.extend(evaluate_robustness(name, &clf, &attacks, &eval_set, setting, Some(&src), 30, 0)?);
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

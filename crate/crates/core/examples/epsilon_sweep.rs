//! Accuracy versus epsilon for the four budgeted attacks, followed by the
//! gradient-masking checklist.

use pshield::attacks::{AttackConfig, AttackKind, Classifier};
use pshield::data::synth_blobs;
use pshield::eval::{epsilon_sweep, evaluate_robustness, masking_checklist, MaskingTolerance, RobustnessReport, Setting};
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{make_black_box_source, train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(3, 40, &[1, 12, 12], 0.3, 6)?;
    let (train_set, eval_set) = data.split_at(90)?;
    let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3), 1)?;
    let protos = PrototypeSet::for_model(&model, 1)?;
    let cfg = TrainConfig { epochs: 5, warmup_epochs: 2, batch_size: 15, lr: 0.02, decay_epochs: vec![], ..Default::default() };
    let (m, p, _) = train(model, protos, &train_set, &cfg, &mut |_| {})?;
    let clf = Classifier::new(&m, Some(&p));
    let kinds = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::Pgd];
    let sweep = epsilon_sweep(&clf, &kinds, &[0.0, 0.1, 0.2, 0.3, 0.6], &AttackConfig::default(), &eval_set, 30, 0)?;
    print!("{}", sweep.to_text());

    let attacks: Vec<_> = kinds.iter().map(|&k| AttackConfig::new(k, 0.3)).collect();
    let source = make_black_box_source(&train_set, 1, 4)?;
    let src = Classifier::new(&source, None);
    let mut report = RobustnessReport::default();
    for setting in [Setting::White, Setting::Black] {
        report.extend(evaluate_robustness("Ours", &clf, &attacks, &eval_set, setting, Some(&src), 30, 0)?);
    }
    for line in masking_checklist(&report, "Ours", &sweep, MaskingTolerance::default()) {
        println!("{line}");
    }
    Ok(())
}

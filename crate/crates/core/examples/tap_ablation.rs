//! Retrains one model per subset of conformity taps and compares clean and
//! attacked accuracy.

use pshield::attacks::{AttackConfig, AttackKind};
use pshield::data::synth_blobs;
use pshield::eval::layer_ablation;
use pshield::nn::{ModelSpec, Profile};
use pshield::training::TrainConfig;

fn main() -> pshield::Result<()> {
    let data = synth_blobs(3, 40, &[1, 12, 12], 0.3, 9)?;
    let (train_set, eval_set) = data.split_at(90)?;
    let spec = ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3);
    let cfg = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 15, lr: 0.02, decay_epochs: vec![], ..Default::default() };
    let attacks = [AttackConfig::new(AttackKind::Fgsm, 0.2), AttackConfig::new(AttackKind::Pgd, 0.2)];
    let subsets = vec![vec![], vec![0], vec![1, 2], vec![0, 1, 2]];
    let table = layer_ablation(&spec, &subsets, &train_set, &eval_set, &cfg, &attacks, None, 0)?;
    print!("{}", table.to_text());
    Ok(())
}

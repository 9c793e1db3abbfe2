//! Transferability of PGD examples between three independently seeded models.

use pshield::attacks::{AttackConfig, AttackKind, Classifier};
use pshield::data::synth_blobs;
use pshield::eval::transfer_matrix;
use pshield::losses::PrototypeSet;
use pshield::nn::{Model, ModelSpec, Profile};
use pshield::training::{train, TrainConfig};

fn main() -> pshield::Result<()> {
    let data = synth_blobs(3, 40, &[1, 12, 12], 0.3, 5)?;
    let (train_set, eval_set) = data.split_at(90)?;
    let mut trained = Vec::new();
    for seed in 0..3 {
        let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3), seed)?;
        let protos = PrototypeSet::for_model(&model, seed)?;
        let cfg = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 15, lr: 0.02, decay_epochs: vec![], seed, ..Default::default() };
        let (m, p, _) = train(model, protos, &train_set, &cfg, &mut |_| {})?;
        trained.push((format!("seed{seed}"), m, p));
    }
    let models: Vec<_> = trained.iter().map(|(n, m, p)| (n.clone(), Classifier::new(m, Some(p)))).collect();
    let t = transfer_matrix(&models, &AttackConfig::new(AttackKind::Pgd, 0.15), &eval_set, 30, 0)?;
    println!("rows: crafted on, columns: evaluated on");
    print!("{}", t.to_text());
    Ok(())
}

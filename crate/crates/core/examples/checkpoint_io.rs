//! Saves a model with its prototypes, reloads it, and confirms the weights
//! and predictions are bitwise identical. Also writes the prototypes as CSV.

use pshield::data::synth_blobs;
use pshield::losses::PrototypeSet;
use pshield::nn::{Checkpoint, Model, ModelSpec, Profile};

fn main() -> pshield::Result<()> {
    let dir = std::env::temp_dir().join("pshield-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| pshield::Error::Usage(e.to_string()))?;
    let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 12, 12], 3), 0)?;
    let protos = PrototypeSet::for_model(&model, 0)?;
    let path = dir.join("model.ckpt");
    Checkpoint { model: model.clone(), protos: Some(protos.clone()) }.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let x = synth_blobs(3, 4, &[1, 12, 12], 0.3, 0)?.images;
    println!("checksum before {}", model.checksum());
    println!("checksum after  {}", back.model.checksum());
    println!("logits identical: {}", model.logits(&x)? == back.model.logits(&x)?);
    protos.export_csv(&dir.join("prototypes.csv"), "# prototypes")?;
    println!("wrote {}", dir.display());
    Ok(())
}

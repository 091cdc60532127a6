//! Write a labeled dataset and a checkpoint to disk, read both back and
//! check the round trip. Usage: `dataset_files [dir]`.

use std::path::PathBuf;

use therino::dataset::{generate_dataset, DatasetSpec};
use therino::format::{load_checkpoint, load_dataset, load_manifest, read_array, save_checkpoint, save_dataset};
use therino::operators::{Model, ModelConfig, OperatorKind};

fn main() -> therino::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("therino-dataset-files"));
    let mut spec = DatasetSpec::desk(10, 11);
    spec.grid = 8;
    let mut data = generate_dataset(&spec)?;
    data.solve_labels()?;
    save_dataset(&dir.join("data"), &data)?;

    let manifest = load_manifest(&dir.join("data"))?;
    println!("{} samples, splits {}/{}/{}", manifest.sample_count, manifest.splits.train.len(), manifest.splits.val.len(), manifest.splits.test.len());
    let first = &manifest.samples[0];
    let a = read_array(&dir.join("data").join(first.strain_f64.as_deref().expect("labeled")))?;
    println!("{} has dims {:?}", first.strain_f64.as_deref().unwrap_or(""), a.dims);

    let back = load_dataset(&dir.join("data"))?;
    let same = data.samples.iter().zip(&back.samples).all(|(x, y)| x.strain == y.strain && x.microstructure.phase == y.microstructure.phase);
    println!("dataset round trip exact: {same}");

    let model = Model::new(ModelConfig::new(OperatorKind::Therino, data.grid()), 1)?;
    save_checkpoint(&dir.join("ck"), &model, None, None)?;
    let (loaded, header) = load_checkpoint(&dir.join("ck"))?;
    println!("checkpoint: {} ({} parameters), exact: {}", header.model.kind, header.param_count, loaded.params().data() == model.params().data());
    println!("files under {}", dir.display());
    Ok(())
}

//! Relabel held-out structures at higher contrasts and compare the error
//! of a model trained at contrast 10.

use therino::dataset::{generate_dataset, DatasetSpec, Split};
use therino::experiments::extrapolate;
use therino::operators::{Model, ModelConfig, OperatorKind};
use therino::train::{train, TrainConfig};

fn main() -> therino::Result<()> {
    let mut spec = DatasetSpec::desk(20, 5);
    spec.grid = 8;
    let mut data = generate_dataset(&spec)?;
    data.solve_labels()?;
    let mut model = Model::new(ModelConfig::new(OperatorKind::Therino, data.grid()), 0)?;
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    train(&mut model, &data.labeled(Split::Train)?, &data.labeled(Split::Val)?, &cfg)?;
    let test: Vec<_> = data.split(Split::Test).collect();
    let r = extrapolate(&model, &test, 10.0, 200.0, &data.spec.oracle)?;
    println!("contrast {:>5}: {}", r.reference_kappa, r.reference.summary());
    println!("contrast {:>5}: {}", r.target_kappa, r.target.summary());
    println!("l2-strain degradation x{:.2}", r.degradation.err_l2_strain);
    Ok(())
}

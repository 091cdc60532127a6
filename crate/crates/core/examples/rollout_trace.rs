//! Residual, alignment and error of each update of a briefly trained
//! TherINO, iterated past its evaluation depth.

use therino::dataset::{generate_dataset, DatasetSpec, Split};
use therino::metrics::{rollout, rollout_csv};
use therino::operators::{Model, ModelConfig, OperatorKind};
use therino::train::{train, TrainConfig};

fn main() -> therino::Result<()> {
    let mut spec = DatasetSpec::desk(20, 3);
    spec.grid = 8;
    let mut data = generate_dataset(&spec)?;
    data.solve_labels()?;
    let mut model = Model::new(ModelConfig::new(OperatorKind::Therino, data.grid()), 0)?;
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    train(&mut model, &data.labeled(Split::Train)?, &data.labeled(Split::Val)?, &cfg)?;
    let test = data.labeled(Split::Test)?;
    let traces = test.iter().take(2).map(|s| rollout(&model, s, 24, false)).collect::<therino::Result<Vec<_>>>()?;
    print!("{}", rollout_csv(&traces));
    Ok(())
}

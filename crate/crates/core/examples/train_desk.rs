//! A short desk training run. Usage: `train_desk [kind] [epochs] [samples]`,
//! default `therino 5 40` at 16³, contrast 10.

use therino::dataset::{generate_dataset, DatasetSpec, Split};
use therino::metrics::{evaluate, evaluate_mean_field};
use therino::operators::{Model, ModelConfig, OperatorKind};
use therino::train::{train, TrainConfig};

fn main() -> therino::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let kind: OperatorKind = args.next().as_deref().unwrap_or("therino").parse()?;
    let epochs = args.next().map(|a| a.parse().expect("epoch count")).unwrap_or(5);
    let samples = args.next().map(|a| a.parse().expect("sample count")).unwrap_or(40);

    let mut data = generate_dataset(&DatasetSpec::desk(samples, 7))?;
    data.solve_labels()?;
    let (tr, va, te) = (data.labeled(Split::Train)?, data.labeled(Split::Val)?, data.labeled(Split::Test)?);
    let mut model = Model::new(ModelConfig::new(kind, data.grid()), 0)?;
    let cfg = TrainConfig {
        epochs,
        val_limit: Some(8),
        ..Default::default()
    };
    let history = train(&mut model, &tr, &va, &cfg)?;
    println!("best epoch {:?}, validation loss {:.4e}", history.best_epoch, history.best_val_loss);
    println!("{}", evaluate_mean_field(&te)?.summary());
    println!("{}", evaluate(&model, &te)?.summary());
    Ok(())
}

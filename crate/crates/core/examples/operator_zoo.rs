//! Every operator kind on one random problem: parameter counts, mean-strain
//! constraint and the untrained prediction error.

use therino::dataset::{generate_dataset, DatasetSpec, Split};
use therino::metrics::{evaluate, evaluate_mean_field};
use therino::operators::{Model, ModelConfig, OperatorKind};

fn main() -> therino::Result<()> {
    let mut spec = DatasetSpec::desk(4, 1);
    spec.grid = 8;
    let mut data = generate_dataset(&spec)?;
    data.solve_labels()?;
    let test = data.labeled(Split::Test)?;
    println!("{}", evaluate_mean_field(&test)?.summary());
    for kind in OperatorKind::ALL {
        let cfg = ModelConfig::new(kind, data.grid());
        let model = Model::new(cfg, 0)?;
        let pred = model.predict(&test[0].problem)?;
        let mean_err = pred.channel_means().iter().zip(test[0].problem.eps_bar.0).map(|(m, b)| (m - b).abs()).fold(0.0, f64::max);
        println!("{kind:<12} {:>9} parameters, |<e> - e_bar| = {mean_err:.1e}", cfg.param_count());
        println!("  {}", evaluate(&model, &test)?.summary());
    }
    Ok(())
}

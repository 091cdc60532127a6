//! Equivalent strain and stress on the middle plane of a solved sample,
//! written as CSV and PGM. Usage: `equivalent_slices [dir]`.

use std::path::PathBuf;

use therino::dataset::{generate_dataset, DatasetSpec};
use therino::experiments::equivalent_slices;
use therino::format::write_atomic;

fn main() -> therino::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("therino-slices"));
    let mut data = generate_dataset(&DatasetSpec::desk(1, 2))?;
    data.solve_labels()?;
    let s = &data.samples[0];
    let c = s.microstructure.to_stiffness()?;
    let z = data.grid().nz / 2;
    for slice in equivalent_slices(s.strain.as_ref().expect("solved"), &c, z, "sample0")? {
        let (lo, hi) = slice.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        println!("{}: {}x{} values in [{lo:.3e}, {hi:.3e}]", slice.name, slice.nx, slice.ny);
        write_atomic(&dir.join(format!("{}.csv", slice.name)), slice.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{}.pgm", slice.name)), slice.to_pgm().as_bytes())?;
    }
    println!("written to {}", dir.display());
    Ok(())
}

//! Periodic two-phase microstructures from thresholded Gaussian random
//! fields. Usage: `microstructure [grid] [count] [seed]`.

use therino::field::Grid;
use therino::mandel::PhaseParams;
use therino::microgen::{grf_microstructure, sample_gen_params, GenRanges};

fn main() -> therino::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("numeric argument"));
    let n = args.next().unwrap_or(16) as usize;
    let count = args.next().unwrap_or(8) as usize;
    let seed = args.next().unwrap_or(0);
    let grid = Grid::cubic(n);
    let ranges = GenRanges::default_for(grid);
    let params = PhaseParams::with_contrast(10.0);
    for (i, gen) in sample_gen_params(count, &ranges, seed)?.iter().enumerate() {
        let ms = grf_microstructure(gen, grid, params, seed + i as u64)?;
        let l = gen.feature_sizes;
        println!(
            "sample {i}: feature sizes ({:.2}, {:.2}, {:.2}) target vf {:.3} realized {:.3}",
            l[0],
            l[1],
            l[2],
            gen.volume_fraction,
            ms.volume_fraction()
        );
    }
    Ok(())
}

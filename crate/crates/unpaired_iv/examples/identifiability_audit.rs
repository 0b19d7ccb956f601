//! Finite identifiability checks: the dense rank condition, the restricted
//! nullspace condition, and the brute-force sparsest-solution oracle.
//!
//! ```sh
//! cargo run --example identifiability_audit
//! ```

use nalgebra::{dvector, DMatrix, DVector};
use unpaired_iv::identifiability::{
    dense_identifiable, restricted_nullspace_holds, sparsest_solution_set,
};

fn main() {
    // A healthy 5 x 4 first stage.
    let healthy = DMatrix::from_row_slice(
        5,
        4,
        &[
            0.9, -0.3, 0.2, 1.1, //
            -0.4, 0.8, -1.0, 0.3, //
            1.2, 0.1, 0.5, -0.7, //
            0.0, -1.1, 0.9, 0.4, //
            0.6, 0.5, -0.2, -1.3,
        ],
    );
    println!("healthy 5x4 first stage:");
    println!("  dense identifiable:  {}", dense_identifiable(&healthy));
    println!(
        "  restricted nullspace (s* = 1): {}",
        restricted_nullspace_holds(&healthy, 1).unwrap()
    );

    // Duplicate a column: the dense condition fails, and so does sparse
    // identifiability at s* = 1 (the kernel vector e1 - e2 is 2-sparse).
    let mut broken = healthy.clone();
    let col = broken.column(0).into_owned();
    broken.set_column(1, &col);
    println!("\nwith column 2 duplicated from column 1:");
    println!("  dense identifiable:  {}", dense_identifiable(&broken));
    println!(
        "  restricted nullspace (s* = 1): {}",
        restricted_nullspace_holds(&broken, 1).unwrap()
    );

    // The enumeration oracle exhibits the ambiguity concretely.
    let beta: DVector<f64> = dvector![1.5, 0.0, 0.0, 0.0];
    let target = &broken * &beta;
    let solutions = sparsest_solution_set(&broken, &target, 1).unwrap();
    println!(
        "  sparsest solutions for a target on coordinate 1: {} candidates",
        solutions.len()
    );
    for s in &solutions {
        let entries: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| format!("β[{j}] = {v:.2}"))
            .collect();
        println!("    {}", entries.join(", "));
    }

    // A wide system (m < d) can still be sparse-identifiable.
    let wide = DMatrix::from_row_slice(2, 4, &[0.8, -0.5, 0.3, 1.0, -0.2, 0.9, -1.1, 0.4]);
    println!("\nwide 2x4 first stage:");
    println!("  dense identifiable:  {}", dense_identifiable(&wide));
    println!(
        "  restricted nullspace (s* = 1): {}",
        restricted_nullspace_holds(&wide, 1).unwrap()
    );
}

//! Generate a synthetic unpaired dataset and write it to the columnar text
//! format.
//!
//! ```sh
//! cargo run --example generate_dataset
//! ```

use unpaired_iv::datagen::{self, GeneratorSpec};
use unpaired_iv::dataset::InstrumentKind;
use unpaired_iv::io;
use unpaired_iv::moments::MomentSystem;

fn main() {
    let mut spec = GeneratorSpec::setting1(InstrumentKind::OneHot);
    spec.m = 25;
    spec.d = 8;
    spec.s_star = 3;
    spec.r = 12;
    spec.r_tilde = 12;
    spec.seed = 7;

    let (ds, gt) = datagen::generate(&spec).unwrap();
    println!(
        "generated a balanced categorical dataset: m = {}, d = {}, n = {}, ñ = {}",
        ds.m,
        ds.d,
        ds.n(),
        ds.n_tilde()
    );
    println!("true support: {:?}", gt.support);

    let ms = MomentSystem::from_dataset(&ds);
    println!(
        "moment system: |Cov(I,Y)| = {:.4}, |Cov(Ĩ,X̃)|_F = {:.4}",
        ms.a.norm(),
        ms.b.norm()
    );

    let path = std::env::temp_dir().join("unpaired_iv_example_dataset.csv");
    io::write_dataset(&path, &ds).unwrap();
    let reread = io::read_dataset(&path).unwrap();
    assert_eq!(ds, reread);
    println!("wrote {} and read it back bit-identically", path.display());

    println!("\nfirst rows of the file:");
    let text = io::dataset_to_string(&ds);
    for line in text.lines().take(4) {
        let short: String = line.chars().take(100).collect();
        println!("  {short}{}", if line.len() > 100 { "…" } else { "" });
    }
}

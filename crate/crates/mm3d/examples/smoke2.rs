// Probe generator seeds for exact benchmark split sizes.
use mm3d::phantom::{generate_dataset, PhantomConfig, Split};

fn main() {
    let cfg = PhantomConfig {
        slices: 32,
        height: 32,
        width: 32,
        annotation_fraction: 0.4,
        ..PhantomConfig::default()
    };
    for seed in 2026..2100u64 {
        let ds = generate_dataset(&cfg, seed, 900, [600.0 / 900.0, 100.0 / 900.0, 200.0 / 900.0])
            .expect("dataset");
        let count = |s: Split| ds.cases.iter().filter(|c| c.split == s).count();
        let (tr, va, te) = (count(Split::Train), count(Split::Val), count(Split::Test));
        if (tr, va, te) == (600, 100, 200) {
            println!("seed {seed}: {tr}/{va}/{te} EXACT");
            break;
        } else {
            println!("seed {seed}: {tr}/{va}/{te}");
        }
    }
}

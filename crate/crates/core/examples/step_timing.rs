//! Times one generator forward + backward at the default training scale.
use std::time::Instant;

use mpsynth::arch::{build_variant, generator_forward, NetConfig, VariantKind};
use mpsynth::autodiff::Graph;
use mpsynth::Tensor;

fn main() {
    let cfg = NetConfig::new(3, 16);
    for kind in VariantKind::ALL {
        let store = build_variant::<f32>(kind, &cfg, 1).unwrap();
        let reps = 5;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let xs: Vec<_> = (0..3)
                .map(|i| g.input(Tensor::from_fn(&[4, 1, 32, 32], |j| ((i + j) as f32 * 0.1).sin().abs())))
                .collect();
            let out = generator_forward(&mut g, &store, &cfg, kind, &xs).unwrap();
            let loss = g.mean(out.y_hat).unwrap();
            g.backward(loss).unwrap();
        }
        println!("{kind}: {:.1} ms/step, {} weights", t0.elapsed().as_secs_f64() * 1e3 / reps as f64, store.num_weights());
    }
}

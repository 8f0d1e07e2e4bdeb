//! Desk-scale training run: prints held-out metrics after each epoch.
//!
//! Usage: `desk_run [variant] [n_params] [seed] [epochs]`
use std::time::Instant;

use mpsynth::data::{build_dataset, Dataset, Split};
use mpsynth::metrics::PsnrPeak;
use mpsynth::train::{Model, TrainConfig};

fn main() -> mpsynth::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let dir = tempfile::tempdir().expect("tempdir");
    build_dataset(dir.path(), 200, 32, 2024, 0.8)?;
    let ds = Dataset::load(dir.path())?;
    let cfg = TrainConfig {
        variant: arg(1, "full").parse()?,
        n_params: arg(2, "3").parse().expect("n_params"),
        seed: arg(3, "1").parse().expect("seed"),
        epochs: arg(4, "20").parse().expect("epochs"),
        ..TrainConfig::default()
    };
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    let mut model = Model::new(cfg)?;
    let t0 = Instant::now();
    let last = std::cell::Cell::new((0.0, 0.0));
    model.fit(
        &train,
        |s| {
            last.set((s.losses.l1, s.losses.l_d));
            Ok(())
        },
        |m| {
            let r = m.evaluate(&test, PsnrPeak::default())?;
            println!(
                "epoch {:2} {:6.1}s l1 {:.4} l_d {:.3} ssim {:.4} nmse {:.4} psnr {:.2}",
                m.epoch,
                t0.elapsed().as_secs_f64(),
                last.get().0,
                last.get().1,
                r.mean.ssim,
                r.mean.nmse,
                r.mean.psnr
            );
            Ok(())
        },
    )?;
    Ok(())
}

//! Trains DI, motion-frozen and ablation fits on the desk phantom and prints
//! their losses and metrics.
//!
//! Usage: `cargo run --release -p ffdsplat-core --example desk_benchmark [iterations] [mode...]`

use std::time::Instant;

use ffdsplat::engine::{train, TrainConfig};
use ffdsplat::eval::{evaluate_run, uniform_times};
use ffdsplat::phantom::{make_dataset, DatasetSpec};
use ffdsplat::warp::MotionMode;

fn main() -> ffdsplat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(5000);
    let runs: Vec<&str> = if args.len() > 1 { args[1..].iter().map(|s| s.as_str()).collect() } else { vec!["di", "frozen"] };

    let spec = DatasetSpec::default();
    let data = make_dataset(&spec)?;
    let grid = spec.grid();
    let init = data.truth.time_averaged_volume(&grid)?;
    let times = uniform_times(spec.views, 10);
    for run in runs {
        let mut cfg = TrainConfig {
            iterations,
            init_points: 2000,
            ..Default::default()
        };
        cfg.densify.max_kernels = 4000;
        match run {
            "frozen" => cfg.freeze_motion = true,
            m => cfg.mode = m.parse::<MotionMode>()?,
        }
        let start = Instant::now();
        let out = train(&cfg, &data.geometry, &data.projections, &init, |_| Ok(()))?;
        let report = evaluate_run(&out.cloud, &out.motion, cfg.freeze_motion, &data.truth, &data.geometry, &grid, &times)?;
        println!(
            "{run}: loss {:.4e} psnr {:.2} rmse {:.3e} kernels {} dvf {:?} ({:.0}s)",
            out.final_loss,
            report.mean_psnr,
            report.mean_rmse,
            out.cloud.len(),
            report.dvf.map(|d| (d.median, d.raw_median)),
            start.elapsed().as_secs_f64()
        );
        for r in out.log.iter().step_by(10) {
            println!("  it {} loss {:.3e} kernels {} folds {}", r.iteration, r.loss, r.kernels, r.fold_incidents);
        }
    }
    Ok(())
}

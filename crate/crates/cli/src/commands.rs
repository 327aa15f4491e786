use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use ffdsplat::cloud::{rasterize_to_volume, GridSpec, Volume};
use ffdsplat::engine::{train, Checkpoint};
use ffdsplat::eval::{evaluate_run, fitted_volume, mean_position_time, uniform_times};
use ffdsplat::ffd::sample_dvf;
use ffdsplat::io::{
    coronal_slice, f32_to_bytes, read_cloud, read_json, read_motion, read_projection_set, read_volume, sha256_hex,
    write_bytes, write_cloud, write_json, write_metrics_log, write_motion, write_pgm, write_projection_set, write_volume,
    FORMAT_VERSION,
};
use ffdsplat::phantom::{make_dataset, TruthBundle};
use ffdsplat::splat::render;
use ffdsplat::warp::MotionMode;

use crate::config::{parse_overrides, resolve, EvaluateConfig, ExportConfig, ReconstructConfig, SimulateConfig};
use crate::{Command, Common, Failure};

pub const TRUTH_FILE: &str = "truth.json";
pub const INIT_VOLUME_FILE: &str = "init_volume.json";
pub const RUN_FILE: &str = "run.json";
pub const CLOUD_FINAL: &str = "cloud_final.bin";
pub const MOTION_FINAL: &str = "motion_final.bin";

fn load<T: Serialize + DeserializeOwned + Default>(c: &Common) -> Result<T, Failure> {
    let overrides = parse_overrides(&c.overrides).map_err(Failure::Validation)?;
    resolve(c.config.as_deref(), &overrides).map_err(Failure::Validation)
}

pub(crate) fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(c) => simulate(load(&c)?),
        Command::Reconstruct(c) => reconstruct(load(&c)?),
        Command::Evaluate(c) => evaluate(load(&c)?),
        Command::Export(c) => export(load(&c)?),
        Command::Selftest => selftest(),
        Command::ShowConfig { command, common } => {
            let text = match command.as_str() {
                "simulate" => toml::to_string(&load::<SimulateConfig>(&common)?),
                "reconstruct" => toml::to_string(&load::<ReconstructConfig>(&common)?),
                "evaluate" => toml::to_string(&load::<EvaluateConfig>(&common)?),
                _ => toml::to_string(&load::<ExportConfig>(&common)?),
            };
            print!("{}", text.map_err(|e| Failure::Runtime(e.to_string()))?);
            Ok(())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    /// Named random sub-streams consumed while generating the data.
    streams: Vec<String>,
    config: SimulateConfig,
    files: BTreeMap<String, String>,
}

fn simulate(cfg: SimulateConfig) -> Result<(), Failure> {
    let data = make_dataset(&cfg.dataset)?;
    let meta = write_projection_set(&cfg.out, &data.geometry, &data.projections, cfg.dataset.noise, Some(cfg.dataset.seed))?;
    let mut files: BTreeMap<String, String> = meta.views.iter().map(|v| (v.file.clone(), v.sha256.clone())).collect();
    let truth_path = cfg.out.join(TRUTH_FILE);
    write_json(&truth_path, &data.truth)?;
    files.insert(TRUTH_FILE.into(), sha256_hex(&ffdsplat::io::read_bytes(&truth_path)?));
    if cfg.write_init_volume {
        let v = data.truth.time_averaged_volume(&data.truth.grid)?;
        write_volume(&cfg.out.join(INIT_VOLUME_FILE), &v)?;
        files.insert("init_volume.f32".into(), sha256_hex(&f32_to_bytes(v.data.iter().copied())));
    }
    let mut streams = vec!["simulate".to_string()];
    if cfg.dataset.noise.is_some() {
        streams.push("noise".into());
    }
    write_json(
        &cfg.out.join("manifest.json"),
        &Manifest {
            format_version: FORMAT_VERSION,
            seed: cfg.dataset.seed,
            streams,
            config: cfg.clone(),
            files,
        },
    )?;
    println!("wrote {} views to {}", data.projections.len(), cfg.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    format_version: u32,
    config: ReconstructConfig,
    grid: GridSpec,
    iterations: usize,
    kernels: usize,
    final_loss: f64,
}

fn reconstruct(cfg: ReconstructConfig) -> Result<(), Failure> {
    cfg.train.validate()?;
    let (meta, projections) = read_projection_set(&cfg.data)?;
    let init_path = cfg.init.clone().unwrap_or_else(|| cfg.data.join(INIT_VOLUME_FILE));
    let init = read_volume(&init_path)?;
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let sink = |c: &Checkpoint<'_>| {
        let (cloud, motion) = if c.is_final {
            (out.join(CLOUD_FINAL), out.join(MOTION_FINAL))
        } else {
            (
                out.join(format!("cloud_{:06}.bin", c.iteration)),
                out.join(format!("motion_{:06}.bin", c.iteration)),
            )
        };
        write_cloud(&cloud, c.cloud)?;
        write_motion(&motion, c.motion)
    };
    let result = match train(&cfg.train, &meta.geometry, &projections, &init, sink) {
        Ok(r) => r,
        Err(e @ ffdsplat::Error::NonFiniteLoss { .. }) => {
            let dump = serde_json::json!({ "error": e.to_string(), "config": &cfg });
            let _ = write_json(&out.join("diagnostics.json"), &dump);
            return Err(Failure::Runtime(format!("{e}; diagnostics in {}", out.join("diagnostics.json").display())));
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics_log(&out.join("metrics.jsonl"), &result.log)?;
    write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            format_version: FORMAT_VERSION,
            config: cfg.clone(),
            grid: init.grid,
            iterations: cfg.train.iterations,
            kernels: result.cloud.len(),
            final_loss: result.final_loss,
        },
    )?;
    println!(
        "{} iterations, {} kernels, final projection loss {:.6e}",
        cfg.train.iterations,
        result.cloud.len(),
        result.final_loss
    );
    Ok(())
}

fn time_tag(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("t{:04}", t as i64)
    } else {
        format!("t{t:.3}")
    }
}

fn dump_slice(dir: &Path, name: &str, volume: &Volume, window: [f32; 2]) -> Result<(), Failure> {
    let j = volume.grid.dims[1] / 2;
    let slice = coronal_slice(volume, j);
    write_pgm(&dir.join(format!("{name}.pgm")), &slice, volume.grid.dims[0], (window[0], window[1]))?;
    write_bytes(&dir.join(format!("{name}.f32")), &f32_to_bytes(slice))?;
    Ok(())
}

struct LoadedRun {
    record: RunRecord,
    cloud: ffdsplat::cloud::GaussianCloud,
    motion: ffdsplat::engine::MotionState,
}

fn load_run(dir: &Path) -> Result<LoadedRun, Failure> {
    Ok(LoadedRun {
        record: read_json(&dir.join(RUN_FILE))?,
        cloud: read_cloud(&dir.join(CLOUD_FINAL))?,
        motion: read_motion(&dir.join(MOTION_FINAL))?,
    })
}

fn evaluate(cfg: EvaluateConfig) -> Result<(), Failure> {
    let truth_path = cfg.data.join(TRUTH_FILE);
    if !truth_path.exists() {
        return Err(Failure::Validation(format!("missing ground truth {}", truth_path.display())));
    }
    let truth: TruthBundle = read_json(&truth_path)?;
    let (meta, _) = read_projection_set(&cfg.data)?;
    let run = load_run(&cfg.checkpoint)?;
    let frozen = run.record.config.train.freeze_motion;
    let mut times = if cfg.all_times {
        (0..truth.n_times).map(|t| t as f64).collect()
    } else {
        uniform_times(truth.n_times, cfg.samples)
    };
    if cfg.mean_time {
        let t = mean_position_time(&truth)?;
        if !times.contains(&t) {
            times.push(t);
        }
    }
    let grid = run.record.grid;
    let report = evaluate_run(&run.cloud, &run.motion, frozen, &truth, &meta.geometry, &grid, &times)?;
    write_json(&cfg.out, &report)?;
    if let Some(dir) = &cfg.slices {
        for &t in &times {
            let fit = fitted_volume(&run.cloud, &run.motion, frozen, t, &grid)?;
            dump_slice(dir, &format!("fit_{}", time_tag(t)), &fit, cfg.window)?;
            dump_slice(dir, &format!("truth_{}", time_tag(t)), &truth.volume(t, &grid)?, cfg.window)?;
        }
    }
    println!(
        "{} time points: mean PSNR {:.2} dB, mean RMSE {:.4e} mm^-1{}",
        report.per_time.len(),
        report.mean_psnr,
        report.mean_rmse,
        report
            .dvf
            .as_ref()
            .map(|d| format!(", median DVF error {:.3} mm", d.median))
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(Serialize)]
struct DvfMeta {
    format_version: u32,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    components: usize,
    units: &'static str,
    order: &'static str,
    file: String,
    sha256: String,
}

fn export(cfg: ExportConfig) -> Result<(), Failure> {
    let run = load_run(&cfg.checkpoint)?;
    let frozen = run.record.config.train.freeze_motion;
    let grid = run.record.grid;
    let geometry = match &cfg.data {
        Some(d) => Some(read_projection_set(d)?.0.geometry),
        None => None,
    };
    let out = &cfg.out;
    let splat = run.record.config.train.splat_config();
    for &t in &cfg.times {
        let tag = time_tag(t);
        let snap = run.motion.snapshot(&run.cloud, t, frozen)?;
        let mut vol = rasterize_to_volume(&snap.kernels, &grid);
        if cfg.clamp {
            for v in &mut vol.data {
                *v = v.clamp(cfg.window[0], cfg.window[1]);
            }
        }
        write_volume(&out.join(format!("volume_{tag}.json")), &vol)?;
        dump_slice(out, &format!("coronal_{tag}"), &vol, cfg.window)?;

        // Per-Gaussian motion has no dense field.
        if frozen || run.motion.mode != MotionMode::PerGaussian {
            let dvf = if frozen {
                vec![[0.0; 3]; grid.n_voxels()]
            } else {
                sample_dvf(&run.motion.model, &grid, t)?
            };
            let bytes = f32_to_bytes(dvf.iter().flat_map(|d| d.map(|c| c as f32)));
            let file = format!("dvf_{tag}.f32");
            write_bytes(&out.join(&file), &bytes)?;
            write_json(
                &out.join(format!("dvf_{tag}.json")),
                &DvfMeta {
                    format_version: FORMAT_VERSION,
                    dims: grid.dims,
                    spacing: grid.spacing,
                    origin: grid.origin,
                    components: 3,
                    units: "mm",
                    order: "x-fastest, components interleaved",
                    file,
                    sha256: sha256_hex(&bytes),
                },
            )?;
        }

        if let Some(geom) = &geometry {
            for v in (0..geom.n_views()).filter(|&v| geom.time_indices[v] as f64 == t) {
                let pose = geom.view_pose(v)?;
                let img = render(&snap.kernels, &pose, geom, &splat);
                let values: Vec<f32> = img.data.iter().map(|&x| x as f32).collect();
                let name = format!("render_{tag}_view{v:04}");
                write_bytes(&out.join(format!("{name}.f32")), &f32_to_bytes(values.iter().copied()))?;
                let peak = img.max_value().max(1e-12) as f32;
                write_pgm(&out.join(format!("{name}.pgm")), &values, img.cols, (0.0, peak))?;
            }
        }
    }
    println!("exported {} time points to {}", cfg.times.len(), out.display());
    Ok(())
}

fn selftest() -> Result<(), Failure> {
    let results = ffdsplat::selftest::run_all();
    let mut ok = true;
    for r in &results {
        println!(
            "{} {:<32} {:.3e} (tolerance {:.1e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Selftest)
    }
}


use ffdsplat::cloud::{GaussianCloud, GridSpec, Volume};
use ffdsplat::engine::{MetricRecord, MotionState, TrainConfig};
use ffdsplat::io::{
    read_cloud, read_metrics_log, read_motion, read_projection_set, read_volume, write_cloud, write_metrics_log,
    write_motion, write_projection_set, write_volume,
};
use ffdsplat::phantom::{make_dataset, DatasetSpec, NoiseSpec};
use ffdsplat::warp::MotionMode;
use ffdsplat::Error;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        views: 6,
        rows: 24,
        cols: 20,
        pixel_pitch: 6.0,
        grid_dims: 16,
        voxel: 5.0,
        n_blobs: 3,
        ..Default::default()
    }
}

#[test]
fn projection_set_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&small_spec()).unwrap();
    let noise = Some(NoiseSpec { fluence: 1e6, sigma: 4.0 });
    let meta = write_projection_set(dir.path(), &data.geometry, &data.projections, noise, Some(7)).unwrap();
    let (back, images) = read_projection_set(dir.path()).unwrap();
    assert_eq!(back, meta);
    assert_eq!(back.geometry, data.geometry);
    // Projections are stored as f32; the dataset is already quantized.
    assert_eq!(images, data.projections);

    std::fs::write(dir.path().join(&meta.views[2].file), vec![0u8; 24 * 20 * 4]).unwrap();
    assert!(matches!(read_projection_set(dir.path()), Err(Error::Format { .. })));
    std::fs::remove_file(dir.path().join(&meta.views[1].file)).unwrap();
    assert!(read_projection_set(dir.path()).is_err());
}

#[test]
fn volume_round_trip_and_size_check() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec {
        dims: [5, 4, 3],
        spacing: [1.0, 2.0, 3.0],
        origin: [-2.0, -3.0, -3.0],
    };
    let mut vol = Volume::zeros(grid);
    for (i, v) in vol.data.iter_mut().enumerate() {
        *v = i as f32 * 0.25 - 3.0;
    }
    let path = dir.path().join("vol.json");
    write_volume(&path, &vol).unwrap();
    assert_eq!(read_volume(&path).unwrap(), vol);
    // x-fastest: voxel (1, 0, 0) is the second value.
    let raw = std::fs::read(dir.path().join("vol.f32")).unwrap();
    assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), vol.at(1, 0, 0));
    std::fs::write(dir.path().join("vol.f32"), &raw[..raw.len() - 4]).unwrap();
    assert!(read_volume(&path).is_err());
}

fn sample_cloud(n: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new();
    for i in 0..n {
        let x = i as f64;
        cloud.push(0.1 * x - 1.0, [x, -x / 3.0, 1e-9 * x], [1.0, 0.1 * x, -0.2, 0.3], [0.5, -1.0 / 7.0, x.ln_1p()]);
    }
    cloud
}

#[test]
fn cloud_checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let cloud = sample_cloud(17);
    write_cloud(&path, &cloud).unwrap();
    assert_eq!(read_cloud(&path).unwrap(), cloud);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"FSCLOUD\0");
    assert_eq!(bytes.len(), 8 + 4 + 8 + 17 * 11 * 8);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_cloud(&path), Err(Error::Format { .. })));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_cloud(&path).is_err());
}

#[test]
fn motion_checkpoint_round_trip_for_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let cloud = sample_cloud(9);
    for mode in [MotionMode::Di, MotionMode::DecoupledFfd, MotionMode::PerGaussian] {
        let cfg = TrainConfig {
            mode,
            ..Default::default()
        };
        let motion = MotionState::initial(&cfg, &spec.grid(), spec.views, cloud.len()).unwrap();
        let path = dir.path().join(format!("{}.bin", mode.as_str()));
        write_motion(&path, &motion).unwrap();
        assert_eq!(read_motion(&path).unwrap(), motion, "{mode:?}");
    }
}

#[test]
fn metrics_log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let log: Vec<MetricRecord> = (0..4)
        .map(|i| MetricRecord {
            iteration: i * 100,
            loss: 1.0 / (i as f64 + 3.0),
            kernels: 10 + i,
            fold_incidents: i,
            clamped: 0,
            skipped_updates: 0,
            wall_time_s: 0.1 * i as f64,
            full_loss: (i == 3).then_some(0.123_456_789_012_345_67),
        })
        .collect();
    write_metrics_log(&path, &log).unwrap();
    assert_eq!(read_metrics_log(&path).unwrap(), log);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
}

//! Training loop: warp, render, loss, backward, Adam, density control.

use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::{quat_to_rotation, GaussianCloud, GridSpec, ScaleBounds, Volume};
use crate::error::{Error, Result};
use crate::ffd::{FfdMotionModel, LatticeSpec, POSITION_CHANNELS};
use crate::geometry::ScanGeometry;
use crate::optim::{l2_loss, AdamParams, AdamState, Schedule, StepOutcome};
use crate::rng::{named_rng, Stream};
use crate::splat::{project_all, render_splats, splats_backward, DetectorImage, SplatConfig};
use crate::warp::{warp, warp_backward, CloudSnapshot, KernelGradRef, MotionMode, PerGaussianWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub density: Schedule,
    /// Multiplied by the scene scale.
    pub position: Schedule,
    pub rotation: Schedule,
    pub scale: Schedule,
    /// Position channels are multiplied by the scene scale.
    pub lattice: Schedule,
    pub temporal: Schedule,
    /// Per-kernel motion weights; position channels scaled like `lattice`.
    pub per_gaussian: Schedule,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            density: Schedule::new(1e-2, 1e-3),
            position: Schedule::new(2e-4, 2e-6),
            rotation: Schedule::new(1e-3, 1e-4),
            scale: Schedule::new(5e-3, 5e-4),
            lattice: Schedule::new(1e-4, 1e-5),
            temporal: Schedule::new(1e-2, 1e-3),
            per_gaussian: Schedule::new(1e-4, 1e-5),
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        self.density.validate("density")?;
        self.position.validate("position")?;
        self.rotation.validate("rotation")?;
        self.scale.validate("scale")?;
        self.lattice.validate("lattice")?;
        self.temporal.validate("temporal")?;
        self.per_gaussian.validate("per_gaussian")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Mean image-space positional gradient norm above which a kernel is densified.
    pub threshold: f64,
    pub interval: usize,
    pub start: usize,
    /// Densification stops after this fraction of the iterations.
    pub stop_fraction: f64,
    /// Kernels with `ρ < prune_ratio · max ρ` are removed.
    pub prune_ratio: f64,
    /// Kernels whose largest scale exceeds this (mm) are split, smaller ones cloned.
    pub split_scale: f64,
    pub split_factor: f64,
    pub max_kernels: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            threshold: 5e-8,
            interval: 100,
            start: 500,
            stop_fraction: 0.5,
            prune_ratio: 1e-4,
            split_scale: 3.2,
            split_factor: 1.6,
            max_kernels: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub densify: DensifyConfig,
    pub mode: MotionMode,
    /// Bypass the warp entirely (static reconstruction).
    pub freeze_motion: bool,
    pub rank: usize,
    pub lattice_spacing_voxels: f64,
    pub temporal_spacing: f64,
    /// Std of the seeded initial temporal controls.
    pub temporal_init_std: f64,
    pub init_points: usize,
    /// Voxels above this fraction of the volume maximum seed kernels.
    pub init_threshold: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    /// Overrides the grid half-extent used to scale positional rates (mm).
    pub scene_scale: Option<f64>,
    pub low_pass: f64,
    pub tile_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            densify: DensifyConfig::default(),
            mode: MotionMode::Di,
            freeze_motion: false,
            rank: 2,
            lattice_spacing_voxels: 8.0,
            temporal_spacing: 4.0,
            temporal_init_std: 0.1,
            init_points: 80_000,
            init_threshold: 0.05,
            seed: 0,
            deterministic: true,
            checkpoint_interval: 5000,
            log_interval: 100,
            scene_scale: None,
            low_pass: 0.3,
            tile_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.rank == 0 || self.log_interval == 0 || self.densify.interval == 0 || self.tile_size == 0 {
            return Err(Error::Config("rank, log_interval, densify interval and tile_size must be >= 1".into()));
        }
        if !(self.temporal_spacing > 0.0 && self.lattice_spacing_voxels > 0.0) {
            return Err(Error::Config("control spacings must be positive".into()));
        }
        if !(self.densify.split_factor > 1.0) || self.densify.max_kernels == 0 {
            return Err(Error::Config("split_factor must exceed 1 and max_kernels be >= 1".into()));
        }
        self.lr.validate()
    }

    pub fn splat_config(&self) -> SplatConfig {
        SplatConfig {
            low_pass: self.low_pass,
            tile_size: self.tile_size,
            deterministic: self.deterministic,
        }
    }
}

/// Motion parameters being optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionState {
    pub mode: MotionMode,
    pub model: FfdMotionModel,
    pub per_gaussian: Option<PerGaussianWeights>,
}

impl MotionState {
    /// Identity motion on the lattice covering `grid`; temporal controls
    /// get small seeded values so the low-rank product is not stuck at zero.
    pub fn initial(cfg: &TrainConfig, grid: &GridSpec, n_times: usize, n_kernels: usize) -> Result<Self> {
        let spec = LatticeSpec::covering(grid, cfg.lattice_spacing_voxels);
        let mut model = FfdMotionModel::zeros(spec, cfg.rank, cfg.mode.lattice_channels(), n_times, cfg.temporal_spacing)?;
        let mut rng = named_rng(cfg.seed, Stream::Init, 1);
        for c in &mut model.temporal.controls {
            *c = cfg.temporal_init_std * rng.sample::<f64, _>(StandardNormal);
        }
        let per_gaussian = (cfg.mode == MotionMode::PerGaussian).then(|| PerGaussianWeights::zeros(n_kernels, cfg.rank));
        Ok(Self {
            mode: cfg.mode,
            model,
            per_gaussian,
        })
    }

    pub fn snapshot(&self, cloud: &GaussianCloud, t: f64, frozen: bool) -> Result<CloudSnapshot> {
        let mode = (!frozen).then_some(self.mode);
        warp(mode, cloud, &self.model, self.per_gaussian.as_ref(), t)
    }
}

/// Running positional-gradient statistics per kernel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn mean(&self, n: usize) -> f64 {
        if self.count[n] == 0 {
            0.0
        } else {
            self.grad_sum[n] / self.count[n] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    /// For every kernel of the new cloud, the old kernel whose optimizer
    /// state it inherits (`None` for newly created kernels).
    pub source: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Prunes faint kernels and clones or splits kernels with large mean
/// positional gradient. Offspring inherit per-kernel motion weights.
pub fn density_control(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    mut per_gaussian: Option<&mut PerGaussianWeights>,
    rng: &mut impl Rng,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    let max_rho = (0..n).map(|i| cloud.density(i)).fold(0.0, f64::max);
    let prune_below = cfg.prune_ratio * max_rho;
    let keep: Vec<bool> = (0..n).map(|i| cloud.density(i) >= prune_below).collect();
    let n_kept = keep.iter().filter(|&&k| k).count();

    let mut candidates: Vec<(usize, f64)> = (0..n)
        .filter(|&i| keep[i])
        .map(|i| (i, stats.mean(i)))
        .filter(|&(_, g)| g > cfg.threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let budget = cfg.max_kernels.saturating_sub(n_kept);
    candidates.truncate(budget);
    let mut chosen: Vec<usize> = candidates.into_iter().map(|c| c.0).collect();
    chosen.sort_unstable();

    let mut out = GaussianCloud::new();
    let mut source = Vec::new();
    let mut spawned = GaussianCloud::new();
    let mut spawned_from = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let mut chosen_iter = chosen.iter().peekable();
    for i in 0..n {
        let is_chosen = chosen_iter.peek() == Some(&&i);
        if is_chosen {
            chosen_iter.next();
        }
        if !keep[i] {
            continue;
        }
        let rho = cloud.density(i);
        let mu = cloud.mean(i);
        let q = cloud.rotations[i];
        let s = cloud.log_scales[i];
        let max_scale = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        let sample = |rng: &mut dyn rand::RngCore, spread: f64| -> Result<[f64; 3]> {
            let r = quat_to_rotation(&q)?;
            let z = Vector3::from_fn(|a, _| s[a].exp() * spread * rng.sample::<f64, _>(StandardNormal));
            Ok((mu + r * z).into())
        };
        if is_chosen && max_scale > cfg.split_scale {
            let ls = s.map(|v| v - cfg.split_factor.ln());
            for _ in 0..2 {
                let m = sample(rng, 1.0)?;
                spawned.push(rho * 0.5, m, q, ls);
                spawned_from.push(i);
            }
            split += 1;
            continue;
        }
        if is_chosen {
            let m = sample(rng, 0.5)?;
            spawned.push(rho * 0.5, m, q, s);
            spawned_from.push(i);
            out.push(rho * 0.5, mu.into(), q, s);
            cloned += 1;
        } else {
            out.density_raw.push(cloud.density_raw[i]);
            out.means.push(cloud.means[i]);
            out.rotations.push(q);
            out.log_scales.push(s);
        }
        source.push(Some(i));
    }
    let pruned = n - n_kept;
    out.extend_from(&spawned);
    source.extend(std::iter::repeat_n(None, spawned.len()));

    if let Some(w) = per_gaussian.as_deref_mut() {
        let stride = w.stride();
        let mut values = Vec::with_capacity(out.len() * stride);
        for s in source.iter().flatten() {
            values.extend_from_slice(w.kernel(*s));
        }
        for &p in &spawned_from {
            values.extend_from_slice(w.kernel(p));
        }
        w.values = values;
    }
    *cloud = out;
    Ok(DensifyOutcome {
        source,
        cloned,
        split,
        pruned,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    /// Mean single-view loss since the previous record.
    pub loss: f64,
    pub kernels: usize,
    pub fold_incidents: usize,
    pub clamped: usize,
    pub skipped_updates: usize,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_loss: Option<f64>,
}

/// Emitted on every checkpoint (and after the final iteration).
pub struct Checkpoint<'a> {
    pub iteration: usize,
    pub is_final: bool,
    pub cloud: &'a GaussianCloud,
    pub motion: &'a MotionState,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub motion: MotionState,
    pub log: Vec<MetricRecord>,
    /// Mean loss over all views at the end of training.
    pub final_loss: f64,
}

struct Groups {
    density: AdamState,
    means: AdamState,
    rotations: AdamState,
    scales: AdamState,
    lattice: AdamState,
    temporal: AdamState,
    per_gaussian: AdamState,
}

/// Mutable training state; [`Trainer::run`] drives it to completion.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    geom: &'a ScanGeometry,
    projections: &'a [DetectorImage],
    pub cloud: GaussianCloud,
    pub motion: MotionState,
    bounds: ScaleBounds,
    scene_scale: f64,
    splat: SplatConfig,
    groups: Groups,
    stats: DensifyStats,
    lattice_lr_scale: Vec<f64>,
    pg_lr_scale: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
    densify_rng: rand_chacha::ChaCha8Rng,
    pub iteration: usize,
}

/// Per-element rate multipliers: scene scale on position channels, 1 elsewhere.
fn channel_scales(len: usize, channels: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|i| if i % channels < POSITION_CHANNELS { scale } else { 1.0 })
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        geom: &'a ScanGeometry,
        projections: &'a [DetectorImage],
        grid: &GridSpec,
        init: GaussianCloud,
    ) -> Result<Self> {
        cfg.validate()?;
        geom.validate()?;
        grid.validate()?;
        if projections.len() != geom.n_views() {
            return Err(Error::DimensionMismatch(format!(
                "{} projections for {} views",
                projections.len(),
                geom.n_views()
            )));
        }
        if let Some(p) = projections
            .iter()
            .find(|p| p.rows != geom.detector.rows || p.cols != geom.detector.cols)
        {
            return Err(Error::DimensionMismatch(format!(
                "projection {}x{} vs detector {}x{}",
                p.rows, p.cols, geom.detector.rows, geom.detector.cols
            )));
        }
        if init.is_empty() {
            return Err(Error::Config("initial cloud is empty".into()));
        }
        let motion = MotionState::initial(&cfg, grid, geom.n_times(), init.len())?;
        let scene_scale = cfg.scene_scale.unwrap_or_else(|| {
            (0..3)
                .map(|a| grid.dims[a] as f64 * grid.spacing[a])
                .fold(0.0, f64::max)
                * 0.5
        });
        let n = init.len();
        let p = cfg.adam;
        let ch = motion.model.lattice.channels;
        let lattice_len = if cfg.mode == MotionMode::PerGaussian { 0 } else { motion.model.lattice.coeffs.len() };
        let pg_len = motion.per_gaussian.as_ref().map_or(0, |w| w.values.len());
        let groups = Groups {
            density: AdamState::new(n, p),
            means: AdamState::new(3 * n, p),
            rotations: AdamState::new(4 * n, p),
            scales: AdamState::new(3 * n, p),
            lattice: AdamState::new(lattice_len, p),
            temporal: AdamState::new(motion.model.temporal.controls.len(), p),
            per_gaussian: AdamState::new(pg_len, p),
        };
        let lattice_lr_scale = channel_scales(lattice_len, ch, scene_scale);
        let pg_lr_scale = channel_scales(pg_len, crate::ffd::DECOUPLED_CHANNELS, scene_scale);
        let mut cloud = init;
        let bounds = ScaleBounds::for_grid(grid);
        cloud.clamp_scales(&bounds);
        Ok(Self {
            splat: cfg.splat_config(),
            rng: named_rng(cfg.seed, Stream::Train, 0),
            densify_rng: named_rng(cfg.seed, Stream::Densify, 0),
            cfg,
            geom,
            projections,
            cloud,
            motion,
            bounds,
            scene_scale,
            groups,
            stats: DensifyStats::new(n),
            lattice_lr_scale,
            pg_lr_scale,
            iteration: 0,
        })
    }

    pub fn scene_scale(&self) -> f64 {
        self.scene_scale
    }

    fn time_of(&self, view: usize) -> f64 {
        self.geom.time_indices[view] as f64
    }

    /// Rendered image of `view` under the current parameters.
    pub fn render_view(&self, view: usize) -> Result<DetectorImage> {
        let snap = self.motion.snapshot(&self.cloud, self.time_of(view), self.cfg.freeze_motion)?;
        let pose = self.geom.view_pose(view)?;
        let splats = project_all(&snap.kernels, &pose, self.geom, &self.splat);
        Ok(render_splats(&splats, self.geom.detector.rows, self.geom.detector.cols, &self.splat))
    }

    /// Mean loss over every view.
    pub fn projection_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for v in 0..self.geom.n_views() {
            total += l2_loss(&self.render_view(v)?, &self.projections[v])?.0;
        }
        Ok(total / self.geom.n_views() as f64)
    }

    /// One optimization step on a random view. Returns (loss, fold incidents,
    /// clamped kernels, skipped group updates).
    pub fn step(&mut self) -> Result<(f64, usize, usize, usize)> {
        let it = self.iteration;
        let total = self.cfg.iterations;
        let view = self.rng.random_range(0..self.geom.n_views());
        let t = self.time_of(view);
        let frozen = self.cfg.freeze_motion;
        let snap = self.motion.snapshot(&self.cloud, t, frozen)?;
        let pose = self.geom.view_pose(view)?;
        let splats = project_all(&snap.kernels, &pose, self.geom, &self.splat);
        let image = render_splats(&splats, self.geom.detector.rows, self.geom.detector.cols, &self.splat);
        let (loss, grad_image) = l2_loss(&image, &self.projections[view])?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, loss });
        }
        let rg = splats_backward(&splats, &snap.kernels, &pose, &grad_image, &self.splat);
        let wg = warp_backward(
            &snap,
            &self.cloud,
            &self.motion.model,
            self.motion.per_gaussian.as_ref(),
            KernelGradRef {
                density: &rg.density,
                mean: &rg.mean,
                cov: &rg.cov,
            },
        )?;
        for n in 0..self.cloud.len() {
            if rg.visible[n] {
                self.stats.grad_sum[n] += rg.image_mean_norm[n];
                self.stats.count[n] += 1;
            }
        }

        let lr = &self.cfg.lr;
        let g = &mut self.groups;
        let mut skipped = 0;
        let mut apply = |state: &mut AdamState, p: &mut [f64], gr: &[f64], rate: f64, scale: Option<&[f64]>| -> Result<()> {
            if state.step(p, gr, rate, scale)? == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            Ok(())
        };
        apply(&mut g.density, &mut self.cloud.density_raw, &wg.density_raw, lr.density.at(it, total), None)?;
        apply(
            &mut g.means,
            self.cloud.means.as_flattened_mut(),
            wg.means.as_flattened(),
            lr.position.at(it, total) * self.scene_scale,
            None,
        )?;
        apply(
            &mut g.rotations,
            self.cloud.rotations.as_flattened_mut(),
            wg.rotations.as_flattened(),
            lr.rotation.at(it, total),
            None,
        )?;
        apply(
            &mut g.scales,
            self.cloud.log_scales.as_flattened_mut(),
            wg.log_scales.as_flattened(),
            lr.scale.at(it, total),
            None,
        )?;
        if let Some(mg) = &wg.motion {
            if !g.lattice.is_empty() {
                apply(
                    &mut g.lattice,
                    &mut self.motion.model.lattice.coeffs,
                    &mg.lattice,
                    lr.lattice.at(it, total),
                    Some(&self.lattice_lr_scale),
                )?;
            }
            apply(
                &mut g.temporal,
                &mut self.motion.model.temporal.controls,
                &mg.temporal,
                lr.temporal.at(it, total),
                None,
            )?;
        }
        if let (Some(w), Some(gw)) = (self.motion.per_gaussian.as_mut(), &wg.per_gaussian) {
            apply(
                &mut g.per_gaussian,
                &mut w.values,
                gw,
                lr.per_gaussian.at(it, total),
                Some(&self.pg_lr_scale),
            )?;
        }
        self.cloud.clamp_scales(&self.bounds);

        self.iteration += 1;
        let d = &self.cfg.densify;
        let stop = (d.stop_fraction * total as f64) as usize;
        if self.iteration >= d.start && self.iteration < stop && self.iteration % d.interval == 0 {
            self.densify()?;
        }
        Ok((loss, snap.fold_incidents, snap.clamped, skipped))
    }

    fn densify(&mut self) -> Result<DensifyOutcome> {
        let out = density_control(
            &mut self.cloud,
            &self.stats,
            &self.cfg.densify,
            self.motion.per_gaussian.as_mut(),
            &mut self.densify_rng,
        )?;
        let g = &mut self.groups;
        g.density.reindex(&out.source, 1);
        g.means.reindex(&out.source, 3);
        g.rotations.reindex(&out.source, 4);
        g.scales.reindex(&out.source, 3);
        if let Some(w) = &self.motion.per_gaussian {
            g.per_gaussian.reindex(&out.source, w.stride());
            self.pg_lr_scale = channel_scales(w.values.len(), crate::ffd::DECOUPLED_CHANNELS, self.scene_scale);
        }
        self.cloud.clamp_scales(&self.bounds);
        self.stats = DensifyStats::new(self.cloud.len());
        Ok(out)
    }

    /// Runs the remaining iterations, logging every `log_interval` and
    /// passing checkpoints to `sink`.
    pub fn run(mut self, mut sink: impl FnMut(&Checkpoint<'_>) -> Result<()>) -> Result<TrainOutput> {
        let start = Instant::now();
        let mut log = Vec::new();
        let (mut loss_acc, mut n_acc, mut folds, mut clamped, mut skipped) = (0.0, 0usize, 0, 0, 0);
        while self.iteration < self.cfg.iterations {
            let (loss, f, c, s) = self.step()?;
            loss_acc += loss;
            n_acc += 1;
            folds += f;
            clamped += c;
            skipped += s;
            let it = self.iteration;
            let last = it == self.cfg.iterations;
            if it % self.cfg.log_interval == 0 || last {
                log.push(MetricRecord {
                    iteration: it,
                    loss: loss_acc / n_acc as f64,
                    kernels: self.cloud.len(),
                    fold_incidents: folds,
                    clamped,
                    skipped_updates: skipped,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    full_loss: None,
                });
                (loss_acc, n_acc, folds, clamped, skipped) = (0.0, 0, 0, 0, 0);
            }
            if !last && self.cfg.checkpoint_interval > 0 && it % self.cfg.checkpoint_interval == 0 {
                sink(&Checkpoint {
                    iteration: it,
                    is_final: false,
                    cloud: &self.cloud,
                    motion: &self.motion,
                })?;
            }
        }
        let final_loss = self.projection_loss()?;
        if !final_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss: final_loss,
            });
        }
        if let Some(rec) = log.last_mut() {
            rec.full_loss = Some(final_loss);
        }
        sink(&Checkpoint {
            iteration: self.iteration,
            is_final: true,
            cloud: &self.cloud,
            motion: &self.motion,
        })?;
        Ok(TrainOutput {
            cloud: self.cloud,
            motion: self.motion,
            log,
            final_loss,
        })
    }
}

/// Seeds a cloud from `init_volume` and trains it against `projections`.
pub fn train(
    cfg: &TrainConfig,
    geom: &ScanGeometry,
    projections: &[DetectorImage],
    init_volume: &Volume,
    sink: impl FnMut(&Checkpoint<'_>) -> Result<()>,
) -> Result<TrainOutput> {
    let grid = init_volume.grid;
    let max = init_volume.data.iter().cloned().fold(0.0f32, f32::max) as f64;
    if !(max > 0.0) {
        return Err(Error::EmptySupport(0.0));
    }
    let cloud = crate::cloud::sample_cloud_from_volume(
        init_volume,
        cfg.init_points,
        cfg.init_threshold * max,
        cfg.seed,
        &ScaleBounds::for_grid(&grid),
    )?;
    Trainer::new(cfg.clone(), geom, projections, &grid, cloud)?.run(sink)
}

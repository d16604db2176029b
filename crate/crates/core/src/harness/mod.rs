//! End-to-end pipeline: dataset generation, closed-loop evaluation and the
//! variant ablation.

pub mod gradsuite;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{episode_path, read_episode, write_episode, Episode, NormBounds};
use crate::error::{Error, Result};
use crate::modelcore::{Model, ModelConfig, Variant};
use crate::numkernel::Tensor;
use crate::stacksim::{
    check_success, render, run_teacher, step_world, Command, Position, TaskSpec, TeacherScript, SIM_VERSION,
};
use crate::trainer::{load_checkpoint, save_checkpoint, train_with, write_loss_log, Checkpoint, TrainConfig};

pub use report::{AblationReport, NoiseSpread, TrialSet};

/// Cup start offsets are drawn uniformly from `±DEFAULT_JITTER` meters.
pub const DEFAULT_JITTER: f64 = 0.01;
pub const NOISE_DIAGNOSTIC_SIGMA: f64 = 0.05;
pub const NOISE_DIAGNOSTIC_SEEDS: usize = 10;
/// Allowed drift between the accumulated world clock and `steps * dt`.
pub const CLOCK_TOLERANCE: f64 = 1e-9;

/// Run the teacher at every position in `positions` and write one episode
/// each. Normalization bounds span the whole generated set.
pub fn generate_dataset(
    positions: &[Position],
    steps: usize,
    hz: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if positions.is_empty() {
        return Err(Error::Input("no positions requested".into()));
    }
    let mut recorded = Vec::with_capacity(positions.len());
    for &p in positions {
        let task = TaskSpec::new(p);
        let run = run_teacher(&task, steps, hz, 1.0)?;
        if !check_success(&run.final_state, &task) {
            return Err(Error::TeacherFailed(p.label().into()));
        }
        let images: Vec<f32> = run.frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        let raw: Vec<f32> = run.commands.iter().flat_map(|c| c.to_vec().into_iter().map(|v| v as f32)).collect();
        recorded.push((p, images, raw));
    }
    let rows: Vec<Vec<f64>> = recorded
        .iter()
        .flat_map(|(_, _, raw)| raw.chunks_exact(3).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let bounds = NormBounds::from_rows(rows.iter().map(Vec::as_slice))?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(recorded.len());
    for (p, images, raw) in recorded {
        let ep = Episode::new(p.label(), hz, seed, SIM_VERSION, images, raw, bounds.clone())?;
        let path = episode_path(out_dir, p.label(), seed);
        write_episode(&ep, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every `.hsep` file in `dir`, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "hsep"));
    paths.sort();
    paths.iter().map(|p| read_episode(p)).collect()
}

/// Episodes recorded at teaching positions.
pub fn training_episodes(dir: &Path) -> Result<Vec<Episode>> {
    let eps: Vec<Episode> = load_dataset(dir)?
        .into_iter()
        .filter(|e| e.meta.position.parse::<Position>().is_ok_and(Position::is_taught))
        .collect();
    if eps.is_empty() {
        return Err(Error::Input(format!("no taught-position episodes in {}", dir.display())));
    }
    Ok(eps)
}

/// Teacher success at every position for a speed factor.
pub fn teacher_gate(steps: usize, hz: f64, speed: f64) -> Result<Vec<(Position, bool)>> {
    Position::ALL
        .iter()
        .map(|&p| {
            let task = TaskSpec::new(p);
            let run = run_teacher(&task, steps, hz, speed)?;
            Ok((p, check_success(&run.final_state, &task)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Model steps per trial; the training episode length.
    pub steps: usize,
    pub hz: f64,
    pub speed: f64,
    pub noise: f64,
    pub trials: usize,
    pub seed: u64,
    /// Half-width of the uniform cup offset; 0 disables jitter.
    pub jitter: f64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed >= 1.0) || !self.speed.is_finite() {
            return Err(Error::Config(format!("speed factor must be >= 1, got {}", self.speed)));
        }
        if !(self.hz > 0.0) {
            return Err(Error::Config(format!("hz must be positive, got {}", self.hz)));
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("closed loop needs at least one step".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.speed * self.hz)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub position: Position,
    pub trial: usize,
    pub speed: f64,
    pub noise: f64,
    /// Cup offset along y for this trial.
    pub offset: f64,
    pub success: bool,
    /// Hand `(y, z)` after every executed step.
    pub trajectory: Vec<[f64; 2]>,
    pub sim_time: f64,
    /// Wall time of each inference call; not persisted.
    #[serde(skip)]
    pub step_ms: Vec<f64>,
}

/// What produces commands in the closed loop.
pub enum Controller<'a> {
    /// Replays the scripted teacher.
    Teacher,
    Model {
        ckpt: &'a Checkpoint,
        model: Box<Model>,
    },
}

impl<'a> Controller<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint) -> Result<Self> {
        Ok(Self::Model { ckpt, model: Box::new(ckpt.build_model()?) })
    }
}

/// Trial RNG: stream `trial` of the run seed.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn add_noise(image: &mut Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.data_mut() {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(())
}

pub fn run_trial(
    controller: &Controller<'_>,
    position: Position,
    trial: usize,
    cfg: &LoopConfig,
) -> Result<TrialResult> {
    cfg.validate()?;
    let mut rng = trial_rng(cfg.seed, trial);
    let offset = if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
    let task = TaskSpec::jittered(position, offset);
    let dt = cfg.dt();
    let mut world = task.initial_state();
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut step_ms = Vec::new();
    match controller {
        Controller::Teacher => {
            let script = TeacherScript::new(&task, cfg.steps, cfg.hz)?;
            for cmd in script.commands() {
                world = step_world(&world, cmd, dt)?;
                trajectory.push([world.gripper_y, world.gripper_z]);
            }
        }
        Controller::Model { ckpt, model } => {
            let mut command = task.home();
            let mut motion: Vec<f32> = ckpt.bounds.normalize(&command.to_vec()).iter().map(|&v| v as f32).collect();
            let mut state = model.initial_state::<f32>();
            for _ in 0..cfg.steps {
                let mut frame = render(&world);
                add_noise(&mut frame, cfg.noise, &mut rng)?;
                let start = Instant::now();
                let (next, next_state) = model.predict_motion(&ckpt.params, &frame, &motion, &state)?;
                step_ms.push(start.elapsed().as_secs_f64() * 1e3);
                world = step_world(&world, &command, dt)?;
                trajectory.push([world.gripper_y, world.gripper_z]);
                let raw = ckpt.bounds.denormalize(&next.iter().map(|&v| v as f64).collect::<Vec<_>>());
                command = Command::from_slice(&raw)?;
                motion = next;
                state = next_state;
            }
        }
    }
    let expected = cfg.steps as f64 * dt;
    if (world.time - expected).abs() > CLOCK_TOLERANCE {
        return Err(Error::Input(format!("sim clock {} drifted from {expected}", world.time)));
    }
    Ok(TrialResult {
        position,
        trial,
        speed: cfg.speed,
        noise: cfg.noise,
        offset,
        success: check_success(&world, &task),
        trajectory,
        sim_time: world.time,
        step_ms,
    })
}

/// `cfg.trials` independent trials, returned in trial order.
pub fn run_closed_loop(controller: &Controller<'_>, position: Position, cfg: &LoopConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let run = |t: usize| run_trial(controller, position, t, cfg);
    match controller {
        Controller::Teacher => (0..cfg.trials).map(run).collect(),
        Controller::Model { .. } => (0..cfg.trials).into_par_iter().map(run).collect(),
    }
}

/// Mean standard deviation of predicted motion (normalized units) across
/// `seeds` pixel-noise draws, with the recorded motion fed as input.
pub fn noise_diagnostic(ckpt: &Checkpoint, episode: &Episode, sigma: f64, seeds: usize) -> Result<f64> {
    if seeds < 2 {
        return Err(Error::Config("noise diagnostic needs at least two seeds".into()));
    }
    let model = ckpt.build_model()?;
    let ep = episode.renormalized(&ckpt.bounds)?;
    let runs: Vec<Vec<f32>> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let mut rng = trial_rng(seed as u64, 0);
            let mut state = model.initial_state::<f32>();
            let mut out = Vec::with_capacity(ep.steps() * ep.dims());
            for t in 0..ep.steps() {
                let mut image = ep.image_tensor(t);
                add_noise(&mut image, sigma, &mut rng)?;
                let (next, s) = model.predict_motion(&ckpt.params, &image, ep.norm_row(t), &state)?;
                out.extend(next);
                state = s;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = seeds as f64;
    let len = runs[0].len();
    let total: f64 = (0..len)
        .map(|i| {
            let mean = runs.iter().map(|r| r[i] as f64).sum::<f64>() / n;
            (runs.iter().map(|r| (r[i] as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum();
    Ok(total / len as f64)
}

/// Open-loop RMSE (normalized units) of the model's own rollout against
/// the recorded motion of `episode`.
pub fn open_loop_rmse(ckpt: &Checkpoint, episode: &Episode) -> Result<f64> {
    let model = ckpt.build_model()?;
    let ep = episode.renormalized(&ckpt.bounds)?;
    let images: Vec<Tensor<f32>> = (0..ep.steps()).map(|t| ep.image_tensor(t)).collect();
    let steps = ep.steps() - 1;
    let predicted = model.rollout_open_loop(&ckpt.params, &images, ep.norm_row(0), steps)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, row) in predicted.iter().enumerate() {
        for (p, &target) in row.iter().zip(ep.norm_row(t + 1)) {
            sum += (*p as f64 - target as f64).powi(2);
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

pub fn checkpoint_path(dir: &Path, variant: Variant) -> PathBuf {
    dir.join(format!("{}.hsck", variant.name().to_lowercase()))
}

/// Loads the variant's checkpoint from `dir`, training and saving it first
/// when absent and `allow_train` is set.
pub fn ensure_checkpoint(
    variant: Variant,
    dir: &Path,
    episodes: &[Episode],
    train: &TrainConfig,
    allow_train: bool,
    on_epoch: impl FnMut(&crate::trainer::EpochLoss),
) -> Result<Checkpoint> {
    let path = checkpoint_path(dir, variant);
    if path.exists() {
        let ck = load_checkpoint(&path)?;
        ck.expect_variant(variant)?;
        return Ok(ck);
    }
    if !allow_train {
        return Err(Error::Input(format!("missing checkpoint {} and training is disabled", path.display())));
    }
    let (ck, log) = train_with(episodes, &ModelConfig::new(variant), train, on_epoch)?;
    fs::create_dir_all(dir)?;
    save_checkpoint(&ck, &path)?;
    write_loss_log(&log, &dir.join(format!("{}_loss.csv", variant.name().to_lowercase())))?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub positions: Vec<Position>,
    pub speed: f64,
    pub noise: f64,
    pub trials: usize,
    pub seed: u64,
    pub jitter: f64,
    pub train: TrainConfig,
    pub allow_train: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            positions: Position::ALL.to_vec(),
            speed: 3.0,
            noise: 0.0,
            trials: 10,
            seed: 0,
            jitter: DEFAULT_JITTER,
            train: TrainConfig::default(),
            allow_train: true,
        }
    }
}

/// Closed-loop grid over variants and positions. Writes `report.csv`,
/// `report.json`, `trials.json` and the trajectory SVGs into `out_dir`.
pub fn evaluate_ablation(
    data_dir: &Path,
    ckpt_dir: &Path,
    out_dir: &Path,
    cfg: &AblationConfig,
) -> Result<(AblationReport, Vec<TrialSet>)> {
    let episodes = training_episodes(data_dir)?;
    let steps = episodes[0].steps();
    let hz = episodes[0].meta.hz;
    let mut sets = Vec::new();
    let mut noise_spread = Vec::new();
    for &variant in &cfg.variants {
        let ck = ensure_checkpoint(variant, ckpt_dir, &episodes, &cfg.train, cfg.allow_train, |_| {})?;
        let controller = Controller::from_checkpoint(&ck)?;
        for &position in &cfg.positions {
            let loop_cfg = LoopConfig {
                steps,
                hz,
                speed: cfg.speed,
                noise: cfg.noise,
                trials: cfg.trials,
                seed: cfg.seed,
                jitter: cfg.jitter,
            };
            let trials = run_closed_loop(&controller, position, &loop_cfg)?;
            sets.push(TrialSet { variant, position, trials });
        }
        noise_spread.push(NoiseSpread {
            variant,
            sigma: NOISE_DIAGNOSTIC_SIGMA,
            seeds: NOISE_DIAGNOSTIC_SEEDS,
            motion_std: noise_diagnostic(&ck, &episodes[0], NOISE_DIAGNOSTIC_SIGMA, NOISE_DIAGNOSTIC_SEEDS)?,
        });
    }
    let report = AblationReport::build(&sets, cfg.speed, cfg.noise, noise_spread);
    write_reports(&report, &sets, out_dir)?;
    Ok((report, sets))
}

pub fn write_reports(report: &AblationReport, sets: &[TrialSet], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.json"), to_json_pretty(report)?)?;
    fs::write(out_dir.join("trials.json"), to_json_pretty(&sets)?)?;
    report::write_trajectory_svgs(sets, out_dir)?;
    Ok(())
}

fn to_json_pretty<S: Serialize>(v: &S) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Input(e.to_string()))
}

pub fn read_trial_sets(path: &Path) -> Result<Vec<TrialSet>> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_cfg(speed: f64) -> LoopConfig {
        LoopConfig { steps: 200, hz: 10.0, speed, noise: 0.0, trials: 2, seed: 4, jitter: DEFAULT_JITTER }
    }

    #[test]
    fn teacher_oracle_succeeds_everywhere() {
        for speed in [1.0, 3.0] {
            for p in Position::ALL {
                let results = run_closed_loop(&Controller::Teacher, p, &loop_cfg(speed)).unwrap();
                assert!(results.iter().all(|r| r.success), "{p} at {speed}");
                assert!(results.iter().all(|r| r.trajectory.len() == 200));
            }
        }
    }

    #[test]
    fn clock_spans_steps_over_speed() {
        let r = run_trial(&Controller::Teacher, Position::C, 0, &loop_cfg(3.0)).unwrap();
        assert!((r.sim_time - 200.0 / 30.0).abs() <= CLOCK_TOLERANCE);
        assert_eq!(loop_cfg(3.0).dt(), 1.0 / 30.0);
        assert_eq!(400.0 * loop_cfg(3.0).dt() * 3.0, 40.0);
    }

    #[test]
    fn jitter_differs_across_trials_and_repeats_per_seed() {
        let a = run_closed_loop(&Controller::Teacher, Position::B, &loop_cfg(1.0)).unwrap();
        let b = run_closed_loop(&Controller::Teacher, Position::B, &loop_cfg(1.0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].offset, a[1].offset);
        assert!(a.iter().all(|r| r.offset.abs() <= DEFAULT_JITTER));
    }

    #[test]
    fn speed_below_one_is_rejected() {
        assert!(loop_cfg(0.5).validate().is_err());
    }

    #[test]
    fn dataset_generation_is_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let pa = generate_dataset(&[Position::B], 200, 10.0, 7, &a).unwrap();
        let pb = generate_dataset(&[Position::B], 200, 10.0, 7, &b).unwrap();
        assert_eq!(pa.len(), 1);
        assert_eq!(pa[0].file_name().unwrap(), "B_7.hsep");
        assert_eq!(fs::read(&pa[0]).unwrap(), fs::read(&pb[0]).unwrap());
        let ep = read_episode(&pa[0]).unwrap();
        assert_eq!((ep.steps(), ep.dims()), (200, 3));
        assert!(training_episodes(&a).is_err());
    }
}

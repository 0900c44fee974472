//! Simulated-feedback experiments over seeded scene suites.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counter::{synthesize_counter_for_density, CounterOptions, Miscalibration};
use crate::density::{render_density, DotScene};
use crate::error::{Error, Result};
use crate::session::{InteractiveSession, SessionConfig};
use crate::sim::{RangeFamily, SimulatedUser, UserConfig};

/// How the synthetic scenes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Candidate square sizes; each scene draws one uniformly.
    pub sizes: Vec<usize>,
    pub sigma: f64,
    pub suite_seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            scenes: 50,
            min_objects: 5,
            max_objects: 60,
            sizes: vec![64, 96, 128, 192, 256],
            sigma: 2.0,
            suite_seed: 2024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    /// Adapt and re-segment after every feedback.
    #[default]
    Consecutive,
    /// Collect all feedback on the initial segmentation, then adapt once.
    NonConsecutive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OutputPaths {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub suite: SuiteSpec,
    pub miscalibration: Miscalibration,
    pub user: UserConfig,
    pub family: RangeFamily,
    pub interactions: usize,
    pub seeds: Vec<u64>,
    pub mode: InteractionMode,
    pub session: SessionConfig,
    pub counter: CounterOptions,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: SuiteSpec::default(),
            miscalibration: Miscalibration::GlobalScale { alpha: 2.0 },
            user: UserConfig::default(),
            family: RangeFamily::default(),
            interactions: 5,
            seeds: vec![5, 10, 15],
            mode: InteractionMode::Consecutive,
            session: SessionConfig::default(),
            counter: CounterOptions::default(),
            output: OutputPaths::default(),
        }
    }
}

/// Seeds of the five-run protocol.
pub const FULL_PROTOCOL_SEEDS: [u64; 5] = [5, 10, 15, 20, 25];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.suite;
        if s.scenes == 0 || s.sizes.is_empty() || s.min_objects > s.max_objects {
            return Err(Error::InvalidConfig("suite needs scenes, sizes and min_objects <= max_objects".into()));
        }
        if let Some(&bad) = s.sizes.iter().find(|&&z| z < 8 || z % self.session.segmentation.downsample_factor != 0) {
            return Err(Error::InvalidConfig(format!(
                "scene size {bad} must be >= 8 and divisible by the downsample factor"
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.family.validate()?;
        self.miscalibration.validate(self.counter.channels)?;
        self.session.validate()
    }

    fn session_config(&self) -> SessionConfig {
        SessionConfig {
            family: self.family.clone(),
            ..self.session.clone()
        }
    }
}

/// Draws the scene suite; depends only on the suite spec.
pub fn generate_suite(spec: &SuiteSpec) -> Vec<DotScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.suite_seed);
    (0..spec.scenes)
        .map(|_| {
            let size = spec.sizes[rng.random_range(0..spec.sizes.len())];
            let n = rng.random_range(spec.min_objects..=spec.max_objects);
            let hi = size as f64;
            let dots = (0..n)
                .map(|_| [rng.random_range(0.0..hi), rng.random_range(0.0..hi)])
                .collect();
            DotScene {
                height: size,
                width: size,
                sigma: spec.sigma,
                dots,
            }
        })
        .collect()
}

/// One CSV row: a scene's totals after `iteration` feedback rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub scene_id: usize,
    pub seed: u64,
    pub iteration: usize,
    pub pred_total: f64,
    pub gt_total: f64,
    pub seg_ms: f64,
    pub adapt_ms: f64,
}

fn user_seed(run_seed: u64, scene_id: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(scene_id as u64)
}

/// Runs one scene through `config.interactions` simulated interactions.
/// A user running out of unselected regions ends the session early.
pub fn run_session(scene_id: usize, scene: &DotScene, seed: u64, config: &ExperimentConfig) -> Result<Vec<SessionRow>> {
    let gt = render_density(scene)?;
    let synth = synthesize_counter_for_density(&gt, &config.miscalibration, scene_id as u64, &config.counter)?;
    let gt_total = synth.ground_truth.total();
    let mut session = InteractiveSession::new(synth.counter, Some(synth.ground_truth.clone()), config.session_config())?;
    let mut user = SimulatedUser::new(config.user.clone(), config.family.clone(), user_seed(seed, scene_id));

    let row = |s: &InteractiveSession| SessionRow {
        scene_id,
        seed,
        iteration: s.iteration(),
        pred_total: s.predicted_total(),
        gt_total,
        seg_ms: s.timings().segment_ms,
        adapt_ms: s.timings().adapt_ms,
    };
    let mut rows = vec![row(&session)];
    let respond = |session: &InteractiveSession, user: &mut SimulatedUser, k: usize| {
        user.respond(
            &session.segmentation().working.regions,
            session.labels(),
            &synth.ground_truth,
            &scene.dots,
            session.prediction(),
            k,
        )
    };

    match config.mode {
        InteractionMode::Consecutive => {
            for k in 0..config.interactions {
                let record = match respond(&session, &mut user, k) {
                    Ok(r) => r,
                    Err(Error::Exhausted) => break,
                    Err(e) => return Err(e),
                };
                session.push_record(record)?;
                session.adapt_and_refresh()?;
                user.observe_segmentation(session.labels());
                rows.push(row(&session));
            }
        }
        InteractionMode::NonConsecutive => {
            let mut collected = 0;
            for k in 0..config.interactions {
                match respond(&session, &mut user, k) {
                    Ok(r) => session.push_record(r)?,
                    Err(Error::Exhausted) => break,
                    Err(e) => return Err(e),
                }
                collected += 1;
            }
            if collected > 0 {
                session.adapt_and_refresh()?;
                let mut last = row(&session);
                last.iteration = collected;
                rows.push(last);
            }
        }
    }
    Ok(rows)
}

/// Rows of every (scene, seed) pair, scene-major within each seed.
pub fn run_suite(config: &ExperimentConfig) -> Result<Vec<SessionRow>> {
    config.validate()?;
    let scenes = generate_suite(&config.suite);
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        for (id, scene) in scenes.iter().enumerate() {
            rows.extend(run_session(id, scene, seed, config)?);
        }
    }
    Ok(rows)
}

fn check_pairs(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("metric inputs"));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictions for {} ground-truth values",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

pub fn metric_mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn metric_rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let mse = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Mean and standard error (`sd / sqrt(n)`, zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mae: f64,
    pub mae_se: f64,
    pub rmse: f64,
    pub rmse_se: f64,
    pub seg_ms: f64,
    pub adapt_ms: f64,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    pub iterations: Vec<IterationStats>,
    /// Relative MAE drop from the first to the last iteration, `1 - final / initial`.
    pub mae_reduction: f64,
    pub mae_reduction_se: f64,
}

impl SuiteReport {
    pub fn initial(&self) -> &IterationStats {
        &self.iterations[0]
    }

    pub fn last(&self) -> &IterationStats {
        self.iterations.last().expect("reports have at least one iteration")
    }
}

/// Aggregates rows: per seed, errors are averaged over scenes; the report
/// gives the mean and standard error of those seed-level values.
pub fn summarize(rows: &[SessionRow]) -> Result<SuiteReport> {
    if rows.is_empty() {
        return Err(Error::Empty("result rows"));
    }
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut iters: Vec<usize> = rows.iter().map(|r| r.iteration).collect();
    iters.sort_unstable();
    iters.dedup();

    let mut per_seed_mae: Vec<Vec<f64>> = vec![Vec::new(); seeds.len()];
    let mut iterations = Vec::with_capacity(iters.len());
    for &it in &iters {
        let (mut maes, mut rmses) = (Vec::new(), Vec::new());
        let at: Vec<&SessionRow> = rows.iter().filter(|r| r.iteration == it).collect();
        for (si, &seed) in seeds.iter().enumerate() {
            let (p, g): (Vec<f64>, Vec<f64>) = at
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| (r.pred_total, r.gt_total))
                .unzip();
            if p.is_empty() {
                continue;
            }
            let mae = metric_mae(&p, &g)?;
            maes.push(mae);
            rmses.push(metric_rmse(&p, &g)?);
            per_seed_mae[si].push(mae);
        }
        let (mae, mae_se) = mean_se(&maes);
        let (rmse, rmse_se) = mean_se(&rmses);
        let n = at.len() as f64;
        iterations.push(IterationStats {
            iteration: it,
            mae,
            mae_se,
            rmse,
            rmse_se,
            seg_ms: at.iter().map(|r| r.seg_ms).sum::<f64>() / n,
            adapt_ms: at.iter().map(|r| r.adapt_ms).sum::<f64>() / n,
            sessions: at.len(),
        });
    }

    let reductions: Vec<f64> = per_seed_mae
        .iter()
        .filter(|m| m.len() >= 2 && m[0] > 0.0)
        .map(|m| 1.0 - m[m.len() - 1] / m[0])
        .collect();
    let (mae_reduction, mae_reduction_se) = if reductions.is_empty() { (0.0, 0.0) } else { mean_se(&reductions) };
    Ok(SuiteReport {
        seeds,
        iterations,
        mae_reduction,
        mae_reduction_se,
    })
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[SessionRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SessionRow>> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Rows and report of a finished experiment.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub rows: Vec<SessionRow>,
    pub report: SuiteReport,
    pub elapsed_s: f64,
}

/// Runs the suite and writes whatever outputs the config names.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    let t = Instant::now();
    let rows = run_suite(config)?;
    let report = summarize(&rows)?;
    if let Some(p) = &config.output.csv {
        write_csv(p, &rows)?;
    }
    if let Some(p) = &config.output.json {
        crate::formats::save_json(p, &report)?;
    }
    Ok(ExperimentRun {
        rows,
        report,
        elapsed_s: t.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(metric_mae(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), 1.0);
        assert_eq!(metric_rmse(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), 1.0);
        assert_eq!(metric_mae(&[0.0, 10.0], &[4.0, 4.0]).unwrap(), 5.0);
        assert!((metric_rmse(&[0.0, 10.0], &[4.0, 4.0]).unwrap() - 26f64.sqrt()).abs() < 1e-12);
        assert_eq!(metric_mae(&[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
        assert!(metric_mae(&[], &[]).is_err());
        assert!(metric_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn standard_error_over_seed_means() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((se - (2.5f64 / 5.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn single_row_summary() {
        let rows = vec![SessionRow {
            scene_id: 0,
            seed: 5,
            iteration: 0,
            pred_total: 12.0,
            gt_total: 10.0,
            seg_ms: 1.0,
            adapt_ms: 0.0,
        }];
        let rep = summarize(&rows).unwrap();
        assert_eq!(rep.iterations.len(), 1);
        assert_eq!(rep.initial().mae, 2.0);
        assert_eq!(rep.initial().rmse, 2.0);
        assert_eq!(rep.initial().mae_se, 0.0);
    }

    #[test]
    fn suite_is_deterministic() {
        let spec = SuiteSpec {
            scenes: 4,
            ..SuiteSpec::default()
        };
        assert_eq!(generate_suite(&spec), generate_suite(&spec));
        for s in generate_suite(&spec) {
            assert!((5..=60).contains(&s.dots.len()));
            assert!(spec.sizes.contains(&s.height));
        }
    }

    #[test]
    fn zero_interactions_report_only_the_baseline() {
        let cfg = ExperimentConfig {
            suite: SuiteSpec {
                scenes: 2,
                sizes: vec![64],
                ..SuiteSpec::default()
            },
            interactions: 0,
            seeds: vec![5],
            ..ExperimentConfig::default()
        };
        let rows = run_suite(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.iteration == 0));
    }
}

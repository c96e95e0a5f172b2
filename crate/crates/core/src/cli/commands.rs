use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Dataset, ExperimentConfig};
use crate::density::{
    compute_log_omega, density_metrics, write_grid_csv, write_pgm16, DensityMetrics, GridSpec, MixtureOfGaussians,
    SPURIOUS_RADIUS,
};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{auc, make_constant_gray, make_noise, score_dataset, write_image_sheet, write_scores_csv, ScoredDataset};
use crate::model::{AutoencoderModel, Energy};
use crate::sampler::{omi_generate, NoiseDistribution};
use crate::trainer::{LossReport, TraceRecord, TraceSink, Trainer};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn output_dir(out: Option<&Path>, checkpoint: &Path) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// One JSON object per line, flushed per record so the file always matches
/// the last completed step.
struct JsonlSink {
    path: PathBuf,
    file: BufWriter<File>,
}

impl TraceSink for JsonlSink {
    fn record(&mut self, rec: &TraceRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Opens the trace for appending after keeping its first `keep` records.
fn open_trace(path: &Path, keep: usize) -> Result<JsonlSink> {
    let mut kept = Vec::new();
    if keep > 0 {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().take(keep) {
            kept.push(line.map_err(|e| Error::io(path, e))?);
        }
        if kept.len() < keep {
            return Err(Error::Parse(format!(
                "{}: has {} records, the checkpoint expects {keep}",
                path.display(),
                kept.len()
            )));
        }
    }
    let mut file = create(path)?;
    for line in kept {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(JsonlSink {
        path: path.to_path_buf(),
        file,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epochs: Vec<LossReport>,
}

/// Trains from a config (or resumes from a checkpoint) and writes the
/// trace, periodic checkpoints and a final checkpoint to the output directory.
pub fn cmd_train(config: Option<&Path>, checkpoint: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<TrainOutcome> {
    let (cfg, state) = match checkpoint {
        Some(ck) => {
            if seed.is_some() {
                return Err(Error::invalid("--seed cannot be changed when resuming from a checkpoint"));
            }
            let c = Checkpoint::load(ck)?;
            (c.config, Some(c.trainer))
        }
        None => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            (seed.map_or(cfg.clone(), |s| cfg.with_seed(s)), None)
        }
    };
    cfg.validate()?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out_dir)?;
    let cfg_path = out_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let data = cfg.load_data()?;
    let d_x = data.train.last_dim();
    let mut trainer = match state {
        Some(s) => Trainer::from_state(s)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = AutoencoderModel::new(cfg.model_spec(d_x), &mut rng)?;
            Trainer::new(model, cfg.sampler(d_x)?, cfg.train.clone())?
        }
    };
    trainer.set_record_wall_time(cfg.output.record_wall_time);
    let mut sink = open_trace(&out_dir.join(TRACE_FILE), trainer.steps_done() as usize)?;

    let every = cfg.output.checkpoint_every;
    let shape = data.image_shape;
    let epochs = trainer.train(&data.train, &mut sink, |t| {
        let e = t.epochs_done();
        eprintln!("epoch {e}/{}: step {}, T = {:.4}", t.total_epochs(), t.steps_done(), t.model.temperature());
        if every > 0 && e % every == 0 && !t.is_finished() {
            Checkpoint::new(cfg.clone(), shape, t.state()).save(&out_dir.join(format!("checkpoint_epoch{e:04}.json")))?;
        }
        Ok(())
    })?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    Checkpoint::new(cfg.clone(), shape, trainer.state()).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        out_dir,
        final_checkpoint,
        epochs,
    })
}

/// Grid CSV, 16-bit heat map and density metrics of a 2-D model.
pub fn cmd_density(checkpoint: &Path, resolution: Option<usize>, out: Option<&Path>) -> Result<DensityMetrics> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    if model.input_dim() != 2 {
        return Err(Error::invalid(format!(
            "density needs a two-dimensional model, this one has D = {}",
            model.input_dim()
        )));
    }
    let res = resolution.unwrap_or(ck.config.output.grid_resolution);
    let grid = compute_log_omega(&model, &GridSpec::square(2, -4.0, 4.0, res))?;
    let heldout = ck.config.load_data()?.test_inliers;
    let metrics = density_metrics(&model, &grid, &MixtureOfGaussians::mixture8(), &heldout, SPURIOUS_RADIUS)?;

    let dir = output_dir(out, checkpoint);
    ensure_dir(&dir)?;
    let csv = dir.join("density.csv");
    let mut w = create(&csv)?;
    write_grid_csv(&grid, &mut w)?;
    finish(&csv, w)?;
    let pgm = dir.join("density.pgm");
    let mut w = create(&pgm)?;
    write_pgm16(&grid, &mut w)?;
    finish(&pgm, w)?;
    write_json(&dir.join("density_metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Decoded draws from the latent noise distribution.
    Z0,
    /// Decodes after the latent chain.
    Omi,
    /// Samples after the input-space chain.
    Full,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Z0 => "z0",
            SampleMode::Omi => "omi",
            SampleMode::Full => "full",
        }
    }
}

/// Writes one row per sample, columns `x0..x{D-1}`.
pub fn write_matrix_csv<W: Write>(t: &Tensor, mut out: W) -> Result<()> {
    let err = |e: std::io::Error| Error::Parse(format!("write failed: {e}"));
    let header: Vec<String> = (0..t.last_dim()).map(|k| format!("x{k}")).collect();
    writeln!(out, "{}", header.join(",")).map_err(err)?;
    for row in t.iter_rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(",")).map_err(err)?;
    }
    Ok(())
}

/// Reads a numeric CSV into `[rows, cols]`; a non-numeric first line is a header.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))),
        };
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse(format!("{}:{}: ragged row", path.display(), i + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    Tensor::new(vec![rows, width.unwrap_or(0)], data)
}

/// Runs the generation pipeline and writes the requested stage.
pub fn cmd_sample(checkpoint: &Path, n: usize, mode: SampleMode, seed: Option<u64>, out: Option<&Path>) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("--n must be >= 1"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(ck.config.train.seed));
    rng.set_stream(3);
    let s = &ck.config.sampler;
    let stages = omi_generate(&model, &s.latent, &s.main_chain(), n, &mut rng)?;
    let x = match mode {
        SampleMode::Z0 => stages.z0_decoded,
        SampleMode::Omi => stages.omi,
        SampleMode::Full => stages.samples,
    };
    let dir = output_dir(out, checkpoint);
    ensure_dir(&dir)?;
    let csv = dir.join(format!("samples_{}.csv", mode.name()));
    let mut w = create(&csv)?;
    write_matrix_csv(&x, &mut w)?;
    finish(&csv, w)?;
    if let Some((h, wd)) = ck.image_shape {
        let pgm = dir.join(format!("samples_{}.pgm", mode.name()));
        let mut w = create(&pgm)?;
        let cols = (n as f64).sqrt().ceil() as usize;
        write_image_sheet(&x, h, wd, cols, &mut w)?;
        finish(&pgm, w)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub outlier_set: String,
    pub auc: f64,
    pub n_inliers: usize,
    pub n_outliers: usize,
}

/// AUC of reconstruction-error scores for every (inlier, outlier) pairing.
///
/// With explicit CSV sets only that pair is scored. Otherwise the mixture
/// is paired with the uniform box, and images with the hold-out class,
/// ConstantGray and Noise.
pub fn cmd_eval_ood(
    checkpoint: &Path,
    inliers: Option<&Path>,
    outliers: Option<&Path>,
    n: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Vec<OodResult>> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let d = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(ck.config.data.seed));
    rng.set_stream(4);

    let (inlier_set, outlier_sets): (Tensor, Vec<(String, Tensor)>) = match (inliers, outliers) {
        (Some(i), Some(o)) => (read_matrix_csv(i)?, vec![("custom".into(), read_matrix_csv(o)?)]),
        (None, None) => match ck.config.data.dataset {
            Dataset::Mixture8 => {
                let inl = MixtureOfGaussians::mixture8().sample(n, &mut rng);
                let box_ = NoiseDistribution::UniformBox { dim: d, lo: -4.0, hi: 4.0 }.sample(n, &mut rng);
                (inl, vec![("uniform_box".into(), box_)])
            }
            Dataset::Idx => {
                let data = ck.config.load_data()?;
                let mut sets = Vec::new();
                if let Some(h) = data.test_outliers {
                    sets.push(("holdout".into(), h));
                }
                sets.push(("constant_gray".into(), make_constant_gray(n, d, &mut rng)));
                sets.push(("noise".into(), make_noise(n, d, &mut rng)));
                (data.test_inliers, sets)
            }
        },
        _ => return Err(Error::invalid("--inliers and --outliers go together")),
    };
    if inlier_set.rows() == 0 {
        return Err(Error::invalid("no inlier test data (set data.test_images or pass --inliers)"));
    }
    let inlier_scores = score_dataset(&model, &inlier_set)?;

    let dir = output_dir(out, checkpoint);
    ensure_dir(&dir)?;
    let mut results = Vec::new();
    for (name, set) in outlier_sets {
        if set.rows() == 0 {
            continue;
        }
        let scored = ScoredDataset::from_groups(&inlier_scores, &score_dataset(&model, &set)?)?;
        let path = dir.join(format!("scores_{name}.csv"));
        let mut w = create(&path)?;
        write_scores_csv(&scored, &mut w)?;
        finish(&path, w)?;
        results.push(OodResult {
            auc: auc(&scored)?,
            n_inliers: inlier_set.rows(),
            n_outliers: set.rows(),
            outlier_set: name,
        });
    }
    write_json(&dir.join("ood_report.json"), &results)?;
    Ok(results)
}

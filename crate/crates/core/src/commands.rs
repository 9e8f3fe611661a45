//! The four top-level commands. Each returns a summary for the caller to
//! print; files are written here.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::io::{category_of, index_clouds, load_cloud, save_cloud};
use crate::metrics::{self, Norm};
use crate::model::{Model, ModelConfig};
use crate::points::PointCloud;
use crate::runconfig::RunConfig;
use crate::selftest::{self, Check};
use crate::train::{self, StepRecord, TrainReport};

#[derive(Clone, Debug)]
pub struct CompleteArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Without a checkpoint the model is freshly initialised from the seed.
    pub checkpoint: Option<PathBuf>,
    pub emit_hyperpoints: bool,
    pub concat_input: bool,
}

#[derive(Clone, Debug)]
pub struct CompleteSummary {
    pub input_points: usize,
    pub output_points: usize,
    pub hyperpoints: usize,
    pub hyperpoints_path: Option<PathBuf>,
    pub elapsed: Duration,
}

impl fmt::Display for CompleteSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input {} points, output {} points, {} hyperpoints",
            self.input_points, self.output_points, self.hyperpoints
        )?;
        if let Some(p) = &self.hyperpoints_path {
            write!(f, " ({})", p.display())?;
        }
        write!(f, ", {:.3}s", self.elapsed.as_secs_f64())
    }
}

/// `out.xyz` → `out.hyperpoints.xyz`
pub fn hyperpoints_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match output.extension() {
        Some(ext) => format!("{stem}.hyperpoints.{}", ext.to_string_lossy()),
        None => format!("{stem}.hyperpoints"),
    };
    output.with_file_name(name)
}

pub fn cmd_complete(rc: &RunConfig, args: &CompleteArgs) -> Result<CompleteSummary> {
    let start = Instant::now();
    rc.validate()?;
    let input = load_cloud(&args.input)?;
    let model = match &args.checkpoint {
        Some(p) => checkpoint::load(p, Some(&rc.model))?,
        None => Model::new(rc.model.clone())?,
    };
    let out = model.complete(&input)?;
    let completed = if args.concat_input {
        out.completed.concat(&input)
    } else {
        out.completed
    };
    save_cloud(&args.output, &completed)?;
    let hyperpoints_path = if args.emit_hyperpoints {
        let p = hyperpoints_path(&args.output);
        save_cloud(&p, &PointCloud::new(out.centers.clone())?)?;
        Some(p)
    } else {
        None
    };
    Ok(CompleteSummary {
        input_points: input.len(),
        output_points: completed.len(),
        hyperpoints: out.centers.rows(),
        hyperpoints_path,
        elapsed: start.elapsed(),
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    /// Partial inputs; when given, fidelity is reported too.
    pub input_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeScore {
    pub id: String,
    pub category: String,
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MeanScores {
    pub count: usize,
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub phi: f64,
    pub overall: MeanScores,
    pub categories: BTreeMap<String, MeanScores>,
    pub skipped: Vec<Skipped>,
    pub warnings: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scores: Vec<ShapeScore>,
    pub summary: EvalSummary,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

fn means<'a>(scores: impl Iterator<Item = &'a ShapeScore>) -> MeanScores {
    let mut m = MeanScores::default();
    let mut fid = (0.0, 0usize);
    for s in scores {
        m.count += 1;
        m.cd_l1 += s.cd_l1;
        m.cd_l2 += s.cd_l2;
        m.f_score += s.f_score;
        if let Some(f) = s.fidelity {
            fid = (fid.0 + f, fid.1 + 1);
        }
    }
    if m.count > 0 {
        let n = m.count as f64;
        m.cd_l1 /= n;
        m.cd_l2 /= n;
        m.f_score /= n;
    }
    m.fidelity = (fid.1 > 0).then(|| fid.0 / fid.1 as f64);
    m
}

fn score(id: &str, pred: &Path, gt: &Path, input: Option<&Path>, phi: f64) -> Result<ShapeScore> {
    let p = load_cloud(pred)?;
    let g = load_cloud(gt)?;
    let fidelity = match input {
        Some(i) => Some(metrics::fidelity(&load_cloud(i)?, &p)),
        None => None,
    };
    Ok(ShapeScore {
        id: id.to_string(),
        category: category_of(id).to_string(),
        cd_l1: metrics::chamfer(&p, &g, Norm::L1),
        cd_l2: metrics::chamfer(&p, &g, Norm::L2),
        f_score: metrics::f_score(&p, &g, phi)?,
        fidelity,
    })
}

/// Scores every prediction that has a ground-truth file of the same
/// relative name and writes `per_shape.csv` and `summary.json` to
/// `out_dir`. Shapes are ordered by key; `*.hyperpoints.*` files are
/// ignored.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    if !(args.phi > 0.0 && args.phi.is_finite()) {
        return Err(Error::Config(format!("phi must be positive, got {}", args.phi)));
    }
    // skips companions written by `complete --emit-hyperpoints`
    let clouds = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut m = index_clouds(dir)?;
        m.retain(|k, _| !k.ends_with(".hyperpoints"));
        Ok(m)
    };
    let preds = clouds(&args.pred_dir)?;
    let gts = clouds(&args.gt_dir)?;
    let inputs = args.input_dir.as_deref().map(index_clouds).transpose()?;
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (id, pred) in &preds {
        let Some(gt) = gts.get(id) else {
            skipped.push(Skipped { id: id.clone(), reason: "no ground truth".into() });
            continue;
        };
        let input = match &inputs {
            Some(map) => match map.get(id) {
                Some(p) => Some(p.as_path()),
                None => {
                    skipped.push(Skipped { id: id.clone(), reason: "no input cloud".into() });
                    continue;
                }
            },
            None => None,
        };
        match score(id, pred, gt, input, args.phi) {
            Ok(s) => scores.push(s),
            Err(e) => skipped.push(Skipped { id: id.clone(), reason: e.to_string() }),
        }
    }
    for id in gts.keys().filter(|k| !preds.contains_key(*k)) {
        skipped.push(Skipped { id: id.clone(), reason: "no prediction".into() });
    }
    skipped.sort_by(|a, b| a.id.cmp(&b.id));

    let mut categories: BTreeMap<String, MeanScores> = BTreeMap::new();
    for cat in scores.iter().map(|s| s.category.clone()).collect::<std::collections::BTreeSet<_>>() {
        let m = means(scores.iter().filter(|s| s.category == cat));
        categories.insert(cat, m);
    }
    let summary = EvalSummary {
        phi: args.phi,
        overall: means(scores.iter()),
        categories,
        warnings: skipped.len(),
        skipped,
    };

    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let csv_path = args.out_dir.join("per_shape.csv");
    let json_path = args.out_dir.join("summary.json");
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format { path: csv_path.clone(), msg: e.to_string() };
    w.write_record(["id", "category", "cd_l1", "cd_l2", "f_score", "fidelity"]).map_err(csv_err)?;
    for s in &scores {
        let fid = s.fidelity.map(|f| f.to_string()).unwrap_or_default();
        w.write_record([&s.id, &s.category, &s.cd_l1.to_string(), &s.cd_l2.to_string(), &s.f_score.to_string(), &fid])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format { path: csv_path.clone(), msg: e.to_string() })?;
    fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format { path: json_path.clone(), msg: e.to_string() })?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(EvalReport { scores, summary, csv_path, json_path })
}

#[derive(Clone, Debug)]
pub struct ToyTrainOutput {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub elapsed: Duration,
}

/// Trains on every pair under `rc.shapes_dir` and writes the final
/// checkpoint and the loss curve. Paths left unset in `rc` default to
/// `model.ckpt` and `loss.csv` in `out_dir`.
pub fn cmd_toy_train(rc: &RunConfig, out_dir: &Path, on_step: impl FnMut(&StepRecord)) -> Result<ToyTrainOutput> {
    let start = Instant::now();
    rc.validate()?;
    let dir = rc
        .shapes_dir
        .as_deref()
        .ok_or_else(|| Error::Config("shapes_dir is not set".into()))?;
    let pairs = train::load_pairs(dir)?;
    let mut model = Model::new(rc.model.clone())?;
    let report = train::train(&mut model, &pairs, rc, on_step)?;
    let ckpt = rc.checkpoint.clone().unwrap_or_else(|| out_dir.join("model.ckpt"));
    let csv_path = rc.loss_csv.clone().unwrap_or_else(|| out_dir.join("loss.csv"));
    checkpoint::save(&ckpt, &model)?;
    if let Some(d) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(&csv_path, train::loss_csv(&report.records)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok(ToyTrainOutput {
        report,
        checkpoint: ckpt,
        loss_csv: csv_path,
        elapsed: start.elapsed(),
    })
}

#[derive(Clone, Debug)]
pub struct SelfTestOutput {
    pub checks: Vec<Check>,
    /// Parameter count of the default (C = 384) model.
    pub default_params: usize,
}

impl SelfTestOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Published size of the full model, for comparison only.
pub const REFERENCE_PARAMS: f64 = 34.06e6;

impl fmt::Display for SelfTestOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&selftest::format_table(&self.checks))?;
        let p = self.default_params as f64;
        writeln!(
            f,
            "parameters at C=384: {} ({:.2} M, {:+.1}% vs reference 34.06 M; informational)",
            self.default_params,
            p / 1e6,
            (p / REFERENCE_PARAMS - 1.0) * 100.0
        )?;
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

pub fn cmd_selftest(opts: selftest::Options) -> Result<SelfTestOutput> {
    let checks = selftest::run_all(opts);
    let default_params = Model::new(ModelConfig::default())?.num_params();
    Ok(SelfTestOutput { checks, default_params })
}

//! Gradient-based fitting of the model on (partial, complete) pairs.

use std::path::Path;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::io::{index_clouds, load_cloud};
use crate::metrics::{self, Norm};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::points::PointCloud;
use crate::runconfig::RunConfig;
use crate::synthetic::ShapePair;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Batch mean of the training objective before the update.
    pub loss: f64,
    pub reconstruction: f64,
    pub expansion: f64,
    /// Batch mean CD-ℓ2 between completed clouds and ground truth.
    pub cd_l2: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// CD-ℓ2 of the untrained model.
    pub baseline_cd_l2: f64,
    /// CD-ℓ2 after the last update.
    pub final_cd_l2: f64,
    pub mst_evaluations: usize,
}

/// Pairs `partial/<key>` with `complete/<key>` under `dir`.
pub fn load_pairs(dir: &Path) -> Result<Vec<ShapePair>> {
    let partial = index_clouds(&dir.join("partial"))?;
    let complete = index_clouds(&dir.join("complete"))?;
    let mut out = Vec::new();
    for (key, p) in &partial {
        if let Some(c) = complete.get(key) {
            out.push(ShapePair {
                id: key.clone(),
                category: crate::io::category_of(key).to_string(),
                partial: load_cloud(p)?,
                complete: load_cloud(c)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "{}: no matching partial/ and complete/ clouds",
            dir.display()
        )));
    }
    Ok(out)
}

/// Mean CD-ℓ2 of the model's completions over `pairs`.
pub fn evaluate_cd_l2(model: &Model, pairs: &[ShapePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = model.complete(&p.partial)?;
        total += metrics::chamfer(&out.completed, &p.complete, Norm::L2);
    }
    Ok(total / pairs.len() as f64)
}

/// Runs `rc.steps` AdamW updates on the batch-mean total loss, cycling
/// through `pairs` in order. `on_step` sees each record as it is produced.
pub fn train(
    model: &mut Model,
    pairs: &[ShapePair],
    rc: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    rc.validate()?;
    let lp = model.config.loss_params();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: rc.lr,
            weight_decay: rc.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let mut report = TrainReport::default();
    let mut last_finite: Option<(usize, f64)> = None;
    let b = rc.batch_size;
    for step in 0..rc.steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let mut rec = StepRecord {
            step,
            loss: 0.0,
            reconstruction: 0.0,
            expansion: 0.0,
            cd_l2: 0.0,
        };
        for j in 0..b {
            let pair = &pairs[(step * b + j) % pairs.len()];
            let g = Graph::with_params(&model.params);
            let out = model.forward(&g, &pair.partial)?;
            let truth = g.constant(pair.complete.tensor().clone());
            let (loss, parts) = metrics::total_loss_var(out.centers, out.completed, truth, &lp)?;
            report.mst_evaluations += parts.stats.mst_evaluations;
            let completed = PointCloud::new((*out.completed.value()).clone());
            rec.loss += parts.total / b as f64;
            rec.reconstruction += parts.reconstruction / b as f64;
            rec.expansion += parts.expansion / b as f64;
            if let Ok(c) = completed {
                rec.cd_l2 += metrics::chamfer(&c, &pair.complete, Norm::L2) / b as f64;
            } else {
                rec.cd_l2 = f64::NAN;
            }
            let gs = g.backward(loss.scale(1.0 / b as f64))?.into_param_grads(&model.params);
            grads = Some(match grads {
                None => gs,
                Some(mut acc) => {
                    for (a, x) in acc.iter_mut().zip(&gs) {
                        a.add_assign(x);
                    }
                    acc
                }
            });
        }
        let grads = grads.expect("batch is nonempty");
        if !rec.loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
            let last = match last_finite {
                Some((s, l)) => format!("last finite step {s} with loss {l}"),
                None => "no finite step".to_string(),
            };
            return Err(Error::Numeric(format!("loss diverged at step {step} ({}); {last}", rec.loss)));
        }
        last_finite = Some((step, rec.loss));
        if step == 0 {
            report.baseline_cd_l2 = rec.cd_l2;
        }
        on_step(&rec);
        report.records.push(rec);
        opt.step(&mut model.params, &grads)?;
    }
    report.final_cd_l2 = evaluate_cd_l2(model, pairs)?;
    if report.records.is_empty() {
        report.baseline_cd_l2 = report.final_cd_l2;
    }
    Ok(report)
}

/// Loss curve as CSV with a header row.
pub fn loss_csv(records: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
    w.write_record(["step", "loss", "reconstruction", "expansion", "cd_l2"]).map_err(io)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.reconstruction.to_string(),
            r.expansion.to_string(),
            r.cd_l2.to_string(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))
}

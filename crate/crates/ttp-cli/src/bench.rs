//! Batch experiments over independent synthetic scenarios: fan out across a
//! worker pool, evaluate per-sample and aggregate metrics, and emit
//! deterministic CSV/JSON reports (identical across thread counts).

use std::fmt::Write as _;

use nalgebra::{DVector, Vector2, Vector3};
use ttp_core::solver::{fit, fit_with_scale, FitProblem, FitResult, FitSettings};

use crate::jsonio::{fmt_f64, JsonWriter};
use crate::metrics::{evaluate, SampleMetrics};
use crate::synth::{generate, SyntheticScenario};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scenario: SyntheticScenario,
    pub samples: usize,
    pub threads: usize,
    pub settings: FitSettings,
    /// Re-evaluate metrics at every outer iteration (prefix re-runs).
    pub per_iteration: bool,
    /// Metric raster resolution.
    pub resolution: usize,
}

/// Outcome of one sample; failures are recorded, never fatal.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub sample: usize,
    pub outcome: Result<BenchOk, String>,
}

#[derive(Debug, Clone)]
pub struct BenchOk {
    pub metrics: SampleMetrics,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub evals: usize,
    /// `(outer iteration, metrics at that prefix)`, iteration 0 = the
    /// initialized state before any alternation.
    pub per_iteration: Vec<(usize, SampleMetrics)>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub iterations: usize,
}

fn run_sample(config: &BenchConfig, sample: usize) -> Result<BenchOk, String> {
    let mut scenario = config.scenario.clone();
    scenario.seed = scenario.seed.wrapping_add(sample as u64);
    let problem_data = generate(&scenario).map_err(|e| e.to_string())?;
    let problem = FitProblem::new(
        &problem_data.mesh,
        &problem_data.basis,
        &problem_data.observation,
        config.settings,
    )
    .map_err(|e| e.to_string())?;
    let result = fit(&problem, None).map_err(|e| e.to_string())?;
    let metrics = evaluate(
        &problem_data.mesh,
        &problem_data.basis,
        &problem_data.observation,
        &problem_data.truth,
        &result,
        config.resolution,
    );
    let mut per_iteration = Vec::new();
    if config.per_iteration {
        // The alternation is prefix-stable, so an iterations=k run equals
        // the first k iterations of the full run.
        let scale = result.scale;
        let init_state = FitResult {
            rotation: Vector3::zeros(),
            translation: weighted_centroid(&problem_data.observation),
            scale,
            coefficients: DVector::zeros(problem_data.basis.components()),
            objective_trace: Vec::new(),
            converged: false,
            evals: 0,
        };
        per_iteration.push((
            0,
            evaluate(
                &problem_data.mesh,
                &problem_data.basis,
                &problem_data.observation,
                &problem_data.truth,
                &init_state,
                config.resolution,
            ),
        ));
        for k in 1..=config.settings.iterations {
            let mut settings = config.settings;
            settings.iterations = k;
            let prefix_problem = FitProblem::new(
                &problem_data.mesh,
                &problem_data.basis,
                &problem_data.observation,
                settings,
            )
            .map_err(|e| e.to_string())?;
            let prefix = fit_with_scale(&prefix_problem, scale, None).map_err(|e| e.to_string())?;
            per_iteration.push((
                k,
                evaluate(
                    &problem_data.mesh,
                    &problem_data.basis,
                    &problem_data.observation,
                    &problem_data.truth,
                    &prefix,
                    config.resolution,
                ),
            ));
        }
    }
    Ok(BenchOk {
        metrics,
        trace: result.objective_trace,
        converged: result.converged,
        evals: result.evals,
        per_iteration,
    })
}

fn weighted_centroid(obs: &ttp_core::solver::Observation) -> Vector2<f64> {
    let mut wsum = 0.0;
    let mut sum = Vector2::zeros();
    for (u, &v) in obs.points.iter().zip(&obs.visibility) {
        wsum += v;
        sum += u * v;
    }
    if wsum > 0.0 {
        sum / wsum
    } else {
        obs.points.iter().sum::<Vector2<f64>>() / obs.len().max(1) as f64
    }
}

/// Run every sample, fanning out over `threads` workers. Rows come back
/// ordered by sample index, so the report is identical for any thread count.
pub fn run(config: &BenchConfig) -> BenchReport {
    assert!(config.samples >= 1);
    let threads = config.threads.max(1).min(config.samples);
    let mut rows: Vec<Option<BenchRow>> = (0..config.samples).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..threads {
            let config = &*config;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut sample = worker;
                while sample < config.samples {
                    out.push(BenchRow {
                        sample,
                        outcome: run_sample(config, sample),
                    });
                    sample += threads;
                }
                out
            }));
        }
        for handle in handles {
            for row in handle.join().expect("bench worker panicked") {
                let slot = row.sample;
                rows[slot] = Some(row);
            }
        }
    });
    BenchReport {
        rows: rows.into_iter().map(|r| r.expect("all samples ran")).collect(),
        iterations: config.settings.iterations,
    }
}

impl BenchReport {
    pub fn ok_rows(&self) -> impl Iterator<Item = (usize, &BenchOk)> {
        self.rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|ok| (r.sample, ok)))
    }

    /// Per-sample CSV: metrics columns, the objective trace, and a status
    /// field holding the error text of failed samples.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,status");
        for column in SampleMetrics::COLUMNS {
            let _ = write!(out, ",{column}");
        }
        for it in 1..=self.iterations {
            let _ = write!(out, ",objective_{it}");
        }
        out.push_str(",converged,evals\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(ok) => {
                    let _ = write!(out, "{},ok", row.sample);
                    for idx in 0..SampleMetrics::COLUMNS.len() {
                        let _ = write!(out, ",{}", fmt_f64(ok.metrics.column(idx)));
                    }
                    for value in &ok.trace {
                        let _ = write!(out, ",{}", fmt_f64(*value));
                    }
                    let _ = writeln!(out, ",{},{}", ok.converged, ok.evals);
                }
                Err(message) => {
                    let _ = write!(out, "{},\"{}\"", row.sample, message.replace('"', "'"));
                    for _ in 0..SampleMetrics::COLUMNS.len() + self.iterations {
                        out.push(',');
                    }
                    out.push_str(",false,0\n");
                }
            }
        }
        out
    }

    /// Per-iteration CSV (only meaningful when the run recorded it).
    pub fn per_iteration_csv(&self) -> String {
        let mut out = String::from("sample,iteration");
        for column in SampleMetrics::COLUMNS {
            let _ = write!(out, ",{column}");
        }
        out.push('\n');
        for (sample, ok) in self.ok_rows() {
            for (iteration, metrics) in &ok.per_iteration {
                let _ = write!(out, "{sample},{iteration}");
                for idx in 0..SampleMetrics::COLUMNS.len() {
                    let _ = write!(out, ",{}", fmt_f64(metrics.column(idx)));
                }
                out.push('\n');
            }
        }
        out
    }

    /// JSON summary with per-column mean/median/stddev (population) over the
    /// successful rows. `meta` carries only deterministic invocation facts
    /// and is omitted entirely under `--no-meta`.
    pub fn summary_json(&self, meta: Option<&[(String, String)]>) -> String {
        let mut w = JsonWriter::new();
        w.begin_object();
        w.key("samples").value_usize(self.rows.len());
        let ok_count = self.ok_rows().count();
        w.key("ok").value_usize(ok_count);
        w.key("failed").value_usize(self.rows.len() - ok_count);
        w.key("aggregate").begin_object();
        for (idx, column) in SampleMetrics::COLUMNS.iter().enumerate() {
            let mut values: Vec<f64> = self.ok_rows().map(|(_, ok)| ok.metrics.column(idx)).collect();
            w.key(column).begin_object();
            if values.is_empty() {
                w.key("mean").value_f64(f64::NAN.max(0.0));
                w.end_object();
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let median = if values.len() % 2 == 1 {
                values[values.len() / 2]
            } else {
                0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
            };
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            w.key("mean").value_f64(mean);
            w.key("median").value_f64(median);
            w.key("stddev").value_f64(var.sqrt());
            w.end_object();
        }
        w.end_object();
        if let Some(meta) = meta {
            w.key("meta").begin_object();
            for (key, value) in meta {
                w.key(key).value_str(value);
            }
            w.end_object();
        }
        w.end_object();
        w.finish()
    }
}

//! SI-SDR improvement metrics, extraction accuracy, and report rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LoadedDataset;
use crate::dsp::Waveform;
use crate::model::{ExampleIds, TseModel};
use crate::par;
use crate::train::{si_sdr, TrainError};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] TrainError),
    #[error("no results to aggregate")]
    Empty,
    #[error("I/O error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-example evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub utterance_id: String,
    pub target_speaker: String,
    pub si_sdr_mix: f64,
    pub si_sdr_est: f64,
    pub si_sdri: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub mean_si_sdri: f64,
    /// Percentage of rows with SI-SDRi strictly above 1 dB.
    pub accuracy: f64,
    /// Per-example failures (missing audio, model errors); excluded from the
    /// aggregate.
    pub errors: Vec<String>,
}

/// SI-SDR improvement of the estimate over the unprocessed mixture.
/// Lengths are truncated to the shortest of the three signals first; this
/// perturbs values at the ~1e-3 dB level when synthesis drops tail samples.
pub fn si_sdri(
    est: &[f64],
    mixture: &[f64],
    reference: &[f64],
    mean_subtract: bool,
) -> Result<f64, TrainError> {
    let n = est.len().min(mixture.len()).min(reference.len());
    let est_sdr = si_sdr(&est[..n], &reference[..n], mean_subtract)?;
    let mix_sdr = si_sdr(&mixture[..n], &reference[..n], mean_subtract)?;
    Ok(est_sdr - mix_sdr)
}

/// Extraction accuracy: percentage of examples with SI-SDRi > 1 dB
/// (strictly greater; exactly 1 dB counts as a failure).
pub fn accuracy(si_sdri_values: &[f64]) -> Result<f64, EvalError> {
    if si_sdri_values.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = si_sdri_values.iter().filter(|&&v| v > 1.0).count();
    Ok(100.0 * hits as f64 / si_sdri_values.len() as f64)
}

fn aggregate(rows: Vec<EvalRow>, errors: Vec<String>) -> Result<EvalResult, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let values: Vec<f64> = rows.iter().map(|r| r.si_sdri).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let acc = accuracy(&values)?;
    Ok(EvalResult {
        rows,
        mean_si_sdri: mean,
        accuracy: acc,
        errors,
    })
}

/// Evaluate an arbitrary estimator over a dataset. With `both_directions`
/// every mixture is scored once per target speaker (switched enrollment).
/// Per-example evaluation runs in parallel; ordering and aggregation are
/// deterministic.
pub fn evaluate_with<F>(
    estimator: F,
    ds: &LoadedDataset,
    both_directions: bool,
    mean_subtract: bool,
) -> Result<EvalResult, EvalError>
where
    F: Fn(&Waveform, &Waveform, ExampleIds<'_>) -> Result<Waveform, String> + Sync + Send,
{
    let directions: &[usize] = if both_directions { &[0, 1] } else { &[0] };
    let jobs: Vec<(usize, usize)> = ds
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, _)| directions.iter().map(move |&d| (i, d)))
        .collect();
    let outcomes = par::map(&jobs, |&(i, d)| {
        let entry = &ds.entries[i];
        let reference = &entry.sources[d];
        let enrollment = &entry.enrollments[d];
        let ids = ExampleIds {
            mixture: &entry.mixture_id,
            enrollment: &entry.enrollment_ids[d],
        };
        let utterance_id = format!("{}#spk{}", entry.mixture_id, d);
        match estimator(&entry.mixture, enrollment, ids) {
            Err(e) => Err(format!("{utterance_id}: {e}")),
            Ok(est) => {
                let est_sdr = match si_sdr_pair(&est, reference, mean_subtract) {
                    Ok(v) => v,
                    Err(e) => return Err(format!("{utterance_id}: {e}")),
                };
                let mix_sdr = match si_sdr_pair(&entry.mixture, reference, mean_subtract) {
                    Ok(v) => v,
                    Err(e) => return Err(format!("{utterance_id}: {e}")),
                };
                Ok(EvalRow {
                    utterance_id,
                    target_speaker: entry.speaker_ids[d].clone(),
                    si_sdr_mix: mix_sdr,
                    si_sdr_est: est_sdr,
                    si_sdri: est_sdr - mix_sdr,
                })
            }
        }
    });
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(e) => errors.push(e),
        }
    }
    aggregate(rows, errors)
}

fn si_sdr_pair(a: &Waveform, b: &Waveform, mean_subtract: bool) -> Result<f64, TrainError> {
    let n = a.len().min(b.len());
    si_sdr(&a.samples[..n], &b.samples[..n], mean_subtract)
}

/// Evaluate a trained model over a dataset.
pub fn evaluate_model(
    model: &TseModel,
    ds: &LoadedDataset,
    both_directions: bool,
    mean_subtract: bool,
) -> Result<EvalResult, EvalError> {
    evaluate_with(
        |mixture, enrollment, ids| {
            model
                .estimate(mixture, enrollment, Some(ids))
                .map_err(|e| e.to_string())
        },
        ds,
        both_directions,
        mean_subtract,
    )
}

pub fn write_results_jsonl(
    path: &Path,
    result: &EvalResult,
    config_hash: &str,
    label: &str,
) -> Result<(), EvalError> {
    let mut text = String::new();
    let header = serde_json::json!({
        "kind": "summary",
        "label": label,
        "config_hash": config_hash,
        "mean_si_sdri": result.mean_si_sdri,
        "accuracy": result.accuracy,
        "rows": result.rows.len(),
        "errors": result.errors.len(),
    });
    text.push_str(&header.to_string());
    text.push('\n');
    for row in &result.rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    for err in &result.errors {
        let line = serde_json::json!({"kind": "error", "detail": err});
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One row of the feature-ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub tf_map: String,
    pub contextual: bool,
    pub speaker_embedding: bool,
    pub si_sdri: f64,
    pub accuracy: f64,
}

/// Render the ablation table as markdown with a delta column against the
/// named baseline row.
pub fn ablation_table_markdown(rows: &[AblationRow], baseline_label: Option<&str>) -> String {
    let baseline = baseline_label
        .and_then(|l| rows.iter().find(|r| r.label == l))
        .map(|r| r.si_sdri);
    let mut out = String::new();
    out.push_str("| Config | TF map | Contextual | Speaker emb. | SI-SDRi (dB) | Accuracy (%) | Delta (dB) |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let delta = baseline
            .map(|b| format!("{:+.2}", r.si_sdri - b))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} | {:.2} | {} |\n",
            r.label,
            r.tf_map,
            if r.contextual { "yes" } else { "no" },
            if r.speaker_embedding { "yes" } else { "no" },
            r.si_sdri,
            r.accuracy,
            delta
        ));
    }
    out
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,tf_map,contextual,speaker_embedding,si_sdri_db,accuracy_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            r.label, r.tf_map, r.contextual, r.speaker_embedding, r.si_sdri, r.accuracy
        ));
    }
    out
}

/// Per-split metric curves (one value per epoch per split).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SplitCurves {
    pub epochs: Vec<usize>,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

pub fn curves_csv(curves: &SplitCurves) -> String {
    let mut out = String::from("epoch,split,si_sdri_db\n");
    for (i, &e) in curves.epochs.iter().enumerate() {
        for (split, series) in [
            ("train", &curves.train),
            ("val", &curves.val),
            ("test", &curves.test),
        ] {
            if let Some(v) = series.get(i) {
                out.push_str(&format!("{e},{split},{v:.4}\n"));
            }
        }
    }
    out
}

/// Minimal SVG line chart of the split curves (optional plot output).
pub fn curves_svg(curves: &SplitCurves, title: &str) -> String {
    let (w, h, pad) = (640.0f64, 360.0f64, 48.0f64);
    let series = [
        ("train", &curves.train, "#1f77b4"),
        ("val", &curves.val, "#ff7f0e"),
        ("test", &curves.test, "#2ca02c"),
    ];
    let all: Vec<f64> = series
        .iter()
        .flat_map(|(_, s, _)| s.iter().cloned())
        .collect();
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
        (l.min(v), u.max(v))
    });
    let (lo, hi) = if all.is_empty() || (hi - lo) < 1e-9 {
        (0.0, 1.0)
    } else {
        (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
    };
    let n = curves.epochs.len().max(2) as f64;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        w / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    ));
    for (idx, (name, values, color)) in series.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" \
             font-size=\"12\">{name}</text>\n",
            w - pad + 4.0,
            y(*values.last().unwrap()) + 4.0 * idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[2.0, 0.5, 3.0, -1.0]).unwrap(), 50.0);
        assert_eq!(accuracy(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[10.0; 5]).unwrap(), 100.0);
        assert!(matches!(accuracy(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let a = [2.0, 0.5, 3.0, -1.0, 1.0001, 0.9999];
        let mut b = a;
        b.reverse();
        assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
    }

    #[test]
    fn si_sdri_of_mixture_is_exactly_zero() {
        let mixture = vec![0.3, -0.2, 0.9, 0.1];
        let reference = vec![0.5, -0.1, 0.4, 0.2];
        let v = si_sdri(&mixture, &mixture, &reference, false).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn si_sdri_hand_case() {
        // si_sdr([1,0],[1,1]) = 0 dB, so a perfect estimate improves by the
        // clamp value.
        let mixture = vec![1.0, 0.0];
        let reference = vec![1.0, 1.0];
        let v = si_sdri(&reference, &mixture, &reference, false).unwrap();
        assert_eq!(v, crate::train::SI_SDR_CLAMP_DB - 0.0);
    }

    #[test]
    fn table_delta_matches_subtraction() {
        let rows = vec![
            AblationRow {
                label: "spk".into(),
                tf_map: "off".into(),
                contextual: false,
                speaker_embedding: true,
                si_sdri: 3.0,
                accuracy: 60.0,
            },
            AblationRow {
                label: "tfmap-emb+ctx".into(),
                tf_map: "emb".into(),
                contextual: true,
                speaker_embedding: false,
                si_sdri: 5.5,
                accuracy: 90.0,
            },
        ];
        let md = ablation_table_markdown(&rows, Some("spk"));
        assert!(md.contains("+2.50"), "{md}");
        let csv = ablation_table_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn curves_csv_has_three_series() {
        let curves = SplitCurves {
            epochs: vec![0, 1],
            train: vec![1.0, 2.0],
            val: vec![0.5, 1.5],
            test: vec![0.2, 1.2],
        };
        let csv = curves_csv(&curves);
        assert_eq!(csv.lines().count(), 1 + 6);
        let svg = curves_svg(&curves, "desk");
        assert!(svg.contains("polyline"));
    }
}

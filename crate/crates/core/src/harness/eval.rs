//! Evaluation: teacher-forced losses, greedy and beam token error rates, the
//! per-accent breakdown and the coefficient-distribution report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::accents::{make_reference_targets, ClusterModel, ReferenceMode};
use crate::corpus::Utterance;
use crate::decode::{ctc_greedy, decode_utterance, levenshtein};
use crate::error::{Error, Result};
use crate::losses::{coeff_mse, ctc_loss, s2s_loss, LossBreakdown};
use crate::model::checkpoint::Checkpoint;
use crate::model::Model;

use super::MetricsRow;

/// Mean teacher-forced losses over a split plus greedy-CTC token error rate.
/// Cheap enough to run after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn split_metrics(
    model: &Model,
    cluster: Option<&ClusterModel>,
    reference_mode: Option<ReferenceMode>,
    utts: &[Utterance],
    lambda_ctc: f64,
    gamma_mtl: f64,
    epoch: usize,
    split: &str,
) -> Result<MetricsRow> {
    if utts.is_empty() {
        return Err(Error::Input("empty split".into()));
    }
    let mut sum_ctc = 0.0;
    let mut sum_s2s = 0.0;
    let mut sum_mse = 0.0;
    let mut edits = 0usize;
    let mut ref_tokens = 0usize;
    for u in utts {
        let z = model.has_adapter().then_some(&u.embedding);
        let (out, _, _) = model.forward(&u.features, &u.tokens, z)?;
        let (l_ctc, _) = ctc_loss(&out.ctc_log_probs, &u.tokens)?;
        let (l_s2s, _) = s2s_loss(&out.s2s_log_probs, &u.tokens)?;
        sum_ctc += l_ctc;
        sum_s2s += l_s2s;
        if let (Some(cl), Some(alpha), Some(mode)) = (cluster, &out.alpha, reference_mode) {
            let reference = make_reference_targets(cl, &u.embedding, mode)?;
            let (l_mse, _) = coeff_mse(&reference, alpha)?;
            sum_mse += l_mse;
        }
        let hyp = ctc_greedy(&out.ctc_log_probs);
        edits += levenshtein(&u.tokens, &hyp);
        ref_tokens += u.tokens.len();
    }
    let n = utts.len() as f64;
    let breakdown = LossBreakdown::new(sum_ctc / n, sum_s2s / n, sum_mse / n, lambda_ctc, gamma_mtl)?;
    Ok(MetricsRow::from_breakdown(
        epoch,
        split,
        &breakdown,
        edits as f64 / ref_tokens as f64,
    ))
}

#[derive(Clone, Debug)]
pub struct UtteranceDecode {
    pub utt_id: String,
    pub accent: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: MetricsRow,
    /// Token-weighted error rate per accent; aggregates to the overall TER.
    pub per_accent_ter: BTreeMap<String, f64>,
    pub decodes: Vec<UtteranceDecode>,
}

/// Full evaluation of a split: teacher-forced losses plus beam-decoded TER
/// with the per-accent breakdown.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    ckpt: &Checkpoint,
    utts: &[Utterance],
    lambda_ctc: f64,
    gamma_mtl: f64,
    reference_mode: Option<ReferenceMode>,
    beam: usize,
    ctc_weight: f64,
    split: &str,
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Input("empty split".into()));
    }
    let model = &ckpt.model;
    let mut row = split_metrics(
        model,
        ckpt.cluster.as_ref(),
        reference_mode,
        utts,
        lambda_ctc,
        gamma_mtl,
        0,
        split,
    )?;

    let mut decodes = Vec::with_capacity(utts.len());
    let mut per_accent: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut edits = 0usize;
    let mut ref_tokens = 0usize;
    for u in utts {
        let z = model.has_adapter().then_some(&u.embedding);
        let (hyp, _) = decode_utterance(model, &u.features, z, beam, ctc_weight)?;
        let d = levenshtein(&u.tokens, &hyp.tokens);
        edits += d;
        ref_tokens += u.tokens.len();
        let acc = per_accent.entry(u.accent.clone()).or_insert((0, 0));
        acc.0 += d;
        acc.1 += u.tokens.len();
        decodes.push(UtteranceDecode {
            utt_id: u.utt_id.clone(),
            accent: u.accent.clone(),
            reference: u.tokens.clone(),
            hypothesis: hyp.tokens,
        });
    }
    row.ter = edits as f64 / ref_tokens as f64;
    Ok(EvalReport {
        metrics: row,
        per_accent_ter: per_accent
            .into_iter()
            .map(|(a, (d, n))| (a, d as f64 / n as f64))
            .collect(),
        decodes,
    })
}

pub fn write_decodes_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "utt_id,accent,reference,hypothesis,ter")?;
    for d in &report.decodes {
        let join = |t: &[usize]| {
            t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        };
        let ter = levenshtein(&d.reference, &d.hypothesis) as f64 / d.reference.len() as f64;
        writeln!(
            out,
            "{},{},{},{},{ter:.6}",
            d.utt_id,
            d.accent,
            join(&d.reference),
            join(&d.hypothesis)
        )?;
    }
    Ok(())
}

/// Linear interpolation between closest ranks; `sorted` ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Five-number summary of one basis coefficient within one accent.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSummary {
    pub accent: String,
    pub basis: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Writes one row of predicted coefficients per utterance plus a per-accent,
/// per-basis quartile summary next to it (`<out>.summary.csv`).
pub fn export_coefficients(
    ckpt: &Checkpoint,
    utts: &[Utterance],
    out_path: &Path,
) -> Result<Vec<CoefficientSummary>> {
    let model = &ckpt.model;
    let stack = model
        .adapter
        .as_ref()
        .filter(|s| s.predictor.is_some())
        .ok_or_else(|| {
            Error::Usage("coefficient export needs a multi-basis or combined adapter".into())
        })?;
    let n = stack.spec.n_bases;

    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    let header: Vec<String> = std::iter::once("utt_id".to_string())
        .chain(std::iter::once("accent".to_string()))
        .chain((0..n).map(|k| format!("alpha_{k}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;

    let mut by_accent: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for u in utts {
        let alpha = stack
            .predict(&u.embedding)?
            .map(|(a, _)| a)
            .expect("predictor presence checked above");
        let vals: Vec<String> = alpha.values().iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{},{},{}", u.utt_id, u.accent, vals.join(","))?;
        by_accent
            .entry(u.accent.clone())
            .or_default()
            .push(alpha.values().to_vec());
    }

    let mut summaries = Vec::new();
    for (accent, rows) in &by_accent {
        for k in 0..n {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            summaries.push(CoefficientSummary {
                accent: accent.clone(),
                basis: k,
                min: vals[0],
                q1: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q3: quantile(&vals, 0.75),
                max: *vals.last().unwrap(),
            });
        }
    }

    let summary_path = out_path.with_extension("summary.csv");
    let mut sout = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    writeln!(sout, "accent,basis,min,q1,median,q3,max")?;
    for s in &summaries {
        writeln!(
            sout,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.accent, s.basis, s.min, s.q1, s.median, s.q3, s.max
        )?;
    }
    Ok(summaries)
}

/// For each accent, the basis index with the largest median coefficient.
pub fn dominant_basis(summaries: &[CoefficientSummary]) -> BTreeMap<String, usize> {
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for s in summaries {
        let entry = best.entry(s.accent.clone()).or_insert((s.basis, s.median));
        if s.median > entry.1 {
            *entry = (s.basis, s.median);
        }
    }
    best.into_iter().map(|(a, (b, _))| (a, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_hand_checked() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        let single = [7.0];
        assert_eq!(quantile(&single, 0.5), 7.0);
    }
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EncodedExample, ParameterVector, Prediction, QaModel};
use crate::error::{Error, Result};
use crate::text::{exact_match, nls, normalize_answer};

/// NLS values below this threshold count as zero in ANLS.
pub const ANLS_THRESHOLD: f64 = 0.5;
/// Confidence cut-off for the high-confidence columns.
pub const CONF_HI: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    /// Exact-match accuracy in percent.
    pub acc: f64,
    /// Thresholded average NLS in percent.
    pub anls: f64,
    pub n: usize,
    /// Same metrics restricted to predictions with `conf >= 0.9`; `None` if
    /// no prediction is that confident.
    pub acc_conf_hi: Option<f64>,
    pub anls_conf_hi: Option<f64>,
    pub n_conf_hi: usize,
}

/// Scores `(predicted, gold, conf)` triples.
pub fn evaluate_predictions<'a, I>(items: I, tau: f64) -> Result<UtilityReport>
where
    I: IntoIterator<Item = (&'a str, &'a str, f64)>,
{
    let (mut n, mut acc, mut anls) = (0usize, 0.0, 0.0);
    let (mut nh, mut acc_h, mut anls_h) = (0usize, 0.0, 0.0);
    for (pred, gold, conf) in items {
        let a = if exact_match(pred, gold) { 1.0 } else { 0.0 };
        // scored on normalized text so an exact match always has NLS 1
        let s = nls(&normalize_answer(pred), &normalize_answer(gold));
        let s = if s < tau { 0.0 } else { s };
        n += 1;
        acc += a;
        anls += s;
        if conf >= CONF_HI {
            nh += 1;
            acc_h += a;
            anls_h += s;
        }
    }
    if n == 0 {
        return Err(Error::Input("cannot evaluate an empty set".into()));
    }
    let pct = |x: f64, k: usize| 100.0 * x / k as f64;
    Ok(UtilityReport {
        acc: pct(acc, n),
        anls: pct(anls, n),
        n,
        acc_conf_hi: (nh > 0).then(|| pct(acc_h, nh)),
        anls_conf_hi: (nh > 0).then(|| pct(anls_h, nh)),
        n_conf_hi: nh,
    })
}

/// ACC / ANLS of the model on encoded examples.
pub fn evaluate(model: &QaModel, params: &ParameterVector, examples: &[EncodedExample]) -> Result<UtilityReport> {
    let preds: Vec<Prediction> =
        examples.iter().map(|e| model.forward(params, &e.input, Some(e.gold))).collect::<Result<_>>()?;
    let vocab = model.vocab();
    evaluate_predictions(
        preds.iter().zip(examples).map(|(p, e)| (p.answer.as_str(), vocab.answer(e.gold), p.conf)),
        ANLS_THRESHOLD,
    )
}

/// Writes `set,acc,anls,n,acc_conf_hi,anls_conf_hi`; absent values are empty.
pub fn write_utility_csv<W: Write>(w: W, rows: &[(String, UtilityReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["set", "acc", "anls", "n", "acc_conf_hi", "anls_conf_hi"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for (set, r) in rows {
        out.write_record([
            set.clone(),
            format!("{:.4}", r.acc),
            format!("{:.4}", r.anls),
            r.n.to_string(),
            opt(r.acc_conf_hi),
            opt(r.anls_conf_hi),
        ])?;
    }
    out.flush()?;
    Ok(())
}

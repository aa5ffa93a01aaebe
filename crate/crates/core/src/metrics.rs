//! Dice evaluation, per-tract aggregation and the paired Student's t-test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::BinaryMask3D;

/// `2|a ∩ b| / (|a| + |b|)`, and 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        log::debug!("dice: both masks empty, scoring 1.0");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Serialized as a string when infinite.
    #[serde(with = "extended_f64")]
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
}

/// JSON has no infinities; `±∞` and NaN travel as `"inf"`, `"-inf"`, `"nan"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => Repr::Number(v),
            v if v.is_nan() => Repr::Text("nan".into()),
            v if v > 0.0 => Repr::Text("inf".into()),
            _ => Repr::Text("-inf".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

/// Two-sided paired t-test on `x − y` with `n − 1` degrees of freedom.
///
/// When the differences have zero variance the statistic is undefined; the
/// result is then `t = ±∞, p = 0` for a non-zero mean difference and
/// `t = 0, p = 1` otherwise.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "paired t-test needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Invalid(format!("paired t-test needs n >= 2, got {n}")));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // Differences that are all equal can still leave rounding noise in var.
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if var <= (scale * 1e-14).powi(2) {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                mean_difference: mean,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                mean_difference: mean,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, df as f64),
        df,
        mean_difference: mean,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)` via Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, n = 9), ~15 significant digits.
#[allow(clippy::excessive_precision)]
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Dice scores per `(tract, subject)` with the two levels of averaging used
/// in the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub tracts: Vec<String>,
    pub subjects: Vec<String>,
    /// `per_tract_per_subject[tract][subject]`.
    pub per_tract_per_subject: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_tract_mean: BTreeMap<String, f64>,
    pub grand_mean: f64,
}

impl DiceReport {
    /// Mean Dice over tracts for each subject, in subject order.
    pub fn per_subject_mean(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .map(|s| {
                self.tracts
                    .iter()
                    .map(|t| self.per_tract_per_subject[t][s])
                    .sum::<f64>()
                    / self.tracts.len() as f64
            })
            .collect()
    }

    /// Scores of one tract in subject order.
    pub fn tract_scores(&self, tract: &str) -> Option<Vec<f64>> {
        let row = self.per_tract_per_subject.get(tract)?;
        Some(self.subjects.iter().map(|s| row[s]).collect())
    }
}

/// Collects `(tract, subject, dice)` triples into a [`DiceReport`].
///
/// Every tract × subject cell must be present exactly once.
pub fn aggregate(tracts: &[String], subjects: &[String], scores: &[(String, String, f64)]) -> Result<DiceReport> {
    if tracts.is_empty() || subjects.is_empty() {
        return Err(Error::Empty("aggregate needs at least one tract and one subject"));
    }
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (t, s, d) in scores {
        if !tracts.contains(t) || !subjects.contains(s) {
            return Err(Error::Invalid(format!("score for unknown cell ({t}, {s})")));
        }
        if !(0.0..=1.0).contains(d) {
            return Err(Error::Invalid(format!("Dice {d} for ({t}, {s}) outside [0, 1]")));
        }
        if table.entry(t.clone()).or_default().insert(s.clone(), *d).is_some() {
            return Err(Error::Invalid(format!("duplicate score for ({t}, {s})")));
        }
    }
    let missing: Vec<String> = tracts
        .iter()
        .flat_map(|t| subjects.iter().map(move |s| (t, s)))
        .filter(|(t, s)| !table.get(*t).is_some_and(|row| row.contains_key(*s)))
        .map(|(t, s)| format!("({t}, {s})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("missing Dice cells: {}", missing.join(", "))));
    }
    let per_tract_mean: BTreeMap<String, f64> = tracts
        .iter()
        .map(|t| {
            let row = &table[t];
            let mean = subjects.iter().map(|s| row[s]).sum::<f64>() / subjects.len() as f64;
            (t.clone(), mean)
        })
        .collect();
    let grand_mean = tracts.iter().map(|t| per_tract_mean[t]).sum::<f64>() / tracts.len() as f64;
    Ok(DiceReport {
        tracts: tracts.to_vec(),
        subjects: subjects.to_vec(),
        per_tract_per_subject: table,
        per_tract_mean,
        grand_mean,
    })
}

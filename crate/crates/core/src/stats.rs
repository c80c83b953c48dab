//! Agreement statistics: Bland-Altman limits, one-way ICC and the F
//! distribution needed for its confidence interval. Everything runs in f64.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation (`n - 1` denominator; 0 for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, sd, n })
}

/// One (reference, test) measurement pair, e.g. a vessel diameter in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub reference: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedMeasurements {
    pub pairs: Vec<PairRecord>,
}

impl PairedMeasurements {
    pub fn from_values(values: &[(f64, f64)]) -> Self {
        Self {
            pairs: values
                .iter()
                .enumerate()
                .map(|(i, &(reference, test))| PairRecord {
                    id: i.to_string(),
                    reference,
                    test,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV columns: id, reference, test.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            pairs: crate::io_util::read_csv(path.as_ref())?,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io_util::write_csv(path.as_ref(), &self.pairs)
    }

    /// Reference and test as the two raters of a rating table.
    pub fn to_rating_table(&self) -> Result<RatingTable> {
        RatingTable::new(self.pairs.iter().map(|p| vec![p.reference, p.test]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
}

/// Bias (mean of `test - reference`) and limits `bias ± 1.96 SD`.
pub fn bland_altman(pairs: &PairedMeasurements) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: pairs.len(),
        });
    }
    let d: Vec<f64> = pairs.pairs.iter().map(|p| p.test - p.reference).collect();
    let s = summarize(&d)?;
    Ok(BlandAltman {
        bias: s.mean,
        sd: s.sd,
        loa_low: s.mean - 1.96 * s.sd,
        loa_high: s.mean + 1.96 * s.sd,
        n: s.n,
    })
}

/// Subjects x raters, complete.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTable {
    rows: Vec<Vec<f64>>,
}

/// One cell of a long-format ratings CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject: String,
    pub rater: String,
    pub value: f64,
}

impl RatingTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n < 2 || k < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: n.min(k),
            });
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("every subject needs the same number of ratings".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rating table contains a non-finite value".into()));
        }
        Ok(Self { rows })
    }

    /// Builds the table from long-format records; subjects and raters keep
    /// their first-appearance order. Missing or duplicate cells are errors.
    pub fn from_records(records: &[RatingRecord]) -> Result<Self> {
        let mut subjects: Vec<&str> = Vec::new();
        let mut raters: Vec<&str> = Vec::new();
        let mut cells: HashMap<(&str, &str), f64> = HashMap::new();
        for r in records {
            if !subjects.contains(&r.subject.as_str()) {
                subjects.push(&r.subject);
            }
            if !raters.contains(&r.rater.as_str()) {
                raters.push(&r.rater);
            }
            if cells.insert((&r.subject, &r.rater), r.value).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate rating for subject {:?}, rater {:?}",
                    r.subject, r.rater
                )));
            }
        }
        let rows = subjects
            .iter()
            .map(|s| {
                raters
                    .iter()
                    .map(|r| {
                        cells.get(&(*s, *r)).copied().ok_or_else(|| {
                            Error::Parse(format!("missing rating for subject {s:?}, rater {r:?}"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// CSV columns: subject, rater, value.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<RatingRecord> = crate::io_util::read_csv(path.as_ref())?;
        Self::from_records(&records)
    }

    pub fn subjects(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub icc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Between-subject and within-subject mean squares.
    pub msb: f64,
    pub msw: f64,
}

/// One-way random-effects, single-rater ICC(1,1) with a 95% interval from
/// the F ratio `MSB / MSW` on `(n - 1, n (k - 1))` degrees of freedom.
pub fn icc_oneway(table: &RatingTable) -> Result<Icc> {
    let n = table.subjects();
    let k = table.raters();
    let (nf, kf) = (n as f64, k as f64);
    let grand = table.rows.iter().flatten().sum::<f64>() / (nf * kf);
    let means: Vec<f64> = table.rows.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let ssb = kf * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssw: f64 = table
        .rows
        .iter()
        .zip(&means)
        .map(|(r, m)| r.iter().map(|x| (x - m).powi(2)).sum::<f64>())
        .sum();
    let (df1, df2) = (nf - 1.0, nf * (kf - 1.0));
    let msb = ssb / df1;
    let msw = ssw / df2;
    if msb == 0.0 && msw == 0.0 {
        return Err(Error::UndefinedIcc);
    }
    let icc = (msb - msw) / (msb + (kf - 1.0) * msw);
    if msw == 0.0 {
        return Ok(Icc {
            icc,
            ci_low: 1.0,
            ci_high: 1.0,
            msb,
            msw,
        });
    }
    let f = msb / msw;
    let bound = |fx: f64| (fx - 1.0) / (fx + kf - 1.0);
    let f_lo = f / f_quantile(0.975, df1, df2);
    let f_hi = f / f_quantile(0.025, df1, df2);
    Ok(Icc {
        icc,
        ci_low: bound(f_lo),
        ci_high: bound(f_hi),
        msb,
        msw,
    })
}

/// CDF of the F distribution with `d1`, `d2` degrees of freedom.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let z = d1 * x / (d1 * x + d2);
    regularized_beta(z, d1 / 2.0, d2 / 2.0)
}

/// Inverse of [`f_cdf`] by bisection. `p` must lie in (0, 1).
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "f_quantile needs p in (0, 1), got {p}");
    assert!(d1 > 0.0 && d2 > 0.0, "degrees of freedom must be positive");
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f_cdf(hi, d1, d2) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f_cdf(mid, d1, d2) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Regularized incomplete beta `I_x(a, b)`, continued fraction evaluated
/// with the modified Lentz method.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fastest for x below the mean; use the symmetry
    // I_x(a, b) = 1 - I_{1-x}(b, a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
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
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for aa in [
            m * (b - m) * x / ((qam + m2) * (a + m2)),
            -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2)),
        ] {
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
        }
        // `d * c` of the last half-step is the convergence factor.
        if (d * c - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Bland-Altman and ICC results, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub icc: f64,
    pub icc_ci_low: f64,
    pub icc_ci_high: f64,
    pub n: usize,
}

impl AgreementReport {
    /// Limits of agreement from `pairs`; ICC from `table`, or from the pairs
    /// as two raters when no separate table is given.
    pub fn compute(pairs: &PairedMeasurements, table: Option<&RatingTable>) -> Result<Self> {
        let ba = bland_altman(pairs)?;
        let own;
        let table = match table {
            Some(t) => t,
            None => {
                own = pairs.to_rating_table()?;
                &own
            }
        };
        let icc = icc_oneway(table)?;
        Ok(Self {
            bias: ba.bias,
            loa_low: ba.loa_low,
            loa_high: ba.loa_high,
            icc: icc.icc,
            icc_ci_low: icc.ci_low,
            icc_ci_high: icc.ci_high,
            n: ba.n,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io_util::write_csv(path.as_ref(), std::slice::from_ref(self))
    }
}

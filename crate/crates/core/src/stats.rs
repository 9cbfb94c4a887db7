//! Agreement and group-difference statistics over subject cohorts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::volume::{Group, Structure};
use crate::{Error, Result};

/// Upper limit reported for F when the full model fits exactly.
pub const F_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanResult {
    pub n: usize,
    /// Mean of `predicted - true`.
    pub bias: f64,
    /// Sample SD of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Repeatability coefficient, 1.96 SD.
    pub rpc: f64,
    pub rpc_percent: f64,
    pub cv_percent: f64,
    pub grand_mean: f64,
    /// Pearson correlation of the paired values; absent when either side is
    /// constant.
    pub pearson: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn check_pairs(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Stats(format!("{what} needs at least 2 pairs, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats(format!("{what}: non-finite value")));
    }
    Ok(())
}

pub fn bland_altman(truth: &[f64], predicted: &[f64]) -> Result<BlandAltmanResult> {
    check_pairs(truth, predicted, "Bland-Altman")?;
    let d: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| p - t).collect();
    let m: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| (p + t) / 2.0).collect();
    let bias = mean(&d);
    let sd = sample_sd(&d);
    let grand_mean = mean(&m);
    if grand_mean == 0.0 {
        return Err(Error::Stats("Bland-Altman: grand mean is zero, CV undefined".into()));
    }
    let rpc = 1.96 * sd;
    Ok(BlandAltmanResult {
        n: d.len(),
        bias,
        sd,
        lower: bias - rpc,
        upper: bias + rpc,
        rpc,
        rpc_percent: rpc / grand_mean.abs() * 100.0,
        cv_percent: sd / grand_mean.abs() * 100.0,
        grand_mean,
        pearson: pearson(truth, predicted),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_difference: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    check_pairs(a, b, "paired t-test")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let sd = sample_sd(&d);
    let df = n - 1.0;
    if sd == 0.0 {
        if md == 0.0 {
            return Ok(TTestResult {
                t: 0.0,
                df,
                p: 1.0,
                mean_difference: 0.0,
                significant: false,
            });
        }
        return Err(Error::DegenerateDifferences);
    }
    let t = md / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult {
        t,
        df,
        p,
        mean_difference: md,
        significant: p < alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsMean {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncovaResult {
    pub n: usize,
    pub f: f64,
    pub df: (usize, usize),
    pub p: f64,
    /// Adjusted means at the covariate means: `[control, patient]`.
    pub ls_means: [LsMean; 2],
    pub rss_full: f64,
    pub rss_reduced: f64,
}

struct Fit {
    coef: DVector<f64>,
    rss: f64,
    /// `(XᵀX)⁻¹`
    xtx_inv: DMatrix<f64>,
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Fit> {
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..r.ncols()).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..r.ncols() {
        if r[(i, i)].abs() <= 1e-10 * max_diag.max(1e-300) {
            return Err(Error::RankDeficient(format!(
                "design column {i} is linearly dependent on the others"
            )));
        }
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let resid = y - x * &coef;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    Ok(Fit {
        rss: resid.norm_squared(),
        xtx_inv: &r_inv * r_inv.transpose(),
        coef,
    })
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    let s = sample_sd(v);
    let s = if s > 0.0 { s } else { 1.0 };
    v.iter().map(|x| (x - m) / s).collect()
}

/// Diagnosis effect on `volumes` controlling for age and ICV.
///
/// Full model `y ~ 1 + diagnosis + age + icv` against the reduced model
/// without diagnosis; F has `(1, n - 4)` degrees of freedom. Covariates are
/// standardized before fitting, which leaves every reported quantity
/// unchanged and keeps the design well conditioned.
pub fn ancova_diagnosis(volumes: &[f64], diagnosis: &[bool], age: &[f64], icv: &[f64]) -> Result<AncovaResult> {
    let n = volumes.len();
    if diagnosis.len() != n || age.len() != n || icv.len() != n {
        return Err(Error::Stats("ANCOVA inputs have different lengths".into()));
    }
    if n < 5 {
        return Err(Error::Stats(format!("ANCOVA needs at least 5 subjects, got {n}")));
    }
    if volumes.iter().chain(age).chain(icv).any(|v| !v.is_finite()) {
        return Err(Error::Stats("ANCOVA: non-finite value".into()));
    }
    let a = standardize(age);
    let c = standardize(icv);
    let d: Vec<f64> = diagnosis.iter().map(|&b| f64::from(u8::from(b))).collect();
    let y = DVector::from_column_slice(volumes);
    let full = DMatrix::from_fn(n, 4, |i, j| match j {
        0 => 1.0,
        1 => d[i],
        2 => a[i],
        _ => c[i],
    });
    let reduced = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => a[i],
        _ => c[i],
    });
    let ff = ols(&full, &y)?;
    let fr = ols(&reduced, &y)?;
    let df2 = n - 4;
    let num = (fr.rss - ff.rss).max(0.0);
    let scale = fr.rss.max(y.norm_squared()).max(f64::MIN_POSITIVE);
    let f = if ff.rss <= 1e-24 * scale {
        if num > 1e-24 * scale {
            F_CAP
        } else {
            0.0
        }
    } else {
        (num / (ff.rss / df2 as f64)).min(F_CAP)
    };
    let dist = FisherSnedecor::new(1.0, df2 as f64).map_err(|e| Error::Stats(e.to_string()))?;
    let p = if f == 0.0 { 1.0 } else { dist.sf(f).min(1.0) };
    let sigma2 = ff.rss / df2 as f64;
    // the standardized covariates have mean zero, so the adjusted means are
    // b0 and b0 + b1
    let ls = |g: f64| {
        let cvec = DVector::from_column_slice(&[1.0, g, 0.0, 0.0]);
        let var = (cvec.transpose() * &ff.xtx_inv * &cvec)[(0, 0)] * sigma2;
        LsMean {
            mean: ff.coef[0] + g * ff.coef[1],
            se: var.max(0.0).sqrt(),
        }
    };
    Ok(AncovaResult {
        n,
        f,
        df: (1, df2),
        p,
        ls_means: [ls(0.0), ls(1.0)],
        rss_full: ff.rss,
        rss_reduced: fr.rss,
    })
}

/// Which volumes of a cohort record to analyze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeSource {
    Gt,
    Ncs,
    Scs,
}

impl VolumeSource {
    pub fn prefix(self) -> &'static str {
        match self {
            VolumeSource::Gt => "gt",
            VolumeSource::Ncs => "ncs",
            VolumeSource::Scs => "scs",
        }
    }
}

/// One subject of a cohort table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub subject_id: String,
    /// `true` for patients.
    pub diagnosis: bool,
    pub age_years: f64,
    pub icv_mm3: f64,
    /// Structure volumes indexed by code - 1, per source; `None` when the
    /// source is absent from the table.
    pub gt: Option<[f64; 12]>,
    pub ncs: Option<[f64; 12]>,
    pub scs: Option<[f64; 12]>,
}

impl CohortRecord {
    pub fn volumes(&self, source: VolumeSource) -> Option<&[f64; 12]> {
        match source {
            VolumeSource::Gt => self.gt.as_ref(),
            VolumeSource::Ncs => self.ncs.as_ref(),
            VolumeSource::Scs => self.scs.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.age_years > 0.0) || !(self.icv_mm3 > 0.0) {
            return Err(Error::Stats(format!(
                "subject {}: age and ICV must be positive",
                self.subject_id
            )));
        }
        for src in [VolumeSource::Gt, VolumeSource::Ncs, VolumeSource::Scs] {
            if let Some(v) = self.volumes(src) {
                if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(Error::Stats(format!(
                        "subject {}: negative or non-finite {} volume",
                        self.subject_id,
                        src.prefix()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn cohort_header(sources: &[VolumeSource]) -> Vec<String> {
    let mut h = vec![
        "subject_id".to_string(),
        "diagnosis".into(),
        "age_years".into(),
        "icv_mm3".into(),
    ];
    for src in sources {
        for s in Structure::ALL {
            h.push(format!("{}_{}_mm3", src.prefix(), s.abbrev()));
        }
    }
    h
}

pub fn write_cohort_csv(path: &Path, records: &[CohortRecord]) -> Result<()> {
    let sources: Vec<VolumeSource> = [VolumeSource::Gt, VolumeSource::Ncs, VolumeSource::Scs]
        .into_iter()
        .filter(|s| records.iter().all(|r| r.volumes(*s).is_some()) && !records.is_empty())
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Stats(format!("{}: {e}", path.display())))?;
    w.write_record(cohort_header(&sources))?;
    for r in records {
        let mut row = vec![
            r.subject_id.clone(),
            u8::from(r.diagnosis).to_string(),
            format!("{}", r.age_years),
            format!("{}", r.icv_mm3),
        ];
        for src in &sources {
            row.extend(r.volumes(*src).expect("filtered").iter().map(|v| format!("{v}")));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<CohortRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Stats(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["subject_id", "diagnosis", "age_years", "icv_mm3"];
    for name in required {
        if col(name).is_none() {
            return Err(Error::Stats(format!("{}: missing column {name}", path.display())));
        }
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |name: &str| -> Result<f64> {
            let i = col(name).expect("checked");
            row[i].trim().parse::<f64>().map_err(|_| {
                Error::Stats(format!("{} row {}: bad number in {name}: {:?}", path.display(), line + 2, &row[i]))
            })
        };
        let volumes = |src: VolumeSource| -> Result<Option<[f64; 12]>> {
            let mut v = [0.0; 12];
            for s in Structure::ALL {
                let name = format!("{}_{}_mm3", src.prefix(), s.abbrev());
                match col(&name) {
                    Some(_) => v[s.code() as usize - 1] = num(&name)?,
                    None => return Ok(None),
                }
            }
            Ok(Some(v))
        };
        let diagnosis = match row[col("diagnosis").expect("checked")].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Stats(format!(
                    "{} row {}: diagnosis must be 0 or 1, got {other:?}",
                    path.display(),
                    line + 2
                )))
            }
        };
        let rec = CohortRecord {
            subject_id: row[col("subject_id").expect("checked")].to_string(),
            diagnosis,
            age_years: num("age_years")?,
            icv_mm3: num("icv_mm3")?,
            gt: volumes(VolumeSource::Gt)?,
            ncs: volumes(VolumeSource::Ncs)?,
            scs: volumes(VolumeSource::Scs)?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusTest {
    pub structure: String,
    pub ancova: AncovaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTest {
    pub group: String,
    pub ancova: AncovaResult,
    pub flagged: bool,
    /// Per-nucleus follow-up, run only for flagged groups.
    pub nuclei: Vec<NucleusTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub source: VolumeSource,
    pub alpha: f64,
    pub groups: Vec<GroupTest>,
}

impl GroupReport {
    pub fn flagged_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| g.flagged).map(|g| g.group.as_str()).collect()
    }

    pub fn flagged_nuclei(&self, alpha: f64) -> Vec<&str> {
        self.groups
            .iter()
            .flat_map(|g| g.nuclei.iter())
            .filter(|n| n.ancova.p < alpha)
            .map(|n| n.structure.as_str())
            .collect()
    }
}

/// Two-stage analysis: each of the four nuclei groups (summed member
/// volumes) is tested first; groups with `p < alpha` are followed up per
/// member nucleus.
pub fn group_analysis(cohort: &[CohortRecord], source: VolumeSource, alpha: f64) -> Result<GroupReport> {
    let n_pat = cohort.iter().filter(|r| r.diagnosis).count();
    if n_pat == 0 || n_pat == cohort.len() {
        return Err(Error::Stats("group analysis needs both controls and patients".into()));
    }
    let vols: Vec<&[f64; 12]> = cohort
        .iter()
        .map(|r| {
            r.volumes(source)
                .ok_or_else(|| Error::Stats(format!("subject {} has no {} volumes", r.subject_id, source.prefix())))
        })
        .collect::<Result<_>>()?;
    let diagnosis: Vec<bool> = cohort.iter().map(|r| r.diagnosis).collect();
    let age: Vec<f64> = cohort.iter().map(|r| r.age_years).collect();
    let icv: Vec<f64> = cohort.iter().map(|r| r.icv_mm3).collect();
    let of = |members: &[Structure]| -> Vec<f64> {
        vols.iter()
            .map(|v| members.iter().map(|s| v[s.code() as usize - 1]).sum())
            .collect()
    };
    let mut groups = Vec::new();
    for g in Group::NUCLEI_GROUPS {
        let members = g.members();
        let ancova = ancova_diagnosis(&of(&members), &diagnosis, &age, &icv)?;
        let flagged = ancova.p < alpha;
        let nuclei = if flagged {
            members
                .iter()
                .map(|s| {
                    Ok(NucleusTest {
                        structure: s.abbrev().to_string(),
                        ancova: ancova_diagnosis(&of(&[*s]), &diagnosis, &age, &icv)?,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        groups.push(GroupTest {
            group: g.name().to_string(),
            ancova,
            flagged,
            nuclei,
        });
    }
    Ok(GroupReport { source, alpha, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bland_altman_hand_example() {
        let t = [100.0, 100.0, 100.0];
        let p = [98.0, 100.0, 102.0];
        let r = bland_altman(&t, &p).unwrap();
        assert!(r.bias.abs() < 1e-12);
        assert!((r.sd - 2.0).abs() < 1e-12);
        assert!((r.rpc - 3.92).abs() < 1e-12);
        assert!((r.cv_percent - 2.0).abs() < 1e-12);
        assert!(r.pearson.is_none());
        let same = bland_altman(&t, &t).unwrap();
        assert_eq!((same.bias, same.sd, same.cv_percent, same.lower, same.upper), (0.0, 0.0, 0.0, 0.0, 0.0));
        let lin = bland_altman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((lin.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
        assert!(bland_altman(&[1.0, -1.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn ttest_conventions() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_ttest(&a, &a, 0.05).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(matches!(
            paired_ttest(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0], 0.05),
            Err(Error::DegenerateDifferences)
        ));
        let r = paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 0.05).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((r.p - 0.0742).abs() < 1e-4);
        let s = paired_ttest(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 0.05).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn ancova_noiseless_offset() {
        let n = 12;
        let age: Vec<f64> = (0..n).map(|i| 40.0 + 3.0 * i as f64).collect();
        let icv: Vec<f64> = (0..n).map(|i| 1.4e6 + 1.1e4 * ((i * 7) % 5) as f64).collect();
        let d: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 5000.0 - 4.0 * age[i] + 0.001 * icv[i] - if d[i] { 100.0 } else { 0.0 })
            .collect();
        let r = ancova_diagnosis(&y, &d, &age, &icv).unwrap();
        assert!(((r.ls_means[0].mean - r.ls_means[1].mean) - 100.0).abs() < 1e-8);
        assert_eq!(r.f, F_CAP);
        assert!(r.p < 1e-6);
        assert_eq!(r.df, (1, 8));

        // null: pure function of covariates
        let y0: Vec<f64> = (0..n).map(|i| 5000.0 - 4.0 * age[i] + 0.001 * icv[i]).collect();
        let r0 = ancova_diagnosis(&y0, &d, &age, &icv).unwrap();
        assert!(r0.f.abs() < 1e-6 && r0.p > 0.999);
    }

    #[test]
    fn ancova_rejects_rank_deficiency() {
        let age = [50.0; 8];
        let icv: Vec<f64> = (0..8).map(|i| 1e6 + i as f64).collect();
        let d: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert!(matches!(ancova_diagnosis(&y, &d, &age, &icv), Err(Error::RankDeficient(_))));
    }
}

//! Published per-class AUC baselines and exact fixed-point deltas against them.

use std::fmt;
use std::str::FromStr;

use crate::data::CANONICAL_CLASSES;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

/// Fixture text, embedded at build time.
pub const FIXTURE: &str = include_str!("../data/baselines_v1.csv");
pub const FIXTURE_VERSION: u32 = 1;
pub const MEAN_ROW: &str = "Mean AUC";
/// Decimal places report values are rounded to before comparison, the
/// precision of the published model columns.
pub const REPORT_SCALE: u32 = 4;

/// An exact decimal `units * 10^-scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    pub units: i64,
    pub scale: u32,
}

impl Fixed {
    /// Rounds half away from zero.
    pub fn from_f64(value: f64, scale: u32) -> Self {
        Fixed {
            units: (value * 10f64.powi(scale as i32)).round() as i64,
            scale,
        }
    }

    fn units_at(self, scale: u32) -> i64 {
        self.units * 10i64.pow(scale - self.scale)
    }

    /// Exact `self - other` at the finer of the two scales.
    pub fn minus(self, other: Fixed) -> Fixed {
        let scale = self.scale.max(other.scale);
        Fixed {
            units: self.units_at(scale) - other.units_at(scale),
            scale,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.units as f64 / 10f64.powi(self.scale as i32)
    }
}

impl FromStr for Fixed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("{s:?} is not a plain decimal"));
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let units: i64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        Ok(Fixed {
            units: if neg { -units } else { units },
            scale: frac.len() as u32,
        })
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.units < 0 { "-" } else { "" };
        let abs = self.units.unsigned_abs();
        let div = 10u64.pow(self.scale);
        if self.scale == 0 {
            write!(f, "{sign}{abs}")
        } else {
            write!(f, "{sign}{}.{:0width$}", abs / div, abs % div, width = self.scale as usize)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    pub columns: Vec<String>,
    /// Rows in canonical class order, then the mean row.
    pub rows: Vec<(String, Vec<Option<Fixed>>)>,
}

impl Baselines {
    pub fn embedded() -> Self {
        Self::parse(FIXTURE).expect("embedded baseline fixture parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let columns: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let cells = rec
                .iter()
                .skip(1)
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some) })
                .collect::<Result<Vec<_>>>()?;
            rows.push((rec[0].to_string(), cells));
        }
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        let mut expected: Vec<&str> = CANONICAL_CLASSES.to_vec();
        expected.push(MEAN_ROW);
        if names != expected {
            return Err(Error::Format(format!("baseline rows {names:?} are not the canonical classes")));
        }
        Ok(Baselines { columns, rows })
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<Fixed> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(n, _)| n == row).and_then(|(_, v)| v[c])
    }

    /// A published column as per-class values (the mean row excluded).
    pub fn column_values(&self, column: &str) -> Option<Vec<Option<f64>>> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(
            self.rows[..CANONICAL_CLASSES.len()]
                .iter()
                .map(|(_, v)| v[c].map(Fixed::to_f64))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub class: String,
    /// Report value rounded to `REPORT_SCALE`; `None` for degenerate classes.
    pub value: Option<Fixed>,
    /// `value - baseline` per fixture column; `None` when either side is missing.
    pub deltas: Vec<Option<Fixed>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub columns: Vec<String>,
    /// Canonical class rows followed by the mean row.
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn row(&self, class: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn delta(&self, class: &str, column: &str) -> Option<Fixed> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.row(class)?.deltas[c]
    }
}

/// Per-class and mean deltas of `report` against the embedded fixture.
/// The report must cover exactly the 14 canonical classes.
pub fn compare_to_baselines(report: &EvalReport) -> Result<DeltaTable> {
    compare_with(report, &Baselines::embedded())
}

pub fn compare_with(report: &EvalReport, baselines: &Baselines) -> Result<DeltaTable> {
    let names: Vec<&str> = report.classes.iter().map(|c| c.name.as_str()).collect();
    let mut unmatched: Vec<String> = names
        .iter()
        .filter(|n| !CANONICAL_CLASSES.contains(n))
        .map(|n| n.to_string())
        .collect();
    unmatched.extend(
        CANONICAL_CLASSES
            .iter()
            .filter(|c| !names.contains(c))
            .map(|c| c.to_string()),
    );
    if !unmatched.is_empty() || names.len() != CANONICAL_CLASSES.len() {
        return Err(Error::ClassNameMismatch(unmatched));
    }
    let row = |class: &str, value: Option<f64>, cells: &[Option<Fixed>]| {
        let value = value.map(|v| Fixed::from_f64(v, REPORT_SCALE));
        DeltaRow {
            class: class.to_string(),
            value,
            deltas: cells.iter().map(|c| Some(value?.minus((*c)?))).collect(),
        }
    };
    let mut rows = Vec::with_capacity(CANONICAL_CLASSES.len() + 1);
    for (class, cells) in &baselines.rows[..CANONICAL_CLASSES.len()] {
        let auc = report.classes.iter().find(|c| &c.name == class).and_then(|c| c.auc);
        rows.push(row(class, auc, cells));
    }
    let (mean_name, mean_cells) = &baselines.rows[CANONICAL_CLASSES.len()];
    rows.push(row(mean_name, Some(report.mean_auc), mean_cells));
    Ok(DeltaTable {
        columns: baselines.columns.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(s: &str) -> Fixed {
        s.parse().unwrap()
    }

    #[test]
    fn fixed_point_arithmetic() {
        assert_eq!(fx("0.85433"), Fixed { units: 85433, scale: 5 });
        assert_eq!(fx("0.8695").minus(fx("0.85433")).to_string(), "0.01517");
        assert_eq!(fx("0.8695").minus(fx("0.7451")).to_string(), "0.1244");
        assert_eq!(fx("0.7").minus(fx("0.8695")).to_string(), "-0.1695");
        assert_eq!(Fixed::from_f64(0.869542857, 4).to_string(), "0.8695");
        assert_eq!(fx("3").to_string(), "3");
        assert!("0.8a".parse::<Fixed>().is_err());
        assert!(".5".parse::<Fixed>().is_err());
    }

    #[test]
    fn fixture_cells() {
        let b = Baselines::embedded();
        assert_eq!(b.columns, ["wang_et_al", "chexnet", "synth_ensemble", "cbam_densenet121", "cbam_vgg16"]);
        assert_eq!(b.cell("Hernia", "cbam_densenet121"), Some(fx("0.9660")));
        assert_eq!(b.cell("Hernia", "cbam_vgg16"), Some(fx("0.9529")));
        assert_eq!(b.cell("Consolidation", "chexnet"), None);
        assert_eq!(b.cell(MEAN_ROW, "wang_et_al"), Some(fx("0.7451")));
        assert_eq!(b.cell(MEAN_ROW, "chexnet"), Some(fx("0.841")));
        assert_eq!(b.cell(MEAN_ROW, "synth_ensemble"), Some(fx("0.85433")));
        assert_eq!(b.cell(MEAN_ROW, "cbam_densenet121"), Some(fx("0.8681")));
        assert_eq!(b.cell(MEAN_ROW, "cbam_vgg16"), Some(fx("0.8695")));
    }

    #[test]
    fn own_column_has_zero_deltas() {
        let b = Baselines::embedded();
        let vgg = b.column_values("cbam_vgg16").unwrap();
        let report = EvalReport::from_aucs(&CANONICAL_CLASSES, &vgg).unwrap();
        let table = compare_to_baselines(&report).unwrap();
        for row in &table.rows {
            assert_eq!(table.delta(&row.class, "cbam_vgg16").unwrap().units, 0, "{}", row.class);
        }
        assert_eq!(table.delta("Consolidation", "chexnet"), None);
        assert_eq!(table.delta(MEAN_ROW, "wang_et_al").unwrap().to_string(), "0.1244");
        assert_eq!(table.delta(MEAN_ROW, "synth_ensemble").unwrap().to_string(), "0.01517");
    }

    #[test]
    fn class_name_mismatch_lists_names() {
        let mut names = CANONICAL_CLASSES.to_vec();
        names[12] = "Pleural_Thickening";
        let report = EvalReport::from_aucs(&names, &[Some(0.5); 14]).unwrap();
        match compare_to_baselines(&report) {
            Err(Error::ClassNameMismatch(u)) => assert_eq!(u, ["Pleural_Thickening", "Pleural Thickening"]),
            r => panic!("{r:?}"),
        }
        let six = EvalReport::from_aucs(&CANONICAL_CLASSES[..6], &[Some(0.5); 6]).unwrap();
        assert!(matches!(compare_to_baselines(&six), Err(Error::ClassNameMismatch(_))));
    }
}
